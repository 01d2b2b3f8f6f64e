#pragma once

#include "substeer/corpus.hpp"
#include "substeer/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace substeer::lm {

using corpus::Sequence;
using corpus::Token;

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 1;
    int mlp_ratio = 4;
    int context_len = 64;
    bool tie_head = false;
    std::uint64_t seed = 7;

    int d_ff() const noexcept { return d_model * mlp_ratio; }
    int head_dim() const noexcept { return d_model / n_heads; }
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Weight storage with SIMD alignment, so kernel results do not depend on where
// the allocator happened to place a tensor.
template <typename S>
using Tensor = std::vector<S, Eigen::aligned_allocator<S>>;

template <typename S>
struct BasicLayer {
    Tensor<S> ln1_gain, ln1_bias;
    Tensor<S> wq, wk, wv, wo;  // d x d, input-major (y = x W)
    Tensor<S> ln2_gain, ln2_bias;
    Tensor<S> w1, b1;  // d x d_ff, d_ff
    Tensor<S> w2, b2;  // d_ff x d, d

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

    friend bool operator==(const BasicLayer&, const BasicLayer&) = default;

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f("ln1.gain", self.ln1_gain);
        f("ln1.bias", self.ln1_bias);
        f("attn.wq", self.wq);
        f("attn.wk", self.wk);
        f("attn.wv", self.wv);
        f("attn.wo", self.wo);
        f("ln2.gain", self.ln2_gain);
        f("ln2.bias", self.ln2_bias);
        f("mlp.w1", self.w1);
        f("mlp.b1", self.b1);
        f("mlp.w2", self.w2);
        f("mlp.b2", self.b2);
    }
};

// Weights of the toy transformer. Tensor order in `visit` is the checkpoint order.
template <typename S>
struct BasicParams {
    ModelConfig config;
    Tensor<S> tok_emb;  // vocab x d
    Tensor<S> pos_emb;  // context x d
    std::vector<BasicLayer<S>> layers;
    Tensor<S> lnf_gain, lnf_bias;
    Tensor<S> head;  // vocab x d (empty when tied to tok_emb)

    const Tensor<S>& head_weights() const { return config.tie_head ? tok_emb : head; }

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const char*, const auto& t) { n += t.size(); });
        return n;
    }

    std::vector<S> flatten() const {
        std::vector<S> out;
        visit([&](const char*, const auto& t) { out.insert(out.end(), t.begin(), t.end()); });
        return out;
    }

    template <typename T>
    BasicParams<T> cast() const {
        BasicParams<T> out = BasicParams<T>::shaped(config, T(0));
        const auto flat = flatten();
        std::size_t pos = 0;
        out.visit([&](const char*, auto& t) {
            for (auto& x : t) x = static_cast<T>(flat[pos++]);
        });
        return out;
    }

    // Every tensor allocated and filled with `value`.
    static BasicParams shaped(const ModelConfig& c, S value) {
        const auto d = static_cast<std::size_t>(c.d_model);
        const auto v = static_cast<std::size_t>(c.vocab_size);
        const auto ff = static_cast<std::size_t>(c.d_ff());
        BasicParams p;
        p.config = c;
        p.tok_emb.assign(v * d, value);
        p.pos_emb.assign(static_cast<std::size_t>(c.context_len) * d, value);
        p.layers.resize(static_cast<std::size_t>(c.n_layers));
        for (auto& l : p.layers) {
            l.ln1_gain.assign(d, value);
            l.ln1_bias.assign(d, value);
            l.wq.assign(d * d, value);
            l.wk.assign(d * d, value);
            l.wv.assign(d * d, value);
            l.wo.assign(d * d, value);
            l.ln2_gain.assign(d, value);
            l.ln2_bias.assign(d, value);
            l.w1.assign(d * ff, value);
            l.b1.assign(ff, value);
            l.w2.assign(ff * d, value);
            l.b2.assign(d, value);
        }
        p.lnf_gain.assign(d, value);
        p.lnf_bias.assign(d, value);
        if (!c.tie_head) p.head.assign(v * d, value);
        return p;
    }

    friend bool operator==(const BasicParams&, const BasicParams&) = default;

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f("tok_emb", self.tok_emb);
        f("pos_emb", self.pos_emb);
        for (auto& layer : self.layers) layer.visit(f);
        f("lnf.gain", self.lnf_gain);
        f("lnf.bias", self.lnf_bias);
        if (!self.config.tie_head) f("head", self.head);
    }
};

using ModelParams = BasicParams<float>;

// Random initialisation from config.seed.
ModelParams init_params(const ModelConfig& config);
// All weights and gains zero: every position predicts the uniform distribution.
ModelParams zero_params(const ModelConfig& config);

// Checkpoint: "TLM1", u32 header length, JSON ModelConfig, then every tensor in
// BasicParams::visit order as little-endian float32.
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& p);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelParams& p, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

// Read-only intervention on hidden states. `layer` is a block index in
// [0, n_layers) for block outputs, or kHeadLayer (-1) for the post-final-norm
// state that feeds the head.
class HiddenStateHook {
public:
    virtual ~HiddenStateHook() = default;
    virtual bool wants(int layer) const = 0;
    virtual void apply(int layer, std::span<double> h) const = 0;
};

struct HiddenTrace {
    // n_layers + 1 capture points: embedding output, then each block output. Each T x d.
    std::vector<linalg::Matrix> layers;
    // Post-final-layer-norm states, T x d; logits = W0 h row by row.
    linalg::Matrix final_hidden;
    bool final_is_post_norm = true;
};

struct ForwardResult {
    linalg::Matrix logits;  // T x vocab
    HiddenTrace trace;
};

struct DecodeConfig {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

class Model;

// Incremental decoder with a per-layer key/value cache.
class DecodeSession {
public:
    explicit DecodeSession(const Model& model);

    // Feeds one token and returns next-token logits. The hook, when given, sees
    // this position's block outputs and final hidden state.
    std::span<const double> step(Token t, const HiddenStateHook* hook = nullptr);

    // Post-final-norm hidden state of the last fed position (after any hook).
    std::span<const double> last_hidden() const noexcept { return final_; }
    // Residual stream of the last fed position at capture point i: 0 is the
    // embedding output, i > 0 the output of block i - 1 (after any hook).
    std::span<const double> capture(std::size_t i) const;
    std::size_t position() const noexcept { return pos_; }

private:
    const Model* model_;
    std::size_t pos_ = 0;
    std::vector<Tensor<double>> keys_, values_;  // per layer, context x d
    Tensor<double> x_, a_, q_, att_, b_, h1_, scores_;
    Tensor<double> final_, logits_;
    Tensor<double> captures_;  // (n_layers + 1) x d
};

// Double-precision inference view of a ModelParams.
class Model {
public:
    explicit Model(const ModelParams& params);

    const ModelConfig& config() const noexcept { return params_.config; }
    const BasicParams<double>& params() const noexcept { return params_; }

    // Head weight W0 as a vocab x d matrix.
    linalg::Matrix head_matrix() const;

    ForwardResult forward(std::span<const Token> tokens, const HiddenStateHook* hook = nullptr,
                          bool capture_trace = true) const;

    // Logits for a final hidden state: W0 h.
    std::vector<double> head_logits(std::span<const double> h) const;

private:
    friend class DecodeSession;
    BasicParams<double> params_;
};

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// d/dh log softmax(W0 h)_y = W0^T (e_y - softmax(W0 h)), in closed form.
std::vector<double> grad_logprob_wrt_hidden(const linalg::Matrix& head, std::span<const double> h, Token y);

// Autoregressive continuation of `prompt` for T tokens. The prompt except its
// last token is ingested unsteered; each decode step (starting with the last
// prompt token) passes through the hook.
Sequence generate(const Model& model, std::span<const Token> prompt, std::size_t T,
                  const HiddenStateHook* hook = nullptr, const DecodeConfig& decode = {});

struct Generation {
    Sequence tokens;
    // Row t of each capture is the state of the step that emitted tokens[t].
    HiddenTrace trace;
};

Generation generate_traced(const Model& model, std::span<const Token> prompt, std::size_t T,
                           const HiddenStateHook* hook = nullptr, const DecodeConfig& decode = {});

// exp of the mean next-token NLL over every position of every sequence.
double perplexity(const Model& model, const std::vector<Sequence>& corpus, const HiddenStateHook* hook = nullptr);

struct TrainOptions {
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double learning_rate = 3e-3;
    double beta1 = 0.0;  // no first-moment momentum
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t warmup_steps = 50;
    double grad_clip = 1.0;
    std::size_t log_every = 0;  // 0 disables progress logging
};

struct TrainResult {
    ModelParams params;
    double final_loss = 0.0;            // mean loss over the last 50 steps
    double train_perplexity = 0.0;      // on up to 256 training sequences
    std::vector<double> loss_history;   // per step
};

TrainResult train(const ModelConfig& config, const std::vector<Sequence>& corpus, const TrainOptions& options = {});

// Mean next-token cross entropy of `batch` and its gradient, exposed for gradient checks.
template <typename S>
double loss_and_gradient(const BasicParams<S>& params, const std::vector<Sequence>& batch, BasicParams<S>& grad);

} // namespace substeer::lm
