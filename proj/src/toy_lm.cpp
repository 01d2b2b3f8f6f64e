#include "substeer/toy_lm.hpp"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "substeer/rng.hpp"
#include "toy_lm_kernels.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

namespace substeer::lm {

using kernels::RowMat;

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ParameterError("model: vocab_size must be at least 2");
    if (d_model < 1 || n_layers < 0 || n_heads < 1 || mlp_ratio < 1 || context_len < 2) {
        throw ParameterError("model: non-positive dimension in config");
    }
    if (d_model % n_heads != 0) {
        throw ParameterError("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                             std::to_string(n_heads));
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model},         {"n_layers", n_layers},
            {"n_heads", n_heads},       {"mlp_ratio", mlp_ratio},     {"context_len", context_len},
            {"tie_head", tie_head},     {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"vocab_size", "d_model",     "n_layers", "n_heads",
                                             "mlp_ratio",  "context_len", "tie_head", "seed"};
    ModelConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (!known.contains(key)) throw ParameterError("model config: unknown key '" + key + "'");
        }
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.d_model = j.value("d_model", c.d_model);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.context_len = j.value("context_len", c.context_len);
        c.tie_head = j.value("tie_head", c.tie_head);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

ModelParams init_params(const ModelConfig& config) {
    config.validate();
    ModelParams p = ModelParams::shaped(config, 0.0f);
    Rng rng(derive_seed(config.seed, 0x1a17));
    auto fill = [&](Tensor<float>& t, double stddev) {
        std::normal_distribution<double> n(0.0, stddev);
        for (float& x : t) x = static_cast<float>(n(rng));
    };
    const double out_scale = 0.02 / std::sqrt(2.0 * std::max(1, config.n_layers));
    fill(p.tok_emb, 0.02);
    fill(p.pos_emb, 0.01);
    for (auto& l : p.layers) {
        std::fill(l.ln1_gain.begin(), l.ln1_gain.end(), 1.0f);
        std::fill(l.ln2_gain.begin(), l.ln2_gain.end(), 1.0f);
        fill(l.wq, 0.02);
        fill(l.wk, 0.02);
        fill(l.wv, 0.02);
        fill(l.wo, out_scale);
        fill(l.w1, 0.02);
        fill(l.w2, out_scale);
    }
    std::fill(p.lnf_gain.begin(), p.lnf_gain.end(), 1.0f);
    if (!config.tie_head) fill(p.head, 0.02);
    return p;
}

ModelParams zero_params(const ModelConfig& config) {
    config.validate();
    return ModelParams::shaped(config, 0.0f);
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& p) {
    io::ByteWriter w;
    w.magic("TLM1");
    w.json_block(p.config.to_json());
    p.visit([&](const char*, const auto& t) {
        for (float x : t) w.f32(x);
    });
    return w.take();
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "checkpoint");
    r.expect_magic("TLM1");
    ModelConfig config;
    try {
        config = ModelConfig::from_json(r.json_block());
    } catch (const ParameterError& e) {
        throw FormatError(FormatErrorCode::metadata, e.what());
    }
    ModelParams p = ModelParams::shaped(config, 0.0f);
    p.visit([&](const char* name, auto& t) {
        r.need(4 * t.size(), name);
        for (float& x : t) {
            x = r.f32();
            if (!std::isfinite(x)) {
                throw FormatError(FormatErrorCode::invariant, std::string("checkpoint: non-finite value in ") + name);
            }
        }
    });
    if (r.remaining() != 0) throw FormatError(FormatErrorCode::invariant, "checkpoint: trailing bytes");
    return p;
}

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_checkpoint(p));
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

Model::Model(const ModelParams& params) : params_(params.cast<double>()) { params_.config.validate(); }

linalg::Matrix Model::head_matrix() const {
    const auto& c = params_.config;
    const auto& w = params_.head_weights();
    return linalg::Matrix(static_cast<std::size_t>(c.vocab_size), static_cast<std::size_t>(c.d_model),
                          std::vector<double>(w.begin(), w.end()));
}

std::vector<double> Model::head_logits(std::span<const double> h) const {
    const auto& c = params_.config;
    if (h.size() != static_cast<std::size_t>(c.d_model)) throw ParameterError("head_logits: dimension mismatch");
    Eigen::Map<const RowMat<double>> w(params_.head_weights().data(), c.vocab_size, c.d_model);
    Eigen::Map<const Eigen::VectorXd> hv(h.data(), c.d_model);
    std::vector<double> out(static_cast<std::size_t>(c.vocab_size));
    Eigen::Map<Eigen::VectorXd>(out.data(), c.vocab_size).noalias() = w * hv;
    return out;
}

namespace {

linalg::Matrix to_matrix(const RowMat<double>& m) {
    return linalg::Matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                          std::vector<double>(m.data(), m.data() + m.size()));
}

void apply_hook_rows(const HiddenStateHook* hook, int layer, RowMat<double>& x) {
    if (!hook || !hook->wants(layer)) return;
    for (Eigen::Index t = 0; t < x.rows(); ++t) hook->apply(layer, std::span<double>(x.row(t).data(), x.cols()));
}

} // namespace

ForwardResult Model::forward(std::span<const Token> tokens, const HiddenStateHook* hook, bool capture_trace) const {
    const auto& c = params_.config;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    if (T == 0) throw ParameterError("forward: empty token sequence");
    if (T > c.context_len) {
        throw ParameterError("forward: " + std::to_string(T) + " tokens exceed context length " +
                             std::to_string(c.context_len));
    }
    for (Token t : tokens) {
        if (t < 0 || t >= c.vocab_size) throw ParameterError("forward: token id " + std::to_string(t) + " out of range");
    }

    ForwardResult out;
    RowMat<double> x = kernels::embed(params_, tokens);
    if (capture_trace) out.trace.layers.push_back(to_matrix(x));
    kernels::LayerCache<double> scratch;
    for (int l = 0; l < c.n_layers; ++l) {
        kernels::block_forward(params_.layers[static_cast<std::size_t>(l)], c, x, {0, T}, scratch);
        apply_hook_rows(hook, l, x);
        if (capture_trace) out.trace.layers.push_back(to_matrix(x));
    }
    RowMat<double> xhat;
    Eigen::VectorXd rstd;
    RowMat<double> h = kernels::layer_norm(x, params_.lnf_gain, params_.lnf_bias, xhat, rstd);
    apply_hook_rows(hook, kHeadLayer, h);
    Eigen::Map<const RowMat<double>> w(params_.head_weights().data(), c.vocab_size, c.d_model);
    RowMat<double> logits = h * w.transpose();
    out.logits = to_matrix(logits);
    if (capture_trace) out.trace.final_hidden = to_matrix(h);
    return out;
}

DecodeSession::DecodeSession(const Model& model) : model_(&model) {
    const auto& c = model.config();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ctx = static_cast<std::size_t>(c.context_len);
    keys_.assign(static_cast<std::size_t>(c.n_layers), Tensor<double>(ctx * d));
    values_.assign(static_cast<std::size_t>(c.n_layers), Tensor<double>(ctx * d));
    x_.resize(d);
    a_.resize(d);
    q_.resize(d);
    att_.resize(d);
    b_.resize(d);
    h1_.resize(static_cast<std::size_t>(c.d_ff()));
    scores_.resize(ctx);
    final_.resize(d);
    logits_.resize(static_cast<std::size_t>(c.vocab_size));
    captures_.resize((static_cast<std::size_t>(c.n_layers) + 1) * d);
}

std::span<const double> DecodeSession::capture(std::size_t i) const {
    const auto d = static_cast<std::size_t>(model_->config().d_model);
    if (i > static_cast<std::size_t>(model_->config().n_layers)) {
        throw ParameterError("decode: capture point " + std::to_string(i) + " out of range");
    }
    return std::span<const double>(captures_.data() + i * d, d);
}

std::span<const double> DecodeSession::step(Token t, const HiddenStateHook* hook) {
    const auto& p = model_->params_;
    const auto& c = p.config;
    const int d = c.d_model;
    if (pos_ >= static_cast<std::size_t>(c.context_len)) {
        throw ParameterError("decode: context length " + std::to_string(c.context_len) + " exhausted");
    }
    if (t < 0 || t >= c.vocab_size) throw ParameterError("decode: token id " + std::to_string(t) + " out of range");

    using Vec = Eigen::Map<Eigen::RowVectorXd>;
    using CVec = Eigen::Map<const Eigen::RowVectorXd>;
    using CMat = Eigen::Map<const RowMat<double>>;

    Vec x(x_.data(), d);
    x = CVec(p.tok_emb.data() + static_cast<std::size_t>(t) * d, d) + CVec(p.pos_emb.data() + pos_ * d, d);

    std::copy(x_.begin(), x_.end(), captures_.begin());

    const int hd = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto n_ctx = static_cast<Eigen::Index>(pos_ + 1);

    for (int l = 0; l < c.n_layers; ++l) {
        const auto& L = p.layers[static_cast<std::size_t>(l)];
        Vec a(a_.data(), d);
        kernels::layer_norm_row(x_.data(), L.ln1_gain.data(), L.ln1_bias.data(), a_.data(), d);
        Vec q(q_.data(), d);
        q.noalias() = a * CMat(L.wq.data(), d, d);
        Eigen::Map<RowMat<double>> kc(keys_[static_cast<std::size_t>(l)].data(), c.context_len, d);
        Eigen::Map<RowMat<double>> vc(values_[static_cast<std::size_t>(l)].data(), c.context_len, d);
        kc.row(static_cast<Eigen::Index>(pos_)).noalias() = a * CMat(L.wk.data(), d, d);
        vc.row(static_cast<Eigen::Index>(pos_)).noalias() = a * CMat(L.wv.data(), d, d);

        Vec att(att_.data(), d);
        for (int h = 0; h < c.n_heads; ++h) {
            Eigen::Map<Eigen::VectorXd> s(scores_.data(), n_ctx);
            s.noalias() = kc.block(0, h * hd, n_ctx, hd) * q.segment(h * hd, hd).transpose() * scale;
            const double mx = s.maxCoeff();
            s = (s.array() - mx).exp();
            s /= s.sum();
            att.segment(h * hd, hd).noalias() = s.transpose() * vc.block(0, h * hd, n_ctx, hd);
        }
        x.noalias() += att * CMat(L.wo.data(), d, d);

        Vec b(b_.data(), d);
        kernels::layer_norm_row(x_.data(), L.ln2_gain.data(), L.ln2_bias.data(), b_.data(), d);
        Eigen::Map<Eigen::RowVectorXd> h1(h1_.data(), c.d_ff());
        h1.noalias() = b * CMat(L.w1.data(), d, c.d_ff());
        h1 += CVec(L.b1.data(), c.d_ff());
        for (double& v : h1_) v = kernels::gelu(v);
        x.noalias() += h1 * CMat(L.w2.data(), c.d_ff(), d);
        x += CVec(L.b2.data(), d);

        if (hook && hook->wants(l)) hook->apply(l, std::span<double>(x_.data(), x_.size()));
        std::copy(x_.begin(), x_.end(), captures_.begin() + (static_cast<long>(l) + 1) * d);
    }
    kernels::layer_norm_row(x_.data(), p.lnf_gain.data(), p.lnf_bias.data(), final_.data(), d);
    if (hook && hook->wants(kHeadLayer)) hook->apply(kHeadLayer, std::span<double>(final_.data(), final_.size()));
    Eigen::Map<Eigen::VectorXd>(logits_.data(), c.vocab_size).noalias() =
        CMat(p.head_weights().data(), c.vocab_size, d) * Eigen::Map<const Eigen::VectorXd>(final_.data(), d);
    ++pos_;
    return logits_;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.begin(), logits.end());
    const double mx = *std::max_element(out.begin(), out.end());
    double sum = 0.0;
    for (double& x : out) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : out) x /= sum;
    return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
    std::vector<double> out(logits.begin(), logits.end());
    const double mx = *std::max_element(out.begin(), out.end());
    double sum = 0.0;
    for (double x : out) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    for (double& x : out) x -= lse;
    return out;
}

std::vector<double> grad_logprob_wrt_hidden(const linalg::Matrix& head, std::span<const double> h, Token y) {
    if (h.size() != head.cols()) {
        throw ParameterError("grad_logprob_wrt_hidden: hidden size " + std::to_string(h.size()) + " != " +
                             std::to_string(head.cols()));
    }
    if (y < 0 || static_cast<std::size_t>(y) >= head.rows()) {
        throw ParameterError("grad_logprob_wrt_hidden: token " + std::to_string(y) + " out of range");
    }
    std::vector<double> logits(head.rows());
    for (std::size_t v = 0; v < head.rows(); ++v) logits[v] = linalg::dot(head.row(v), h);
    std::vector<double> coeff = softmax(logits);
    for (double& p : coeff) p = -p;
    coeff[static_cast<std::size_t>(y)] += 1.0;
    std::vector<double> g(head.cols(), 0.0);
    for (std::size_t v = 0; v < head.rows(); ++v) {
        const auto row = head.row(v);
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += coeff[v] * row[j];
    }
    return g;
}

namespace {

Token pick_token(std::span<const double> logits, const DecodeConfig& decode, Rng& rng) {
    if (decode.greedy) {
        return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    if (!(decode.temperature > 0.0)) throw ParameterError("decode: temperature must be positive");
    std::vector<double> scaled(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / decode.temperature;
    const auto probs = softmax(scaled);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<Token>(i);
    }
    return static_cast<Token>(probs.size() - 1);
}

} // namespace

namespace {

Generation run_decode(const Model& model, std::span<const Token> prompt, std::size_t T, const HiddenStateHook* hook,
                      const DecodeConfig& decode, bool traced) {
    if (prompt.empty()) throw ParameterError("generate: empty prompt");
    if (prompt.size() + T > static_cast<std::size_t>(model.config().context_len) + 1) {
        throw ParameterError("generate: prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(T) +
                             " tokens does not fit the context");
    }
    const auto& c = model.config();
    const auto d = static_cast<std::size_t>(c.d_model);
    DecodeSession session(model);
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) session.step(prompt[i]);
    Rng rng(decode.seed);
    Generation out;
    out.tokens.reserve(T);
    if (traced) {
        out.trace.layers.assign(static_cast<std::size_t>(c.n_layers) + 1, linalg::Matrix(T, d));
        out.trace.final_hidden = linalg::Matrix(T, d);
    }
    Token next = prompt.back();
    for (std::size_t i = 0; i < T; ++i) {
        const auto logits = session.step(next, hook);
        if (traced) {
            for (std::size_t l = 0; l < out.trace.layers.size(); ++l) {
                const auto src = session.capture(l);
                std::copy(src.begin(), src.end(), out.trace.layers[l].data().begin() + static_cast<long>(i * d));
            }
            const auto h = session.last_hidden();
            std::copy(h.begin(), h.end(), out.trace.final_hidden.data().begin() + static_cast<long>(i * d));
        }
        next = pick_token(logits, decode, rng);
        out.tokens.push_back(next);
    }
    return out;
}

} // namespace

Sequence generate(const Model& model, std::span<const Token> prompt, std::size_t T, const HiddenStateHook* hook,
                  const DecodeConfig& decode) {
    return run_decode(model, prompt, T, hook, decode, false).tokens;
}

Generation generate_traced(const Model& model, std::span<const Token> prompt, std::size_t T,
                           const HiddenStateHook* hook, const DecodeConfig& decode) {
    return run_decode(model, prompt, T, hook, decode, true);
}

double perplexity(const Model& model, const std::vector<Sequence>& corpus, const HiddenStateHook* hook) {
    if (corpus.empty()) throw ParameterError("perplexity: empty corpus");
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        const auto res = model.forward(seq, hook, false);
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            const auto lp = log_softmax(res.logits.row(t));
            nll -= lp[static_cast<std::size_t>(seq[t + 1])];
            ++count;
        }
    }
    if (count == 0) throw ParameterError("perplexity: corpus has no next-token positions");
    return std::exp(nll / static_cast<double>(count));
}

} // namespace substeer::lm
