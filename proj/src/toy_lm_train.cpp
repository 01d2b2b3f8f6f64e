#include "substeer/toy_lm.hpp"

#include "substeer/error.hpp"
#include "substeer/rng.hpp"
#include "toy_lm_kernels.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <random>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace substeer::lm {

namespace {

using kernels::CMap;
using kernels::CRow;
using kernels::RowMat;

template <typename S>
using Map = Eigen::Map<RowMat<S>>;
template <typename S>
using RowMap = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>;

template <typename S>
RowMat<S> block_backward(const BasicLayer<S>& L, const ModelConfig& c, const kernels::LayerCache<S>& cache,
                         const std::vector<Eigen::Index>& bounds, const RowMat<S>& dx_out, BasicLayer<S>& g) {
    const int d = c.d_model;
    const int hd = c.head_dim();
    const int ff = c.d_ff();
    const S scale = S(1) / std::sqrt(S(hd));

    Map<S>(g.w2.data(), ff, d).noalias() += cache.act.transpose() * dx_out;
    RowMap<S>(g.b2.data(), d) += dx_out.colwise().sum();
    RowMat<S> dpre = dx_out * CMap<S>(L.w2.data(), ff, d).transpose();
    dpre.array() *= cache.pre.binaryExpr(cache.th, [](S x, S th) { return kernels::gelu_grad(x, th); }).array();
    Map<S>(g.w1.data(), d, ff).noalias() += cache.b.transpose() * dpre;
    RowMap<S>(g.b1.data(), ff) += dpre.colwise().sum();
    const RowMat<S> db = dpre * CMap<S>(L.w1.data(), d, ff).transpose();
    RowMat<S> dx_mid = dx_out + kernels::layer_norm_backward(db, cache.xhat2, cache.rstd2, L.ln2_gain, g.ln2_gain,
                                                             g.ln2_bias);

    Map<S>(g.wo.data(), d, d).noalias() += cache.att.transpose() * dx_mid;
    const RowMat<S> datt = dx_mid * CMap<S>(L.wo.data(), d, d).transpose();
    RowMat<S> dq(datt.rows(), d), dk(datt.rows(), d), dv(datt.rows(), d);
    std::size_t pi = 0;
    for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
        const auto r0 = bounds[s];
        const auto n = bounds[s + 1] - r0;
        for (int h = 0; h < c.n_heads; ++h) {
            const RowMat<S>& P = cache.probs[pi++];
            const auto dO = datt.block(r0, h * hd, n, hd);
            RowMat<S> dP = dO * cache.v.block(r0, h * hd, n, hd).transpose();
            dv.block(r0, h * hd, n, hd).noalias() = P.transpose() * dO;
            const Eigen::Matrix<S, Eigen::Dynamic, 1> rs = (dP.array() * P.array()).rowwise().sum();
            RowMat<S> dS = (P.array() * (dP.colwise() - rs).array()).matrix() * scale;
            dq.block(r0, h * hd, n, hd).noalias() = dS * cache.k.block(r0, h * hd, n, hd);
            dk.block(r0, h * hd, n, hd).noalias() = dS.transpose() * cache.q.block(r0, h * hd, n, hd);
        }
    }
    Map<S>(g.wq.data(), d, d).noalias() += cache.a.transpose() * dq;
    Map<S>(g.wk.data(), d, d).noalias() += cache.a.transpose() * dk;
    Map<S>(g.wv.data(), d, d).noalias() += cache.a.transpose() * dv;
    RowMat<S> da = dq * CMap<S>(L.wq.data(), d, d).transpose();
    da.noalias() += dk * CMap<S>(L.wk.data(), d, d).transpose();
    da.noalias() += dv * CMap<S>(L.wv.data(), d, d).transpose();
    dx_mid += kernels::layer_norm_backward(da, cache.xhat1, cache.rstd1, L.ln1_gain, g.ln1_gain, g.ln1_bias);
    return dx_mid;
}

} // namespace

template <typename S>
double loss_and_gradient(const BasicParams<S>& params, const std::vector<Sequence>& batch, BasicParams<S>& grad) {
    const auto& c = params.config;
    const int d = c.d_model;
    const int V = c.vocab_size;
    grad = BasicParams<S>::shaped(c, S(0));

    std::vector<Token> inputs, targets;
    std::vector<int> positions;
    std::vector<Eigen::Index> bounds{0};
    for (const auto& seq : batch) {
        const std::size_t n = std::min(seq.size(), static_cast<std::size_t>(c.context_len) + 1);
        if (n < 2) continue;
        for (std::size_t t = 0; t + 1 < n; ++t) {
            if (seq[t] < 0 || seq[t] >= V || seq[t + 1] < 0 || seq[t + 1] >= V) {
                throw DataError("training: token id out of range");
            }
            inputs.push_back(seq[t]);
            targets.push_back(seq[t + 1]);
            positions.push_back(static_cast<int>(t));
        }
        bounds.push_back(static_cast<Eigen::Index>(inputs.size()));
    }
    const auto N = static_cast<Eigen::Index>(inputs.size());
    if (N == 0) throw ParameterError("training: batch has no next-token positions");

    RowMat<S> x(N, d);
    for (Eigen::Index r = 0; r < N; ++r) {
        x.row(r) = CRow<S>(params.tok_emb.data() + static_cast<std::size_t>(inputs[r]) * d, d) +
                   CRow<S>(params.pos_emb.data() + static_cast<std::size_t>(positions[r]) * d, d);
    }
    std::vector<kernels::LayerCache<S>> caches(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        kernels::block_forward(params.layers[static_cast<std::size_t>(l)], c, x, bounds,
                               caches[static_cast<std::size_t>(l)]);
    }
    RowMat<S> xhat;
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
    const RowMat<S> h = kernels::layer_norm(x, params.lnf_gain, params.lnf_bias, xhat, rstd);
    const CMap<S> W0(params.head_weights().data(), V, d);
    RowMat<S> dlogits = h * W0.transpose();

    double loss = 0.0;
    const S inv_n = S(1) / S(N);
    for (Eigen::Index r = 0; r < N; ++r) {
        auto row = dlogits.row(r);
        const S mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        const S sum = row.sum();
        loss -= std::log(static_cast<double>(row(targets[r]) / sum));
        row *= inv_n / sum;
        row(targets[r]) -= inv_n;
    }
    loss /= static_cast<double>(N);

    Tensor<S>& dhead = c.tie_head ? grad.tok_emb : grad.head;
    Map<S>(dhead.data(), V, d).noalias() += dlogits.transpose() * h;
    const RowMat<S> dh = dlogits * W0;
    RowMat<S> dx = kernels::layer_norm_backward(dh, xhat, rstd, params.lnf_gain, grad.lnf_gain, grad.lnf_bias);
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        dx = block_backward(params.layers[li], c, caches[li], bounds, dx, grad.layers[li]);
    }
    for (Eigen::Index r = 0; r < N; ++r) {
        RowMap<S>(grad.tok_emb.data() + static_cast<std::size_t>(inputs[r]) * d, d) += dx.row(r);
        RowMap<S>(grad.pos_emb.data() + static_cast<std::size_t>(positions[r]) * d, d) += dx.row(r);
    }
    return loss;
}

template double loss_and_gradient<float>(const BasicParams<float>&, const std::vector<Sequence>&, BasicParams<float>&);
template double loss_and_gradient<double>(const BasicParams<double>&, const std::vector<Sequence>&,
                                          BasicParams<double>&);

TrainResult train(const ModelConfig& config, const std::vector<Sequence>& corpus, const TrainOptions& o) {
    config.validate();
    if (corpus.empty()) throw ParameterError("train: empty corpus");
    if (o.batch_size == 0) throw ParameterError("train: batch_size must be positive");
    if (!(o.learning_rate > 0.0)) throw ParameterError("train: learning_rate must be positive");
    if (o.beta1 < 0.0 || o.beta1 >= 1.0 || o.beta2 < 0.0 || o.beta2 >= 1.0) {
        throw ParameterError("train: moment decay rates must lie in [0, 1)");
    }

#ifdef __GLIBC__
    // step temporaries are a few MB each; keep them on the heap instead of
    // round-tripping through mmap on every step
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif

    TrainResult result;
    ModelParams params = init_params(config);
    ModelParams grad;
    const std::size_t n_params = params.parameter_count();
    std::vector<double> m(n_params, 0.0), v(n_params, 0.0);
    Rng rng(derive_seed(config.seed, 0xba7c));
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    std::vector<Sequence> batch(o.batch_size);

    for (std::size_t step = 0; step < o.steps; ++step) {
        for (auto& s : batch) s = corpus[pick(rng)];
        const double loss = loss_and_gradient(params, batch, grad);
        double sq = 0.0;
        grad.visit([&](const char*, const auto& t) {
            for (float g : t) sq += static_cast<double>(g) * g;
        });
        if (!std::isfinite(loss) || !std::isfinite(sq)) {
            throw TrainingError(step, "training diverged at step " + std::to_string(step) + " (loss " +
                                          std::to_string(loss) + ")");
        }
        const double norm = std::sqrt(sq);
        const double clip = (o.grad_clip > 0.0 && norm > o.grad_clip) ? o.grad_clip / norm : 1.0;

        double lr = o.learning_rate;
        if (step < o.warmup_steps) {
            lr *= static_cast<double>(step + 1) / static_cast<double>(o.warmup_steps);
        } else if (o.steps > o.warmup_steps) {
            const double progress =
                static_cast<double>(step - o.warmup_steps) / static_cast<double>(o.steps - o.warmup_steps);
            lr *= 0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress));
        }
        const double t = static_cast<double>(step + 1);
        const double bc1 = o.beta1 > 0.0 ? 1.0 - std::pow(o.beta1, t) : 1.0;
        const double bc2 = 1.0 - std::pow(o.beta2, t);

        std::size_t i = 0;
        const std::vector<float> flat_grad = grad.flatten();
        params.visit([&](const char*, auto& w) {
            for (float& p : w) {
                const double g = static_cast<double>(flat_grad[i]) * clip;
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
                p -= static_cast<float>(lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + o.epsilon));
                ++i;
            }
        });

        result.loss_history.push_back(loss);
        if (o.log_every > 0 && (step + 1) % o.log_every == 0) {
            std::cerr << "step " << (step + 1) << " loss " << loss << " lr " << lr << '\n';
        }
    }

    const std::size_t tail = std::min<std::size_t>(50, result.loss_history.size());
    double acc = 0.0;
    for (std::size_t j = result.loss_history.size() - tail; j < result.loss_history.size(); ++j) {
        acc += result.loss_history[j];
    }
    result.final_loss = tail > 0 ? acc / static_cast<double>(tail) : 0.0;
    const std::vector<Sequence> probe(corpus.begin(), corpus.begin() + static_cast<long>(std::min<std::size_t>(256, corpus.size())));
    result.train_perplexity = perplexity(Model(params), probe);
    result.params = std::move(params);
    return result;
}

} // namespace substeer::lm
