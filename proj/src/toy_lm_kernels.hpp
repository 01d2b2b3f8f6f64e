#pragma once

#include "substeer/toy_lm.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace substeer::lm::kernels {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using CMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using CRow = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;

inline constexpr double kLayerNormEps = 1e-5;

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

// tanh form of GELU
template <typename S>
inline S gelu(S x) {
    return S(0.5) * x * (S(1) + std::tanh(S(kGeluC) * (x + S(kGeluA) * x * x * x)));
}

// Derivative given x and th = tanh(c (x + a x^3)).
template <typename S>
inline S gelu_grad(S x, S th) {
    return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * S(kGeluC) * (S(1) + S(3 * kGeluA) * x * x);
}

template <typename S>
void layer_norm_row(const S* in, const S* gain, const S* bias, S* out, int d) {
    S mean = 0;
    for (int i = 0; i < d; ++i) mean += in[i];
    mean /= S(d);
    S var = 0;
    for (int i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= S(d);
    const S rstd = S(1) / std::sqrt(var + S(kLayerNormEps));
    for (int i = 0; i < d; ++i) out[i] = (in[i] - mean) * rstd * gain[i] + bias[i];
}

template <typename S>
RowMat<S> layer_norm(const RowMat<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, RowMat<S>& xhat,
                     Eigen::Matrix<S, Eigen::Dynamic, 1>& rstd) {
    const auto d = x.cols();
    const auto mean = x.rowwise().mean();
    xhat = x.colwise() - mean;
    rstd = ((xhat.array().square().rowwise().sum() / S(d)) + S(kLayerNormEps)).rsqrt();
    xhat.array().colwise() *= rstd.array();
    RowMat<S> y = xhat.array().rowwise() * CRow<S>(gain.data(), d).array();
    y.rowwise() += CRow<S>(bias.data(), d);
    return y;
}

// dx from dy, accumulating gain/bias gradients.
template <typename S>
RowMat<S> layer_norm_backward(const RowMat<S>& dy, const RowMat<S>& xhat,
                              const Eigen::Matrix<S, Eigen::Dynamic, 1>& rstd, const Tensor<S>& gain,
                              Tensor<S>& dgain, Tensor<S>& dbias) {
    const auto d = dy.cols();
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(dgain.data(), d) += (dy.array() * xhat.array()).colwise().sum().matrix();
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(dbias.data(), d) += dy.colwise().sum();
    RowMat<S> dxhat = dy.array().rowwise() * CRow<S>(gain.data(), d).array();
    const Eigen::Matrix<S, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
    const Eigen::Matrix<S, Eigen::Dynamic, 1> m2 = (dxhat.array() * xhat.array()).rowwise().mean();
    RowMat<S> dx = dxhat.colwise() - m1;
    dx -= (xhat.array().colwise() * m2.array()).matrix();
    dx.array().colwise() *= rstd.array();
    return dx;
}

template <typename S>
struct LayerCache {
    RowMat<S> x_in, a, xhat1, q, k, v, att, x_mid, b, xhat2, pre, th, act;
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd1, rstd2;
    std::vector<RowMat<S>> probs;  // one T x T matrix per (sequence, head)
};

template <typename S>
RowMat<S> embed(const BasicParams<S>& p, std::span<const Token> tokens) {
    const int d = p.config.d_model;
    RowMat<S> x(static_cast<Eigen::Index>(tokens.size()), d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        x.row(static_cast<Eigen::Index>(t)) =
            CRow<S>(p.tok_emb.data() + static_cast<std::size_t>(tokens[t]) * d, d) +
            CRow<S>(p.pos_emb.data() + t * static_cast<std::size_t>(d), d);
    }
    return x;
}

// Runs one block in place over stacked sequences. bounds holds the cumulative
// row offsets of the sequences, starting with 0.
template <typename S>
void block_forward(const BasicLayer<S>& L, const ModelConfig& c, RowMat<S>& x, const std::vector<Eigen::Index>& bounds,
                   LayerCache<S>& cache) {
    const int d = c.d_model;
    const int hd = c.head_dim();
    const int ff = c.d_ff();
    const S scale = S(1) / std::sqrt(S(hd));
    cache.x_in = x;
    cache.a = layer_norm(x, L.ln1_gain, L.ln1_bias, cache.xhat1, cache.rstd1);
    cache.q.noalias() = cache.a * CMap<S>(L.wq.data(), d, d);
    cache.k.noalias() = cache.a * CMap<S>(L.wk.data(), d, d);
    cache.v.noalias() = cache.a * CMap<S>(L.wv.data(), d, d);
    cache.att.resize(x.rows(), d);
    cache.probs.clear();
    for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
        const auto r0 = bounds[s];
        const auto n = bounds[s + 1] - r0;
        for (int h = 0; h < c.n_heads; ++h) {
            RowMat<S> sc = cache.q.block(r0, h * hd, n, hd) * cache.k.block(r0, h * hd, n, hd).transpose() * scale;
            for (Eigen::Index i = 0; i < n; ++i) {
                const S mx = sc.row(i).head(i + 1).maxCoeff();
                S sum = 0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    sc(i, j) = std::exp(sc(i, j) - mx);
                    sum += sc(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) sc(i, j) /= sum;
                for (Eigen::Index j = i + 1; j < n; ++j) sc(i, j) = 0;
            }
            cache.att.block(r0, h * hd, n, hd).noalias() = sc * cache.v.block(r0, h * hd, n, hd);
            cache.probs.push_back(std::move(sc));
        }
    }
    x.noalias() += cache.att * CMap<S>(L.wo.data(), d, d);
    cache.x_mid = x;
    cache.b = layer_norm(x, L.ln2_gain, L.ln2_bias, cache.xhat2, cache.rstd2);
    cache.pre.noalias() = cache.b * CMap<S>(L.w1.data(), d, ff);
    cache.pre.rowwise() += CRow<S>(L.b1.data(), ff);
    cache.th = (S(kGeluC) * (cache.pre.array() + S(kGeluA) * cache.pre.array().cube())).tanh().matrix();
    cache.act = (S(0.5) * cache.pre.array() * (S(1) + cache.th.array())).matrix();
    x.noalias() += cache.act * CMap<S>(L.w2.data(), ff, d);
    x.rowwise() += CRow<S>(L.b2.data(), d);
}

} // namespace substeer::lm::kernels
