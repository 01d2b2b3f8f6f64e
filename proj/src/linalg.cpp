#include "substeer/linalg.hpp"

#include "substeer/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>
#include <string>

namespace substeer::linalg {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ParameterError("matrix data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix multiply(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ParameterError("multiply: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                             std::to_string(b.rows()) + ")");
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            auto brow = b.row(p);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aip * brow[j];
        }
    }
    return out;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double x : m.data()) s += x * x;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void apply_sign_convention(std::span<double> v) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::abs(v[i]) > best_abs) {
            best_abs = std::abs(v[i]);
            best = i;
        }
    }
    if (!v.empty() && v[best] < 0.0) {
        for (double& x : v) x = -x;
    }
}

SubspaceBasis::SubspaceBasis(std::size_t dim, std::size_t k, std::vector<double> vectors)
    : dim_(dim), k_(k), vectors_(std::move(vectors)) {
    validate();
}

void SubspaceBasis::validate() const {
    if (k_ < 1 || k_ > dim_) {
        throw DataError("subspace basis: k=" + std::to_string(k_) + " outside [1, " + std::to_string(dim_) + "]");
    }
    if (vectors_.size() != k_ * dim_) {
        throw DataError("subspace basis: payload has " + std::to_string(vectors_.size()) + " entries, expected " +
                        std::to_string(k_ * dim_));
    }
    for (double x : vectors_) {
        if (!std::isfinite(x)) throw DataError("subspace basis: non-finite entry");
    }
    for (std::size_t i = 0; i < k_; ++i) {
        const auto vi = vector(i);
        if (std::abs(norm2(vi) - 1.0) > 1e-10) {
            throw DataError("subspace basis: vector " + std::to_string(i) + " is not unit length");
        }
        std::size_t best = 0;
        for (std::size_t j = 1; j < dim_; ++j) {
            if (std::abs(vi[j]) > std::abs(vi[best])) best = j;
        }
        if (vi[best] < 0.0) {
            throw DataError("subspace basis: vector " + std::to_string(i) + " violates the sign convention");
        }
        for (std::size_t j = i + 1; j < k_; ++j) {
            if (std::abs(dot(vi, vector(j))) > 1e-10) {
                throw DataError("subspace basis: vectors " + std::to_string(i) + " and " + std::to_string(j) +
                                " are not orthogonal");
            }
        }
    }
}

namespace {

// Rotates columns of `a` (rows x n) until mutually orthogonal, accumulating the
// rotations into `v` (n x n). Returns the number of sweeps used.
int hestenes_jacobi(Matrix& a, Matrix& v) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    double frob2 = 0.0;
    for (double x : a.data()) frob2 += x * x;
    // columns at rounding level carry no direction; rotating them never settles
    const double floor = std::pow(static_cast<double>(n) * std::numeric_limits<double>::epsilon(), 2) * frob2;
    const double tol = static_cast<double>(m) * std::numeric_limits<double>::epsilon();
    for (int sweep = 0; sweep < kMaxJacobiSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = a(i, p);
                    const double y = a(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (app <= floor || aqq <= floor) continue;
                if (std::abs(apq) <= tol * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = a(i, p);
                    const double y = a(i, q);
                    a(i, p) = c * x - s * y;
                    a(i, q) = s * x + c * y;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = v(i, p);
                    const double y = v(i, q);
                    v(i, p) = c * x - s * y;
                    v(i, q) = s * x + c * y;
                }
            }
        }
        if (!rotated) return sweep + 1;
    }
    throw NumericError("jacobi svd did not converge within the cap of " + std::to_string(kMaxJacobiSweeps) +
                       " sweeps");
}

struct Householder {
    Matrix r;                              // n x n upper triangle
    std::vector<std::vector<double>> vs;   // reflector j acts on rows [j, m)
};

Householder householder_qr(const Matrix& m) {
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    Matrix a = m;
    Householder out;
    out.vs.resize(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        std::vector<double> v(rows - j);
        double norm = 0.0;
        for (std::size_t i = j; i < rows; ++i) {
            v[i - j] = a(i, j);
            norm += v[i - j] * v[i - j];
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = v[0] > 0.0 ? -norm : norm;
        v[0] -= alpha;
        const double vnorm = norm2(v);
        if (vnorm == 0.0) continue;
        for (double& x : v) x /= vnorm;
        for (std::size_t c = j; c < cols; ++c) {
            double s = 0.0;
            for (std::size_t i = j; i < rows; ++i) s += v[i - j] * a(i, c);
            s *= 2.0;
            for (std::size_t i = j; i < rows; ++i) a(i, c) -= s * v[i - j];
        }
        out.vs[j] = std::move(v);
    }
    out.r = Matrix(cols, cols);
    for (std::size_t i = 0; i < cols; ++i)
        for (std::size_t c = i; c < cols; ++c) out.r(i, c) = a(i, c);
    return out;
}

// Applies Q = H_0 H_1 ... H_{n-1} to y in place.
void apply_q(const Householder& qr, Matrix& y) {
    for (std::size_t jj = qr.vs.size(); jj-- > 0;) {
        const auto& v = qr.vs[jj];
        if (v.empty()) continue;
        for (std::size_t c = 0; c < y.cols(); ++c) {
            double s = 0.0;
            for (std::size_t i = jj; i < y.rows(); ++i) s += v[i - jj] * y(i, c);
            s *= 2.0;
            for (std::size_t i = jj; i < y.rows(); ++i) y(i, c) -= s * v[i - jj];
        }
    }
}

} // namespace

ThinSvd thin_svd(const Matrix& m) {
    if (m.empty()) throw ParameterError("svd of an empty matrix");
    if (!m.all_finite()) throw DataError("svd input contains non-finite entries");

    if (m.rows() < m.cols()) {
        // wide: factor the transpose so the column rotations act on at most `rows` columns
        ThinSvd t = thin_svd(m.transposed());
        std::swap(t.u, t.v);
        return t;
    }

    const std::size_t rows = m.rows();
    const std::size_t n = m.cols();
    const bool reduce = rows > n;

    Householder qr;
    Matrix work = m;
    if (reduce) {
        qr = householder_qr(m);
        work = qr.r;
    }
    Matrix v = Matrix::identity(n);
    hestenes_jacobi(work, v);

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < work.rows(); ++i) s += work(i, j) * work(i, j);
        norms[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    ThinSvd out;
    out.singular_values.resize(n);
    out.v = Matrix(n, n);
    Matrix u_small(work.rows(), n);
    for (std::size_t jj = 0; jj < n; ++jj) {
        const std::size_t j = order[jj];
        const double sigma = norms[j];
        out.singular_values[jj] = sigma;
        for (std::size_t i = 0; i < n; ++i) out.v(i, jj) = v(i, j);
        if (sigma > 0.0) {
            for (std::size_t i = 0; i < work.rows(); ++i) u_small(i, jj) = work(i, j) / sigma;
        }
    }
    if (reduce) {
        Matrix u(rows, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < n; ++c) u(i, c) = u_small(i, c);
        apply_q(qr, u);
        out.u = std::move(u);
    } else {
        out.u = std::move(u_small);
    }
    return out;
}

TruncatedSvd truncated_svd(const Matrix& m, std::size_t k) {
    const std::size_t limit = std::min(m.rows(), m.cols());
    if (k < 1 || k > limit) {
        throw ParameterError("truncated_svd: k=" + std::to_string(k) + " outside [1, " + std::to_string(limit) +
                             "] for a " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + " matrix");
    }
    const ThinSvd full = thin_svd(m);
    const std::size_t d = m.cols();
    std::vector<double> vectors(k * d);
    for (std::size_t i = 0; i < k; ++i) {
        std::span<double> vi(vectors.data() + i * d, d);
        for (std::size_t r = 0; r < d; ++r) vi[r] = full.v(r, i);
        apply_sign_convention(vi);
    }
    TruncatedSvd out;
    out.singular_values.assign(full.singular_values.begin(), full.singular_values.begin() + static_cast<long>(k));
    out.basis = SubspaceBasis(d, k, std::move(vectors));
    return out;
}

void project_out_inplace(std::span<double> h, const SubspaceBasis& basis, double beta) {
    if (h.size() != basis.dim()) {
        throw ParameterError("project_out: vector length " + std::to_string(h.size()) + " != basis dim " +
                             std::to_string(basis.dim()));
    }
    if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("project_out: beta must lie in [0, 1]");
    if (beta == 0.0) return;
    const std::size_t d = basis.dim();
    const std::size_t k = basis.k();
    // coefficients first so that every update sees the original h
    double coeffs[64];
    std::vector<double> heap;
    double* c = coeffs;
    if (k > 64) {
        heap.resize(k);
        c = heap.data();
    }
    for (std::size_t i = 0; i < k; ++i) c[i] = beta * dot(basis.vector(i), h);
    for (std::size_t i = 0; i < k; ++i) {
        const auto vi = basis.vector(i);
        for (std::size_t j = 0; j < d; ++j) h[j] -= c[i] * vi[j];
    }
}

std::vector<double> project_out(std::span<const double> h, const SubspaceBasis& basis, double beta) {
    std::vector<double> out(h.begin(), h.end());
    project_out_inplace(out, basis, beta);
    return out;
}

std::vector<double> project_onto(std::span<const double> h, const SubspaceBasis& basis) {
    if (h.size() != basis.dim()) throw ParameterError("project_onto: dimension mismatch");
    std::vector<double> out(h.size(), 0.0);
    for (std::size_t i = 0; i < basis.k(); ++i) {
        const auto vi = basis.vector(i);
        const double c = dot(vi, h);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += c * vi[j];
    }
    return out;
}

std::vector<double> principal_angles(const SubspaceBasis& a, const SubspaceBasis& b) {
    if (a.dim() != b.dim() || a.k() != b.k()) {
        throw ParameterError("principal_angles: bases differ in shape (" + std::to_string(a.dim()) + "/" +
                             std::to_string(a.k()) + " vs " + std::to_string(b.dim()) + "/" +
                             std::to_string(b.k()) + ")");
    }
    const std::size_t k = a.k();
    const std::size_t d = a.dim();

    Matrix cross(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) cross(i, j) = dot(a.vector(i), b.vector(j));
    const auto cosines = thin_svd(cross).singular_values;

    // Residual of b after removing its component in span(a); its singular values are the sines.
    Matrix residual_t(d, k);
    for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> r(b.vector(j).begin(), b.vector(j).end());
        for (std::size_t i = 0; i < k; ++i) {
            const double c = dot(a.vector(i), b.vector(j));
            const auto ai = a.vector(i);
            for (std::size_t t = 0; t < d; ++t) r[t] -= c * ai[t];
        }
        for (std::size_t t = 0; t < d; ++t) residual_t(t, j) = r[t];
    }
    auto sines = thin_svd(residual_t).singular_values;
    std::reverse(sines.begin(), sines.end());

    std::vector<double> angles(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double theta = std::acos(std::clamp(cosines[i], -1.0, 1.0));
        // arccos loses half the digits near zero; switch to arcsin there
        angles[i] = theta < std::numbers::pi / 4.0 ? std::asin(std::clamp(sines[i], 0.0, 1.0)) : theta;
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

SubspaceBasis orthonormalize(const std::vector<std::vector<double>>& vectors) {
    if (vectors.empty()) throw ParameterError("orthonormalize: no vectors given");
    const std::size_t d = vectors.front().size();
    const std::size_t k = vectors.size();
    if (d == 0) throw ParameterError("orthonormalize: zero-length vectors");
    std::vector<double> out(k * d);
    for (std::size_t i = 0; i < k; ++i) {
        if (vectors[i].size() != d) {
            throw ParameterError("orthonormalize: vector " + std::to_string(i) + " has length " +
                                 std::to_string(vectors[i].size()) + ", expected " + std::to_string(d));
        }
        std::span<double> w(out.data() + i * d, d);
        std::copy(vectors[i].begin(), vectors[i].end(), w.begin());
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < i; ++j) {
                std::span<const double> q(out.data() + j * d, d);
                const double c = dot(q, w);
                for (std::size_t t = 0; t < d; ++t) w[t] -= c * q[t];
            }
        }
        const double n = norm2(w);
        if (n < 1e-12) {
            throw DegeneracyError(i, "orthonormalize: vector " + std::to_string(i) +
                                         " is linearly dependent on its predecessors (residual norm " +
                                         std::to_string(n) + ")");
        }
        for (double& x : w) x /= n;
    }
    for (std::size_t i = 0; i < k; ++i) apply_sign_convention(std::span<double>(out.data() + i * d, d));
    return SubspaceBasis(d, k, std::move(out));
}

} // namespace substeer::linalg
