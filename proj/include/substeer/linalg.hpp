#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace substeer::linalg {

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    Matrix transposed() const;
    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix multiply(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);

// Orthonormal basis of a k-dimensional subspace of R^dim, vectors stored as rows.
// Sign convention: in each vector the entry of largest magnitude is positive,
// ties resolved towards the lowest index.
class SubspaceBasis {
public:
    SubspaceBasis() = default;

    // Validates the invariants; throws DataError on violation.
    SubspaceBasis(std::size_t dim, std::size_t k, std::vector<double> vectors);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t k() const noexcept { return k_; }
    std::span<const double> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
    const std::vector<double>& data() const noexcept { return vectors_; }

    // Throws DataError naming the first violated invariant.
    void validate() const;

    friend bool operator==(const SubspaceBasis&, const SubspaceBasis&) = default;

private:
    std::size_t dim_ = 0;
    std::size_t k_ = 0;
    std::vector<double> vectors_;
};

// Flips v in place so that its largest-magnitude entry is positive.
void apply_sign_convention(std::span<double> v);

// r = min(rows, cols)
struct ThinSvd {
    std::vector<double> singular_values;  // descending, length r
    Matrix u;                             // rows x r, left vectors as columns
    Matrix v;                             // cols x r, right vectors as columns
};

// One-sided (Hestenes) Jacobi SVD. Deterministic for identical input bytes.
inline constexpr int kMaxJacobiSweeps = 100;

ThinSvd thin_svd(const Matrix& m);

struct TruncatedSvd {
    std::vector<double> singular_values;
    SubspaceBasis basis;
};

// Top-k right singular subspace of m with the sign convention applied.
TruncatedSvd truncated_svd(const Matrix& m, std::size_t k);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// h - beta * V V^T h, applied as two matrix-vector products.
std::vector<double> project_out(std::span<const double> h, const SubspaceBasis& basis, double beta);
void project_out_inplace(std::span<double> h, const SubspaceBasis& basis, double beta);

// P h for P = V V^T.
std::vector<double> project_onto(std::span<const double> h, const SubspaceBasis& basis);

// Principal angles in [0, pi/2], ascending.
std::vector<double> principal_angles(const SubspaceBasis& a, const SubspaceBasis& b);

// Modified Gram-Schmidt with one re-orthogonalisation pass.
SubspaceBasis orthonormalize(const std::vector<std::vector<double>>& vectors);

} // namespace substeer::linalg
