#pragma once

#include "substeer/artifacts.hpp"
#include "substeer/linalg.hpp"

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer::theory {

struct ContainmentResult {
    double residual = 0.0;        // max over trials of |W0(I+A)h - (W0 + W0 A)h|_inf
    std::size_t rank = 0;         // singular values of W0 A above 1e-8
    std::size_t vocab = 0;
    std::size_t dim = 0;
    // |dW - W0 A*| / |dW| for the least-squares A*, i.e. the share of the witness
    // dW = u x^T outside the column space of W0
    double witness_norm = 0.0;
    std::size_t trials = 0;
};

// A = -beta V V^T. Requires vocab > d.
ContainmentResult check_containment(const linalg::Matrix& w0, const linalg::SubspaceBasis& basis, double beta,
                                    std::size_t trials, std::uint64_t seed);

struct LocalityResult {
    double residual = 0.0;           // max |W0(I - beta P)h - W0 h|_inf over complement samples
    double max_projection = 0.0;     // max |P h| / |h| after forcing h into the complement
    std::size_t trials = 0;
};

LocalityResult check_locality(const linalg::Matrix& w0, const linalg::SubspaceBasis& basis, double beta,
                              std::size_t trials, std::uint64_t seed);

struct StabilityPoint {
    double noise = 0.0;
    double mean_angle = 0.0;  // radians, mean over trials of the mean principal angle
    double max_angle = 0.0;   // largest principal angle seen at this level
};

// Per level: Gaussian noise of standard deviation `noise` on every entry of G,
// rows re-normalized, top-k subspace recomputed and compared with the clean one.
std::vector<StabilityPoint> subspace_stability(const linalg::Matrix& g, const std::vector<double>& noise_levels,
                                               std::size_t trials, std::size_t k, std::uint64_t seed);

// Checks the curve is non-decreasing up to one inversion of at most `slack` radians.
bool stability_monotone(const std::vector<StabilityPoint>& curve, double slack = 0.01);

// Null model: mean principal angle between the top-k subspaces of two
// independent n x d matrices of i.i.d. Gaussian rows (unit-normalized).
double null_model_angle(std::size_t n, std::size_t d, std::size_t k, std::size_t trials, std::uint64_t seed);

// Rank-one G (all rows u) as a strong-signal reference.
double rank_one_angle(std::size_t n, std::size_t d, double noise, std::size_t trials, std::uint64_t seed);

struct TheoryReport {
    ContainmentResult containment;
    LocalityResult locality;
    std::vector<StabilityPoint> stability;
    double null_angle = 0.0;
    std::size_t k = 0;
    double beta = 0.0;

    void validate() const;
    nlohmann::json to_json() const;
    std::string table() const;
};

std::vector<double> default_noise_levels();

} // namespace substeer::theory
