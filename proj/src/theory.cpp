#include "substeer/theory.hpp"

#include "substeer/error.hpp"
#include "substeer/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace substeer::theory {

namespace {

std::vector<double> gaussian(std::size_t n, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = n01(rng);
    return v;
}

std::vector<double> matvec(const linalg::Matrix& m, std::span<const double> x) {
    std::vector<double> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = linalg::dot(m.row(i), x);
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void normalize_rows(linalg::Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        const double n = linalg::norm2(r);
        if (n == 0.0) throw NumericError("stability: zero row after perturbation");
        for (double& x : r) x /= n;
    }
}

double mean_angle(const linalg::SubspaceBasis& a, const linalg::SubspaceBasis& b, double* max_out = nullptr) {
    const auto angles = linalg::principal_angles(a, b);
    double s = 0.0;
    for (double x : angles) s += x;
    if (max_out) *max_out = std::max(*max_out, *std::max_element(angles.begin(), angles.end()));
    return s / static_cast<double>(angles.size());
}

linalg::Matrix noise_rows(std::size_t n, std::size_t d, Rng& rng) {
    linalg::Matrix m(n, d);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (double& x : m.data()) x = n01(rng);
    normalize_rows(m);
    return m;
}

} // namespace

ContainmentResult check_containment(const linalg::Matrix& w0, const linalg::SubspaceBasis& basis, double beta,
                                    std::size_t trials, std::uint64_t seed) {
    const std::size_t vocab = w0.rows(), d = w0.cols();
    if (vocab <= d) {
        throw ParameterError("check_containment: needs Vocab > d for strictness (got Vocab=" + std::to_string(vocab) +
                             ", d=" + std::to_string(d) + ")");
    }
    if (basis.dim() != d) throw ParameterError("check_containment: basis dim does not match W0");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("check_containment: beta must lie in [0, 1]");

    // W0 A = -beta (W0 V) V^T
    linalg::Matrix w0a(vocab, d);
    for (std::size_t r = 0; r < vocab; ++r) {
        const auto row = w0.row(r);
        auto out = w0a.row(r);
        for (std::size_t i = 0; i < basis.k(); ++i) {
            const auto v = basis.vector(i);
            const double c = -beta * linalg::dot(row, v);
            for (std::size_t j = 0; j < d; ++j) out[j] += c * v[j];
        }
    }

    ContainmentResult res;
    res.vocab = vocab;
    res.dim = d;
    res.trials = trials;
    Rng rng(derive_seed(seed, 0xc0));
    for (std::size_t t = 0; t < trials; ++t) {
        const auto h = gaussian(d, rng);
        const auto lhs = matvec(w0, linalg::project_out(h, basis, beta));
        auto rhs = matvec(w0, h);
        const auto extra = matvec(w0a, h);
        for (std::size_t i = 0; i < vocab; ++i) rhs[i] += extra[i];
        res.residual = std::max(res.residual, max_abs_diff(lhs, rhs));
    }

    const auto svd_a = linalg::thin_svd(w0a);
    res.rank = static_cast<std::size_t>(
        std::count_if(svd_a.singular_values.begin(), svd_a.singular_values.end(), [](double s) { return s > 1e-8; }));

    // left-null direction of W0 from its column space
    const auto svd = linalg::thin_svd(w0);
    const double cutoff = 1e-10 * std::max(1.0, svd.singular_values.front());
    std::vector<std::size_t> cols;
    for (std::size_t i = 0; i < svd.singular_values.size(); ++i) {
        if (svd.singular_values[i] > cutoff) cols.push_back(i);
    }
    auto remove_colspace = [&](std::vector<double> r) {
        for (std::size_t c : cols) {
            double dotp = 0.0;
            for (std::size_t i = 0; i < vocab; ++i) dotp += svd.u(i, c) * r[i];
            for (std::size_t i = 0; i < vocab; ++i) r[i] -= dotp * svd.u(i, c);
        }
        return r;
    };
    auto u = remove_colspace(remove_colspace(gaussian(vocab, rng)));
    const double un = linalg::norm2(u);
    if (un == 0.0) throw NumericError("check_containment: failed to draw a left-null vector");
    for (double& x : u) x /= un;
    const auto x = gaussian(d, rng);

    // dW = u x^T. Any W0 A has its columns in col(W0), so the distance from dW to
    // that set is the norm of dW with the column space removed.
    double total = 0.0, outside = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> col(vocab);
        for (std::size_t i = 0; i < vocab; ++i) col[i] = u[i] * x[j];
        const auto rest = remove_colspace(col);
        total += linalg::dot(col, col);
        outside += linalg::dot(rest, rest);
    }
    res.witness_norm = total > 0.0 ? std::sqrt(outside / total) : 0.0;
    return res;
}

LocalityResult check_locality(const linalg::Matrix& w0, const linalg::SubspaceBasis& basis, double beta,
                              std::size_t trials, std::uint64_t seed) {
    if (basis.dim() != w0.cols()) throw ParameterError("check_locality: basis dim does not match W0");
    LocalityResult res;
    res.trials = trials;
    Rng rng(derive_seed(seed, 0x10c));
    for (std::size_t t = 0; t < trials; ++t) {
        auto h = linalg::project_out(gaussian(basis.dim(), rng), basis, 1.0);
        const double hn = linalg::norm2(h);
        if (hn > 0.0) res.max_projection = std::max(res.max_projection, linalg::norm2(linalg::project_onto(h, basis)) / hn);
        const auto a = matvec(w0, linalg::project_out(h, basis, beta));
        const auto b = matvec(w0, h);
        res.residual = std::max(res.residual, max_abs_diff(a, b));
    }
    return res;
}

std::vector<StabilityPoint> subspace_stability(const linalg::Matrix& g, const std::vector<double>& noise_levels,
                                               std::size_t trials, std::size_t k, std::uint64_t seed) {
    if (noise_levels.size() < 2) throw ParameterError("subspace_stability: need at least two noise levels");
    if (!std::is_sorted(noise_levels.begin(), noise_levels.end())) {
        throw ParameterError("subspace_stability: noise levels must be ascending");
    }
    if (noise_levels.front() < 0.0) throw ParameterError("subspace_stability: noise levels must be non-negative");
    if (trials == 0) throw ParameterError("subspace_stability: trials must be positive");
    const auto clean = linalg::truncated_svd(g, k).basis;
    std::vector<StabilityPoint> curve;
    for (std::size_t li = 0; li < noise_levels.size(); ++li) {
        const double eps = noise_levels[li];
        StabilityPoint p{eps, 0.0, 0.0};
        if (eps == 0.0) {
            curve.push_back(p);
            continue;
        }
        double acc = 0.0;
        for (std::size_t t = 0; t < trials; ++t) {
            Rng rng(derive_seed(derive_seed(seed, li), t));
            std::normal_distribution<double> n(0.0, eps);
            linalg::Matrix noisy = g;
            for (double& x : noisy.data()) x += n(rng);
            normalize_rows(noisy);
            acc += mean_angle(clean, linalg::truncated_svd(noisy, k).basis, &p.max_angle);
        }
        p.mean_angle = acc / static_cast<double>(trials);
        curve.push_back(p);
    }
    return curve;
}

bool stability_monotone(const std::vector<StabilityPoint>& curve, double slack) {
    std::size_t inversions = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        const double drop = curve[i - 1].mean_angle - curve[i].mean_angle;
        if (drop > 0.0) {
            if (drop > slack) return false;
            ++inversions;
        }
    }
    return inversions <= 1;
}

double null_model_angle(std::size_t n, std::size_t d, std::size_t k, std::size_t trials, std::uint64_t seed) {
    if (trials == 0) throw ParameterError("null_model_angle: trials must be positive");
    double acc = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const auto a = noise_rows(n, d, rng);
        const auto b = noise_rows(n, d, rng);
        acc += mean_angle(linalg::truncated_svd(a, k).basis, linalg::truncated_svd(b, k).basis);
    }
    return acc / static_cast<double>(trials);
}

double rank_one_angle(std::size_t n, std::size_t d, double noise, std::size_t trials, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x1));
    auto u = gaussian(d, rng);
    const double un = linalg::norm2(u);
    for (double& x : u) x /= un;
    linalg::Matrix g(n, d);
    for (std::size_t i = 0; i < n; ++i) std::copy(u.begin(), u.end(), g.row(i).begin());
    const auto curve = subspace_stability(g, {0.0, noise}, trials, 1, seed);
    return curve[1].mean_angle;
}

void TheoryReport::validate() const {
    if (containment.residual < 0.0 || locality.residual < 0.0) throw InternalError("theory report: negative residual");
    for (std::size_t i = 1; i < stability.size(); ++i) {
        if (stability[i].noise < stability[i - 1].noise) throw InternalError("theory report: noise levels not ascending");
    }
}

nlohmann::json TheoryReport::to_json() const {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : stability) curve.push_back({{"noise", p.noise}, {"mean_angle", p.mean_angle}, {"max_angle", p.max_angle}});
    return {{"k", k},
            {"beta", beta},
            {"containment",
             {{"residual", containment.residual},
              {"rank", containment.rank},
              {"vocab", containment.vocab},
              {"d", containment.dim},
              {"witness_norm", containment.witness_norm},
              {"trials", containment.trials}}},
            {"locality",
             {{"residual", locality.residual}, {"max_projection", locality.max_projection}, {"trials", locality.trials}}},
            {"stability", curve},
            {"stability_monotone", stability_monotone(stability)},
            {"null_model_angle", null_angle}};
}

std::string TheoryReport::table() const {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3);
    os << "containment residual   " << containment.residual << "  (Vocab=" << containment.vocab << ", d=" << containment.dim
       << ", trials=" << containment.trials << ")\n";
    os << "rank(W0 A)             " << containment.rank << " <= d=" << containment.dim << " < Vocab=" << containment.vocab
       << "\n";
    os << std::fixed << std::setprecision(6);
    os << "strictness witness     " << containment.witness_norm << "\n";
    os << std::scientific << std::setprecision(3);
    os << "locality residual      " << locality.residual << "  (trials=" << locality.trials << ")\n";
    os << std::fixed << std::setprecision(4);
    os << "noise     mean angle   max angle\n";
    for (const auto& p : stability) {
        os << std::setw(7) << p.noise << "   " << std::setw(10) << p.mean_angle << "   " << std::setw(9) << p.max_angle << "\n";
    }
    os << "null model angle       " << null_angle << "\n";
    return os.str();
}

std::vector<double> default_noise_levels() { return {0.01, 0.02, 0.05, 0.1, 0.2, 0.5}; }

} // namespace substeer::theory
