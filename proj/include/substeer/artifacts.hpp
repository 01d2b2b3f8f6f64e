#pragma once

#include "substeer/linalg.hpp"

#include <cstdint>
#include <string>

#include "json.hpp"

namespace substeer {

// Index used for the capture point right before the LM head.
inline constexpr int kHeadLayer = -1;

struct GradientProvenance {
    std::string model_hash;
    std::uint64_t corpus_seed = 0;
    double delta = 0.0;
    std::size_t T = 0;
    std::size_t skipped_zero_norm = 0;

    nlohmann::json to_json() const;
    static GradientProvenance from_json(const nlohmann::json& j);
    friend bool operator==(const GradientProvenance&, const GradientProvenance&) = default;
};

// N x d stack of unit-norm gradients of toxic-token log-probabilities.
struct GradientMatrix {
    linalg::Matrix rows;
    GradientProvenance provenance;

    std::size_t n_rows() const noexcept { return rows.rows(); }
    std::size_t dim() const noexcept { return rows.cols(); }
};

struct SubspaceProvenance {
    std::string model_hash;
    std::string gradient_hash;
    std::int64_t created = 0;  // unix seconds; taken from SOURCE_DATE_EPOCH when set
    double delta = 0.0;
    std::size_t T = 0;
    std::uint64_t corpus_seed = 0;
    std::uint64_t model_seed = 0;

    nlohmann::json to_json() const;
    static SubspaceProvenance from_json(const nlohmann::json& j);
    friend bool operator==(const SubspaceProvenance&, const SubspaceProvenance&) = default;
};

struct ToxicSubspace {
    linalg::SubspaceBasis basis;
    int layer_index = kHeadLayer;
    SubspaceProvenance provenance;

    std::size_t k() const noexcept { return basis.k(); }
    std::size_t dim() const noexcept { return basis.dim(); }
    friend bool operator==(const ToxicSubspace&, const ToxicSubspace&) = default;
};

} // namespace substeer
