#pragma once

#include "substeer/artifacts.hpp"
#include "substeer/corpus.hpp"
#include "substeer/toy_lm.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace substeer::pipeline {

using corpus::Sequence;
using corpus::Token;

struct CollectOptions {
    std::size_t T = 20;
    lm::DecodeConfig decode{false, 1.0, 0};  // decode.seed is mixed with the prompt index
};

struct Continuation {
    std::size_t prompt_id = 0;
    Sequence prompt;
    Sequence tokens;
    lm::HiddenTrace trace;  // row t: state of the step that emitted tokens[t]
};

// Per-prompt decode seed: derive_seed(decode.seed, prompt_id).
lm::DecodeConfig prompt_decode(const lm::DecodeConfig& base, std::size_t prompt_id);

std::vector<Continuation> collect_continuations(const lm::Model& model, const std::vector<Sequence>& prompts,
                                                const CollectOptions& options = {});

struct TokenRecord {
    std::size_t prompt_id = 0;
    std::size_t position = 0;
    Token token = 0;
    double drop = 0.0;  // s(y) - s(y without position t)
    bool toxic = false;
    std::vector<double> hidden;  // present iff toxic

    nlohmann::json to_json() const;
    static TokenRecord from_json(const nlohmann::json& j);
    friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

// Leave-one-out attribution by deletion. Flags only; hidden states are attached separately.
std::vector<TokenRecord> attribute_tokens(std::span<const Token> y, const corpus::Lexicon& lex, double delta,
                                          std::size_t prompt_id = 0);

// Attributes every continuation and attaches the final hidden state to each toxic record.
std::vector<TokenRecord> attribute_continuations(const std::vector<Continuation>& continuations,
                                                 const corpus::Lexicon& lex, double delta);

std::string format_records(const std::vector<TokenRecord>& records);
std::vector<TokenRecord> parse_records(const std::string& ndjson);
void write_records(const std::filesystem::path& path, const std::vector<TokenRecord>& records);
std::vector<TokenRecord> read_records(const std::filesystem::path& path);

// One unit-norm head gradient per toxic record, in record order. Gradients with
// norm below 1e-12 are skipped and counted in provenance.skipped_zero_norm.
GradientMatrix build_gradient_matrix(const linalg::Matrix& head, const std::vector<TokenRecord>& records,
                                     GradientProvenance provenance = {});

// Null distribution for the top singular value: each control draws independent
// random signs per entry, shuffles every column independently across rows and
// re-normalizes the rows.
std::vector<double> permutation_control(const GradientMatrix& g, std::size_t n_controls, std::uint64_t seed);

struct DiscoveryInfo {
    std::string model_hash;
    std::uint64_t corpus_seed = 0;
    std::uint64_t model_seed = 0;
    int layer_index = kHeadLayer;
};

struct Discovery {
    ToxicSubspace subspace;
    std::vector<double> singular_values;
};

// Top-k right singular subspace of G. The gradient hash is the SHA-256 of G's
// serialized DenseMatrixFile; the creation time comes from SOURCE_DATE_EPOCH.
Discovery discover_subspace(const GradientMatrix& g, std::size_t k, const DiscoveryInfo& info = {});

// Mean of ||P x||^2 over the rows.
double mean_projected_energy(const linalg::SubspaceBasis& basis, const linalg::Matrix& rows);

std::int64_t creation_time();

} // namespace substeer::pipeline
