#pragma once

#include "substeer/corpus.hpp"
#include "substeer/steering.hpp"
#include "substeer/toy_lm.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer::eval {

using corpus::Sequence;

struct ToxicityStats {
    double percent = 0.0;          // mean oracle score x 100
    std::size_t toxic_tokens = 0;  // toxic-lexicon tokens across all continuations
    std::size_t n_prompts = 0;
};

// Continuation i is decoded with seed derive_seed(decode.seed, i), so steered and
// vanilla runs share per-prompt randomness.
ToxicityStats toxicity_stats(const lm::Model& model, const lm::HiddenStateHook* hook,
                             const std::vector<Sequence>& prompts, const corpus::Lexicon& lex, std::size_t T,
                             const lm::DecodeConfig& decode);

double eval_toxicity(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                     const corpus::Lexicon& lex, std::size_t T, const lm::DecodeConfig& decode);

// Top-1 next-token accuracy over every position of the held-out corpus.
double utility_proxy(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& corpus);

struct TimingOptions {
    std::size_t warmup = 3;
    std::size_t repetitions = 5;
    std::size_t max_prompts = 16;  // prompts timed per repetition
};

// Greedy KV-cached decoding; the first generated token of every prompt is excluded.
// Median over repetitions of total time / timed tokens.
double sec_per_token(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                     std::size_t T, const TimingOptions& options = {});

struct Overhead {
    double vanilla = 0.0;
    double steered = 0.0;
    double delta = 0.0;
    double noise_floor = 0.0;  // median |vanilla - vanilla| between interleaved repeat pairs
    nlohmann::json to_json() const;
};

// Arms are interleaved repetition by repetition so drift affects both equally.
Overhead runtime_overhead(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                          std::size_t T, const TimingOptions& options = {});

// Median seconds per hook application at the head point, timed in isolation.
double hook_cost(const lm::HiddenStateHook& hook, std::size_t dim, std::size_t calls = 20000,
                 std::size_t repetitions = 7);

struct EvalReport {
    double toxicity = 0.0;
    double perplexity = 0.0;
    double utility = 0.0;
    double sec_per_token = 0.0;
    std::size_t n_prompts = 0;
    std::size_t T = 0;
    nlohmann::json steering;  // null when unsteered
    std::uint64_t seed = 0;
    std::size_t toxic_tokens = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

struct EvalInputs {
    const std::vector<Sequence>* prompts = nullptr;
    const std::vector<Sequence>* heldout = nullptr;  // benign corpus for perplexity and utility
    corpus::Lexicon lexicon;
    std::size_t T = 20;
    lm::DecodeConfig decode{false, 1.0, 0};
    TimingOptions timing;
};

EvalReport evaluate(const lm::Model& model, const lm::HiddenStateHook* hook, const nlohmann::json& steering,
                    const EvalInputs& in);

// Sweep cell configuration: the head point uses last_layer mode, block l uses
// multi_layer over {l} at the full beta.
steering::SteeringConfig cell_config(int layer, double beta);

struct SweepCell {
    int layer = kHeadLayer;
    double beta = 0.0;
    EvalReport report;
};

struct SweepGrid {
    std::vector<double> betas;
    std::vector<int> layers;
    std::vector<SweepCell> cells;  // layer-major, in the order of `layers` then `betas`

    const SweepCell& at(int layer, double beta) const;
    void check_complete() const;
};

std::vector<double> default_betas();
std::vector<int> default_layers(int n_layers);

SweepGrid run_sweep(const lm::Model& model, const ToxicSubspace& subspace, const std::vector<double>& betas,
                    const std::vector<int>& layers, const EvalInputs& in);

inline constexpr const char* kSweepHeader = "layer,beta,toxicity,perplexity,utility,sec_per_token,n_prompts,seed";

std::string format_sweep_csv(const SweepGrid& grid);
SweepGrid parse_sweep_csv(const std::string& text);

struct Aggregate {
    double key = 0.0;  // beta or layer index
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
};

enum class Metric { toxicity, perplexity, utility };
const char* to_string(Metric m) noexcept;

std::vector<Aggregate> per_beta(const SweepGrid& grid, Metric metric);   // across layers
std::vector<Aggregate> per_layer(const SweepGrid& grid, Metric metric);  // across betas
std::string format_aggregates(const std::vector<Aggregate>& rows, const std::string& key_name);

// Matrix text: header `# rows=layers cols=betas p10=<v> p90=<v>`, then one line per layer.
std::string format_matrix(const SweepGrid& grid, Metric metric);

struct StrategyRow {
    std::string name;
    EvalReport report;
};

// vanilla, last_layer, multi_layer, classifier_gated under identical prompts and seeds.
std::vector<StrategyRow> compare_strategies(const lm::Model& model, const ToxicSubspace& subspace,
                                            const steering::GateClassifier& gate, const steering::SteeringConfig& last,
                                            const steering::SteeringConfig& multi,
                                            const steering::SteeringConfig& gated, const EvalInputs& in);

std::string format_strategy_table(const std::vector<StrategyRow>& rows);

} // namespace substeer::eval
