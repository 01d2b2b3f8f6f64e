#pragma once

#include "substeer/corpus.hpp"
#include "substeer/eval.hpp"
#include "substeer/steering.hpp"
#include "substeer/toy_lm.hpp"

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer {

struct PipelineSettings {
    double delta = 0.1;
    std::size_t T = 20;
    std::size_t k = 8;
    double prompt_threshold = 0.5;
    std::size_t n_prompts = 200;
    std::size_t prompt_length = corpus::kDefaultPromptLength;
    lm::DecodeConfig decode{false, 1.0, 0};
};

struct EvalSettings {
    std::vector<double> betas;
    std::vector<int> layers;        // sweep layers; -1 is the head point
    std::vector<int> multi_layers;  // strategies table, multi_layer row
    double gated_beta = 0.5;
    std::uint64_t seed = 77;
    eval::TimingOptions timing;
    steering::GateOptions gate;
    double gate_holdout = 0.2;
    std::uint64_t gate_seed = 11;
    std::size_t permutation_controls = 20;
    std::size_t theory_trials = 1000;
    int theory_vocab = 256;
    std::size_t stability_trials = 20;
    std::vector<double> noise_levels;
    std::size_t null_trials = 5;
    std::size_t bench_calls = 20000;
};

// Effective run configuration: the defaults document overlaid with the user's
// file and --set overrides. Unknown keys are rejected at every level.
struct RunConfig {
    nlohmann::json doc;

    corpus::CorpusSpec corpus;
    corpus::Lexicon lexicon;
    std::size_t pool_sequences = 2000;
    std::size_t heldout_sequences = 200;
    lm::ModelConfig model;
    lm::TrainOptions train;
    PipelineSettings pipeline;
    steering::SteeringConfig steering;
    EvalSettings eval;
    std::filesystem::path workdir;

    static nlohmann::json defaults();
    static RunConfig from_json(const nlohmann::json& overrides);

    // `section.key=value`; value parsed as JSON, falling back to a plain string.
    static void apply_set(nlohmann::json& overrides, const std::string& assignment);

    std::string artifact(const std::string& name) const;  // relative path from paths.*
    std::filesystem::path path(const std::string& name) const { return workdir / artifact(name); }
};

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& sets);

} // namespace substeer
