#include "doctest.h"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "substeer/workflow.hpp"
#include "test_support.hpp"

#include <fstream>

using namespace substeer;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json small_run() {
    return {
        {"corpus", {{"num_sequences", 200}, {"max_len", 32}, {"pool_sequences", 400}, {"heldout_sequences", 20}}},
        {"model", {{"d_model", 16}, {"n_layers", 2}, {"n_heads", 2}, {"mlp_ratio", 2}, {"context_len", 48}, {"steps", 30}}},
        {"pipeline", {{"T", 8}, {"k", 3}, {"n_prompts", 12}}},
        {"eval",
         {{"betas", {0.0, 0.5, 1.0}},
          {"timing_warmup", 0},
          {"timing_repetitions", 1},
          {"timing_prompts", 2},
          {"gate_epochs", 50},
          {"permutation_controls", 3},
          {"theory_trials", 50},
          {"stability_trials", 2},
          {"noise_levels", {0.01, 0.1}},
          {"null_trials", 1},
          {"bench_calls", 200}}},
    };
}

RunConfig small_config(const fs::path& dir, const std::vector<std::string>& sets = {}) {
    json o = small_run();
    for (const auto& s : sets) RunConfig::apply_set(o, s);
    auto c = RunConfig::from_json(o);
    c.workdir = dir;
    return c;
}

std::string slurp(const fs::path& p) {
    const auto b = io::read_file(p);
    return {b.begin(), b.end()};
}

void run_all(const RunConfig& c) {
    for (const auto& s : workflow::stage_names()) CHECK_NOTHROW(workflow::run_stage(s, c));
}

} // namespace

TEST_CASE("stage table") {
    const auto& names = workflow::stage_names();
    CHECK(names.size() == 12);
    CHECK(names.front() == "gen-corpus");
    CHECK(names.back() == "report");
    CHECK(workflow::producer_of("gradients") == "grads");
    CHECK(workflow::producer_of("subspace") == "discover");
    CHECK(workflow::producer_of("config_echo").empty());
    CHECK(workflow::meta_path("grads") == fs::path("pipeline/grads.meta.json"));
    CHECK_THROWS_AS(workflow::run_stage("train", small_config(testing_support::scratch_dir("wf_bad"))), UsageError);
}

TEST_CASE("missing upstream artifact names the producing stage") {
    const auto c = small_config(testing_support::scratch_dir("wf_missing"));
    CHECK_THROWS_WITH_AS(workflow::run_stage("discover", c), doctest::Contains("`grads`"), UsageError);
    CHECK_THROWS_WITH_AS(workflow::run_stage("train-lm", c), doctest::Contains("`gen-corpus`"), UsageError);
    RunConfig nowd = c;
    nowd.workdir.clear();
    CHECK_THROWS_AS(workflow::gen_corpus(nowd), UsageError);
}

TEST_CASE("full chain on a small config: artifacts, provenance, rerun") {
    const auto dir = testing_support::scratch_dir("wf_chain");
    const auto c = small_config(dir);
    run_all(c);
    for (const auto* a : {"model", "hidden", "records", "gradients", "subspace", "gate", "sweep_csv", "theory", "bench",
                          "summary", "toxicity_matrix", "perplexity_matrix", "config_echo"}) {
        CHECK_MESSAGE(fs::exists(c.path(a)), a);
    }
    const auto sub = io::load_subspace(c.path("subspace"));
    CHECK(sub.k() == 3);
    CHECK(sub.provenance.model_hash == io::sha256_file(c.path("model")));
    CHECK(sub.provenance.gradient_hash == io::sha256_file(c.path("gradients")));
    CHECK_NOTHROW(io::load_subspace(c.path("subspace"), c.path("gradients")));
    CHECK(workflow::verify_provenance(c).size() == 11);

    const auto summary = slurp(c.path("summary"));
    CHECK(summary.find("vanilla row matches steer-eval") != std::string::npos);
    const auto echo = json::parse(slurp(c.path("config_echo")));
    CHECK(echo.at("paths").at("workdir").is_null());
    CHECK(echo.at("pipeline").at("k") == 3);

    // unchanged inputs rewrite byte-identical artifacts
    const auto before_sub = slurp(c.path("subspace"));
    const auto before_records = slurp(c.path("records"));
    const auto before_meta = slurp(dir / workflow::meta_path("discover"));
    for (const auto* s : {"gen-corpus", "train-lm", "collect", "attribute", "grads", "discover"}) workflow::run_stage(s, c);
    CHECK(slurp(c.path("subspace")) == before_sub);
    CHECK(slurp(c.path("records")) == before_records);
    CHECK(slurp(dir / workflow::meta_path("discover")) == before_meta);
    CHECK(workflow::verify_provenance(c).size() == 11);

    SUBCASE("steer-eval at beta 0 reproduces the sweep's vanilla cell") {
        const auto zero = small_config(dir, {"steering.beta=0"});
        workflow::run_stage("steer-eval", zero);
        const auto se = json::parse(slurp(c.path("steer_eval")));
        const auto grid = eval::parse_sweep_csv(slurp(c.path("sweep_csv")));
        const auto& cell = grid.at(kHeadLayer, 0.0).report;
        CHECK(se.at("steered").at("toxicity").get<double>() == cell.toxicity);
        CHECK(se.at("steered").at("perplexity").get<double>() == cell.perplexity);
        CHECK(se.at("steered").at("utility").get<double>() == cell.utility);
        CHECK(se.at("toxicity_reduction").get<double>() == 0.0);
    }
    SUBCASE("tampering breaks the chain") {
        std::ofstream(c.path("records"), std::ios::app) << "\n";
        CHECK_THROWS_WITH_AS(workflow::verify_provenance(c), doctest::Contains("records.ndjson"), DataError);
        CHECK_THROWS_AS(workflow::run_stage("report", c), DataError);
    }
    SUBCASE("a stale consumer is detected") {
        workflow::run_stage("attribute", small_config(dir, {"pipeline.delta=0.3"}));
        CHECK_THROWS_WITH_AS(workflow::verify_provenance(c), doctest::Contains("rerun `grads`"), DataError);
    }
    SUBCASE("gated steer-eval loads the trained gate") {
        const auto gated = small_config(dir, {"steering.mode=classifier_gated"});
        CHECK_NOTHROW(workflow::run_stage("steer-eval", gated));
        fs::remove(c.path("gate"));
        CHECK_THROWS_WITH_AS(workflow::run_stage("steer-eval", gated), doctest::Contains("`strategies`"), UsageError);
    }
}

TEST_CASE("workdir lock is exclusive") {
    const auto dir = testing_support::scratch_dir("wf_lock");
    workflow::WorkdirLock a(dir);
    CHECK_THROWS_AS([&] { workflow::WorkdirLock b(dir); }(), UsageError);
    CHECK_THROWS_WITH_AS(workflow::run_stage("gen-corpus", small_config(dir)), doctest::Contains("locked"), UsageError);
}
