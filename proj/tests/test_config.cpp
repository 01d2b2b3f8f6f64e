#include "doctest.h"

#include "substeer/config.hpp"
#include "substeer/error.hpp"
#include "test_support.hpp"

#include <fstream>

using namespace substeer;
using nlohmann::json;

TEST_CASE("defaults are the documented values") {
    const auto c = RunConfig::from_json(json::object());
    CHECK(c.pipeline.delta == 0.1);
    CHECK(c.pipeline.T == 20);
    CHECK(c.pipeline.k == 8);
    CHECK(c.pipeline.prompt_threshold == 0.5);
    CHECK(c.pipeline.n_prompts == 200);
    CHECK(c.steering.beta == 0.5);
    CHECK(c.steering.mode == steering::Mode::last_layer);
    CHECK(c.corpus.seed == 1234);
    CHECK(c.model.vocab_size == 64);
    CHECK(c.model.d_model == 64);
    CHECK(c.model.n_layers == 4);
    CHECK(c.eval.betas == eval::default_betas());
    CHECK(c.eval.layers == std::vector<int>{0, 1, 2, 3, -1});
    CHECK(c.eval.multi_layers == std::vector<int>{2, 3});
    CHECK(c.eval.timing.repetitions == 5);
    CHECK(c.eval.timing.warmup == 3);
    CHECK(c.lexicon.toxic_ids == corpus::Lexicon::defaults().toxic_ids);
    CHECK(c.workdir.empty());
    CHECK(c.artifact("subspace") == "subspace/subspace.txss");
    CHECK(c.artifact("gradients") == "pipeline/gradients.txmd");
}

TEST_CASE("unknown keys are rejected at every level") {
    CHECK_THROWS_WITH_AS(RunConfig::from_json({{"modle", json::object()}}), doctest::Contains("modle"), ParameterError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json({{"pipeline", {{"kk", 3}}}}), doctest::Contains("pipeline.kk"),
                         ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"corpus", {{"lexicon", {{"bogus", 1}}}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"steering", {{"gain", 1}}}}), ParameterError);
}

TEST_CASE("type and range errors") {
    CHECK_THROWS_AS(RunConfig::from_json({{"pipeline", {{"k", "eight"}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"pipeline", {{"delta", 0.0}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"pipeline", {{"T", 1}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"steering", {{"beta", 2.0}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"eval", {{"layers", {7}}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"eval", {{"betas", {0.5, 1.5}}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"model", {{"vocab_size", 80}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json({{"paths", {{"model", 3}}}}), ParameterError);
    CHECK_THROWS_AS(RunConfig::from_json(json::array()), ParameterError);
}

TEST_CASE("--set assignments") {
    json o = json::object();
    RunConfig::apply_set(o, "steering.beta=0.8");
    RunConfig::apply_set(o, "steering.mode=multi_layer");
    RunConfig::apply_set(o, "steering.layers=[1,2]");
    RunConfig::apply_set(o, "pipeline.k=4");
    CHECK(o["steering"]["beta"] == 0.8);
    CHECK(o["steering"]["mode"] == "multi_layer");
    const auto c = RunConfig::from_json(o);
    CHECK(c.steering.beta == 0.8);
    CHECK(c.steering.mode == steering::Mode::multi_layer);
    CHECK(c.steering.layers == std::vector<int>{1, 2});
    CHECK(c.pipeline.k == 4);
    CHECK_THROWS_AS(RunConfig::apply_set(o, "novalue"), UsageError);
    CHECK_THROWS_AS(RunConfig::apply_set(o, "=3"), UsageError);
    CHECK_THROWS_AS(RunConfig::apply_set(o, "a..b=3"), UsageError);
}

TEST_CASE("sweep layer defaults follow the model depth") {
    const auto c = RunConfig::from_json({{"model", {{"n_layers", 2}}}});
    CHECK(c.eval.layers == std::vector<int>{0, 1, -1});
    CHECK(c.eval.multi_layers == std::vector<int>{1});
}

TEST_CASE("config file plus overrides") {
    const auto dir = testing_support::scratch_dir("config");
    const auto file = dir / "run.json";
    std::ofstream(file) << R"({"pipeline": {"k": 6}, "paths": {"workdir": "/tmp/somewhere"}})";
    const auto c = load_run_config(file, {"pipeline.k=5", "corpus.seed=9"});
    CHECK(c.pipeline.k == 5);
    CHECK(c.corpus.seed == 9);
    CHECK(c.workdir == "/tmp/somewhere");
    CHECK(c.path("model") == std::filesystem::path("/tmp/somewhere/model/model.tlm"));
    CHECK(c.doc.at("pipeline").at("k") == 5);

    std::ofstream(dir / "bad.json") << "{not json";
    CHECK_THROWS_AS(load_run_config(dir / "bad.json", {}), ParameterError);
    CHECK_THROWS_AS(load_run_config(dir / "absent.json", {}), UsageError);
    CHECK_THROWS_AS(c.artifact("nope"), InternalError);
}
