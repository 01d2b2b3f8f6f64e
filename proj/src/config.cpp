#include "substeer/config.hpp"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"

#include <fstream>

namespace substeer {

namespace {

using nlohmann::json;

// Subtrees validated by their own parsers rather than against the defaults.
bool opaque(const std::string& path) { return path == "corpus.lexicon"; }

void merge(json& base, const json& over, const std::string& prefix) {
    if (!over.is_object()) throw ParameterError("config: '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
    for (const auto& [key, value] : over.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw ParameterError("config: unknown key '" + path + "'");
        auto& slot = base[key];
        if (slot.is_object() && !opaque(path)) {
            merge(slot, value, path);
        } else {
            slot = value;
        }
    }
}

template <typename T>
T get(const json& section, const char* key, const char* name) {
    try {
        return section.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParameterError(std::string("config: ") + name + "." + key + ": " + e.what());
    }
}

} // namespace

nlohmann::json RunConfig::defaults() {
    const lm::ModelConfig m;
    const lm::TrainOptions t;
    const corpus::CorpusSpec c;
    return {
        {"corpus",
         {{"seed", c.seed},
          {"num_sequences", c.num_sequences},
          {"max_len", c.max_len},
          {"trigger_prob", c.trigger_prob},
          {"toxic_burst_prob", c.toxic_burst_prob},
          {"burst_continue_prob", c.burst_continue_prob},
          {"pool_sequences", 2000},
          {"heldout_sequences", 200},
          {"lexicon", corpus::Lexicon::defaults().to_json()}}},
        {"model",
         {{"vocab_size", m.vocab_size},
          {"d_model", m.d_model},
          {"n_layers", m.n_layers},
          {"n_heads", m.n_heads},
          {"mlp_ratio", m.mlp_ratio},
          {"context_len", m.context_len},
          {"tie_head", m.tie_head},
          {"seed", m.seed},
          {"steps", t.steps},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"beta2", t.beta2},
          {"warmup_steps", t.warmup_steps},
          {"grad_clip", t.grad_clip},
          {"log_every", t.log_every}}},
        {"pipeline",
         {{"delta", 0.1},
          {"T", 20},
          {"k", 8},
          {"prompt_threshold", 0.5},
          {"n_prompts", 200},
          {"prompt_length", corpus::kDefaultPromptLength},
          {"greedy", false},
          {"temperature", 1.0},
          {"decode_seed", 0}}},
        {"steering",
         {{"mode", "last_layer"},
          {"beta", 0.5},
          {"layers", json::array()},
          {"gate_threshold", 0.5},
          {"multi_beta_scale", 0.5}}},
        {"eval",
         {{"betas", eval::default_betas()},
          {"layers", nullptr},
          {"multi_layers", nullptr},
          {"gated_beta", 0.5},
          {"seed", 77},
          {"timing_warmup", 3},
          {"timing_repetitions", 5},
          {"timing_prompts", 16},
          {"gate_epochs", 500},
          {"gate_learning_rate", 0.1},
          {"gate_l2", 0.0},
          {"gate_holdout", 0.2},
          {"gate_seed", 11},
          {"permutation_controls", 20},
          {"theory_trials", 1000},
          {"theory_vocab", 256},
          {"stability_trials", 20},
          {"noise_levels", {0.01, 0.02, 0.05, 0.1, 0.2, 0.5}},
          {"null_trials", 5},
          {"bench_calls", 20000}}},
        {"paths",
         {{"workdir", nullptr},
          {"corpus_train", "corpus/train.txt"},
          {"discovery_pool", "corpus/discovery_pool.txt"},
          {"eval_pool", "corpus/eval_pool.txt"},
          {"heldout", "corpus/heldout.txt"},
          {"lexicon", "corpus/lexicon.json"},
          {"prompts_discovery", "corpus/prompts_discovery.txt"},
          {"prompts_eval", "corpus/prompts_eval.txt"},
          {"model", "model/model.tlm"},
          {"train_log", "model/train.json"},
          {"continuations", "pipeline/continuations.ndjson"},
          {"hidden", "pipeline/final_hidden.txmd"},
          {"records", "pipeline/records.ndjson"},
          {"gradients", "pipeline/gradients.txmd"},
          {"grads_summary", "pipeline/grads.json"},
          {"subspace", "subspace/subspace.txss"},
          {"discover_summary", "subspace/discover.json"},
          {"gate", "subspace/gate.json"},
          {"steer_eval", "eval/steer_eval.json"},
          {"sweep_csv", "eval/sweep.csv"},
          {"sweep_per_beta", "eval/sweep_per_beta.csv"},
          {"sweep_per_layer", "eval/sweep_per_layer.csv"},
          {"toxicity_matrix", "eval/toxicity_matrix.txt"},
          {"perplexity_matrix", "eval/perplexity_matrix.txt"},
          {"strategies", "eval/strategies.json"},
          {"strategies_table", "eval/strategies.txt"},
          {"bench", "eval/bench.json"},
          {"theory", "reports/theory.json"},
          {"theory_table", "reports/theory.txt"},
          {"summary", "reports/summary.txt"},
          {"config_echo", "reports/config.json"}}},
    };
}

RunConfig RunConfig::from_json(const nlohmann::json& overrides) {
    RunConfig rc;
    rc.doc = defaults();
    merge(rc.doc, overrides.is_null() ? json::object() : overrides, "");
    const auto& c = rc.doc.at("corpus");
    rc.corpus.seed = get<std::uint64_t>(c, "seed", "corpus");
    rc.corpus.num_sequences = get<std::size_t>(c, "num_sequences", "corpus");
    rc.corpus.max_len = get<std::size_t>(c, "max_len", "corpus");
    rc.corpus.trigger_prob = get<double>(c, "trigger_prob", "corpus");
    rc.corpus.toxic_burst_prob = get<double>(c, "toxic_burst_prob", "corpus");
    rc.corpus.burst_continue_prob = get<double>(c, "burst_continue_prob", "corpus");
    rc.corpus.validate();
    rc.pool_sequences = get<std::size_t>(c, "pool_sequences", "corpus");
    rc.heldout_sequences = get<std::size_t>(c, "heldout_sequences", "corpus");
    rc.lexicon = corpus::Lexicon::from_json(c.at("lexicon"));

    const auto& m = rc.doc.at("model");
    rc.model.vocab_size = get<int>(m, "vocab_size", "model");
    rc.model.d_model = get<int>(m, "d_model", "model");
    rc.model.n_layers = get<int>(m, "n_layers", "model");
    rc.model.n_heads = get<int>(m, "n_heads", "model");
    rc.model.mlp_ratio = get<int>(m, "mlp_ratio", "model");
    rc.model.context_len = get<int>(m, "context_len", "model");
    rc.model.tie_head = get<bool>(m, "tie_head", "model");
    rc.model.seed = get<std::uint64_t>(m, "seed", "model");
    rc.model.validate();
    if (rc.model.vocab_size != rc.lexicon.vocab_size) {
        throw ParameterError("config: model.vocab_size " + std::to_string(rc.model.vocab_size) +
                             " differs from the lexicon's " + std::to_string(rc.lexicon.vocab_size));
    }
    rc.train.steps = get<std::size_t>(m, "steps", "model");
    rc.train.batch_size = get<std::size_t>(m, "batch_size", "model");
    rc.train.learning_rate = get<double>(m, "learning_rate", "model");
    rc.train.beta2 = get<double>(m, "beta2", "model");
    rc.train.warmup_steps = get<std::size_t>(m, "warmup_steps", "model");
    rc.train.grad_clip = get<double>(m, "grad_clip", "model");
    rc.train.log_every = get<std::size_t>(m, "log_every", "model");

    const auto& p = rc.doc.at("pipeline");
    rc.pipeline.delta = get<double>(p, "delta", "pipeline");
    rc.pipeline.T = get<std::size_t>(p, "T", "pipeline");
    rc.pipeline.k = get<std::size_t>(p, "k", "pipeline");
    rc.pipeline.prompt_threshold = get<double>(p, "prompt_threshold", "pipeline");
    rc.pipeline.n_prompts = get<std::size_t>(p, "n_prompts", "pipeline");
    rc.pipeline.prompt_length = get<std::size_t>(p, "prompt_length", "pipeline");
    rc.pipeline.decode.greedy = get<bool>(p, "greedy", "pipeline");
    rc.pipeline.decode.temperature = get<double>(p, "temperature", "pipeline");
    rc.pipeline.decode.seed = get<std::uint64_t>(p, "decode_seed", "pipeline");
    if (!(rc.pipeline.delta > 0.0 && rc.pipeline.delta <= 1.0)) throw ParameterError("config: pipeline.delta must lie in (0, 1]");
    if (rc.pipeline.T < 2) throw ParameterError("config: pipeline.T must be at least 2");
    if (rc.pipeline.k < 1) throw ParameterError("config: pipeline.k must be positive");
    if (rc.pipeline.n_prompts < 1) throw ParameterError("config: pipeline.n_prompts must be positive");
    if (!(rc.pipeline.decode.temperature > 0.0)) throw ParameterError("config: pipeline.temperature must be positive");

    rc.steering = steering::SteeringConfig::from_json(rc.doc.at("steering"));
    rc.steering.validate(rc.model.n_layers);

    const auto& e = rc.doc.at("eval");
    auto& ev = rc.eval;
    ev.betas = get<std::vector<double>>(e, "betas", "eval");
    ev.layers = e.at("layers").is_null() ? eval::default_layers(rc.model.n_layers) : get<std::vector<int>>(e, "layers", "eval");
    if (e.at("multi_layers").is_null()) {
        for (int l = rc.model.n_layers / 2; l < rc.model.n_layers; ++l) ev.multi_layers.push_back(l);
    } else {
        ev.multi_layers = get<std::vector<int>>(e, "multi_layers", "eval");
    }
    ev.gated_beta = get<double>(e, "gated_beta", "eval");
    ev.seed = get<std::uint64_t>(e, "seed", "eval");
    ev.timing.warmup = get<std::size_t>(e, "timing_warmup", "eval");
    ev.timing.repetitions = get<std::size_t>(e, "timing_repetitions", "eval");
    ev.timing.max_prompts = get<std::size_t>(e, "timing_prompts", "eval");
    ev.gate.epochs = get<std::size_t>(e, "gate_epochs", "eval");
    ev.gate.learning_rate = get<double>(e, "gate_learning_rate", "eval");
    ev.gate.l2 = get<double>(e, "gate_l2", "eval");
    ev.gate_holdout = get<double>(e, "gate_holdout", "eval");
    ev.gate_seed = get<std::uint64_t>(e, "gate_seed", "eval");
    ev.permutation_controls = get<std::size_t>(e, "permutation_controls", "eval");
    ev.theory_trials = get<std::size_t>(e, "theory_trials", "eval");
    ev.theory_vocab = get<int>(e, "theory_vocab", "eval");
    ev.stability_trials = get<std::size_t>(e, "stability_trials", "eval");
    ev.noise_levels = get<std::vector<double>>(e, "noise_levels", "eval");
    ev.null_trials = get<std::size_t>(e, "null_trials", "eval");
    ev.bench_calls = get<std::size_t>(e, "bench_calls", "eval");
    if (ev.betas.empty() || ev.layers.empty()) throw ParameterError("config: eval.betas and eval.layers must be nonempty");
    for (double b : ev.betas) {
        if (!(b >= 0.0 && b <= 1.0)) throw ParameterError("config: eval.betas entries must lie in [0, 1]");
    }
    for (int l : ev.layers) {
        if (l != kHeadLayer && (l < 0 || l >= rc.model.n_layers)) {
            throw ParameterError("config: eval.layers entry " + std::to_string(l) + " is not a block index or -1");
        }
    }
    if (!(ev.gate_holdout > 0.0 && ev.gate_holdout < 1.0)) throw ParameterError("config: eval.gate_holdout must lie in (0, 1)");
    if (!(ev.gated_beta >= 0.0 && ev.gated_beta <= 1.0)) throw ParameterError("config: eval.gated_beta must lie in [0, 1]");

    const auto& paths = rc.doc.at("paths");
    for (const auto& [key, value] : paths.items()) {
        if (key != "workdir" && !value.is_string()) throw ParameterError("config: paths." + key + " must be a string");
    }
    if (paths.at("workdir").is_string()) rc.workdir = paths.at("workdir").get<std::string>();
    return rc;
}

void RunConfig::apply_set(nlohmann::json& overrides, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects section.key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &overrides;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw UsageError("--set: empty key component in '" + key + "'");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = json::object();
        node = &(*node)[part];
        start = dot + 1;
    }
}

std::string RunConfig::artifact(const std::string& name) const {
    const auto& paths = doc.at("paths");
    if (!paths.contains(name) || name == "workdir") throw InternalError("unknown artifact name '" + name + "'");
    return paths.at(name).get<std::string>();
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& sets) {
    json overrides = json::object();
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw UsageError("cannot open config file " + file.string());
        try {
            overrides = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ParameterError("config file " + file.string() + ": " + e.what());
        }
    }
    for (const auto& s : sets) RunConfig::apply_set(overrides, s);
    return RunConfig::from_json(overrides);
}

} // namespace substeer
