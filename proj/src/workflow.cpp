#include "substeer/workflow.hpp"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "substeer/pipeline.hpp"
#include "substeer/rng.hpp"
#include "substeer/steering.hpp"
#include "substeer/theory.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fcntl.h>
#include <iomanip>
#include <map>
#include <sstream>
#include <sys/file.h>
#include <unistd.h>

namespace substeer::workflow {

namespace fs = std::filesystem;
using nlohmann::json;
using corpus::Sequence;

namespace {

// stage -> artifacts it writes (paths.* keys)
const std::vector<std::pair<std::string, std::vector<std::string>>>& stage_outputs() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> table{
        {"gen-corpus",
         {"corpus_train", "discovery_pool", "eval_pool", "heldout", "lexicon", "prompts_discovery", "prompts_eval"}},
        {"train-lm", {"model", "train_log"}},
        {"collect", {"continuations", "hidden"}},
        {"attribute", {"records"}},
        {"grads", {"gradients", "grads_summary"}},
        {"discover", {"subspace", "discover_summary"}},
        {"steer-eval", {"steer_eval"}},
        {"sweep", {"sweep_csv"}},
        {"strategies", {"gate", "strategies", "strategies_table"}},
        {"theory-check", {"theory", "theory_table"}},
        {"bench", {"bench"}},
        {"report",
         {"sweep_per_beta", "sweep_per_layer", "toxicity_matrix", "perplexity_matrix", "summary"}},
    };
    return table;
}

const std::map<std::string, std::string>& stage_dirs() {
    static const std::map<std::string, std::string> dirs{
        {"gen-corpus", "corpus"},  {"train-lm", "model"},   {"collect", "pipeline"},     {"attribute", "pipeline"},
        {"grads", "pipeline"},     {"discover", "subspace"}, {"steer-eval", "eval"},      {"sweep", "eval"},
        {"strategies", "eval"},    {"theory-check", "reports"}, {"bench", "eval"},        {"report", "reports"},
    };
    return dirs;
}

json config_echo(const RunConfig& cfg) {
    json doc = cfg.doc;
    doc["paths"]["workdir"] = nullptr;
    return doc;
}

std::string hex_or_empty(const fs::path& p) { return fs::exists(p) ? io::sha256_file(p) : std::string(); }

// Tracks one stage's inputs and outputs and writes its meta file.
class Stage {
public:
    Stage(const RunConfig& cfg, std::string name) : cfg_(cfg), name_(std::move(name)) {
        if (cfg_.workdir.empty()) throw UsageError("no workdir: pass --workdir or set SUBSPACE_STEER_WORKDIR");
    }

    fs::path in(const std::string& artifact) {
        const auto p = cfg_.path(artifact);
        if (!fs::exists(p)) {
            throw UsageError(name_ + ": missing " + cfg_.artifact(artifact) + "; run `" + producer_of(artifact) +
                             "` first");
        }
        inputs_[artifact] = io::sha256_file(p);
        return p;
    }

    fs::path out(const std::string& artifact) {
        const auto p = cfg_.path(artifact);
        fs::create_directories(p.parent_path());
        outputs_.push_back(artifact);
        return p;
    }

    void finish(const json& summary = json::object()) const {
        json meta{{"stage", name_}, {"config", config_echo(cfg_)}, {"inputs", json::object()},
                  {"outputs", json::object()}, {"summary", summary}};
        for (const auto& [k, h] : inputs_) meta["inputs"][k] = {{"path", cfg_.artifact(k)}, {"sha256", h}};
        for (const auto& k : outputs_) {
            meta["outputs"][k] = {{"path", cfg_.artifact(k)}, {"sha256", io::sha256_file(cfg_.path(k))}};
        }
        const auto mp = cfg_.workdir / meta_path(name_);
        fs::create_directories(mp.parent_path());
        io::write_text_atomic(mp, meta.dump(2) + "\n");
        const auto echo = cfg_.path("config_echo");
        fs::create_directories(echo.parent_path());
        io::write_text_atomic(echo, config_echo(cfg_).dump(2) + "\n");
    }

    const RunConfig& cfg() const { return cfg_; }

private:
    const RunConfig& cfg_;
    std::string name_;
    std::map<std::string, std::string> inputs_;
    std::vector<std::string> outputs_;
};

std::string fixed(double x, int prec) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << x;
    return os.str();
}

std::string sci(double x) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << x;
    return os.str();
}

json read_json(const fs::path& p) {
    const auto bytes = io::read_file(p);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) { io::write_text_atomic(p, j.dump(2) + "\n"); }

std::vector<Sequence> concat(const corpus::PromptSet& s) {
    std::vector<Sequence> out = s.toxic;
    out.insert(out.end(), s.latent.begin(), s.latent.end());
    return out;
}

corpus::CorpusSpec pool_spec(const RunConfig& cfg, std::uint64_t stream, std::size_t n) {
    corpus::CorpusSpec s = cfg.corpus;
    s.seed = derive_seed(cfg.corpus.seed, stream);
    s.num_sequences = n;
    return s;
}

lm::Model load_model(Stage& st) { return lm::Model(lm::load_checkpoint(st.in("model"))); }

corpus::Lexicon load_lexicon(Stage& st) { return corpus::Lexicon::from_json(read_json(st.in("lexicon"))); }

pipeline::DiscoveryInfo discovery_info(const RunConfig& cfg) {
    pipeline::DiscoveryInfo info;
    info.model_hash = io::sha256_file(cfg.path("model"));
    info.corpus_seed = cfg.corpus.seed;
    info.model_seed = cfg.model.seed;
    return info;
}

eval::EvalInputs eval_inputs(const RunConfig& cfg, const std::vector<Sequence>& prompts,
                             const std::vector<Sequence>& heldout, const corpus::Lexicon& lex) {
    eval::EvalInputs in;
    in.prompts = &prompts;
    in.heldout = &heldout;
    in.lexicon = lex;
    in.T = cfg.pipeline.T;
    in.decode = cfg.pipeline.decode;
    in.decode.seed = cfg.eval.seed;
    in.timing = cfg.eval.timing;
    return in;
}

// Rebuilds continuations (with final hidden states) from the collect artifacts.
std::vector<pipeline::Continuation> load_continuations(Stage& st) {
    const auto text_bytes = io::read_file(st.in("continuations"));
    const auto hidden = io::load_matrix(st.in("hidden"));
    std::vector<pipeline::Continuation> out;
    std::istringstream in(std::string(text_bytes.begin(), text_bytes.end()));
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        pipeline::Continuation c;
        try {
            const auto j = json::parse(line);
            c.prompt_id = j.at("prompt_id").get<std::size_t>();
            c.prompt = j.at("prompt").get<Sequence>();
            c.tokens = j.at("tokens").get<Sequence>();
        } catch (const json::exception& e) {
            throw DataError("continuations: " + std::string(e.what()));
        }
        const std::size_t n = c.tokens.size();
        if (row + n > hidden.matrix.rows()) throw DataError("continuations: hidden-state file has too few rows");
        c.trace.final_hidden = linalg::Matrix(n, hidden.matrix.cols());
        for (std::size_t t = 0; t < n; ++t) {
            const auto src = hidden.matrix.row(row + t);
            std::copy(src.begin(), src.end(), c.trace.final_hidden.row(t).begin());
        }
        row += n;
        out.push_back(std::move(c));
    }
    if (row != hidden.matrix.rows()) throw DataError("continuations: hidden-state rows do not match token count");
    return out;
}

linalg::Matrix stack(const std::vector<std::vector<double>>& rows, std::size_t d) {
    linalg::Matrix m(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    return m;
}

} // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [s, _] : stage_outputs()) n.push_back(s);
        return n;
    }();
    return names;
}

std::string producer_of(const std::string& artifact) {
    for (const auto& [stage, outs] : stage_outputs()) {
        if (std::find(outs.begin(), outs.end(), artifact) != outs.end()) return stage;
    }
    return {};
}

fs::path meta_path(const std::string& stage) {
    const auto it = stage_dirs().find(stage);
    if (it == stage_dirs().end()) throw InternalError("unknown stage '" + stage + "'");
    return fs::path(it->second) / (stage + ".meta.json");
}

std::string gen_corpus(const RunConfig& cfg) {
    Stage st(cfg, "gen-corpus");
    const auto& lex = cfg.lexicon;
    const auto train = corpus::generate_corpus(cfg.corpus, lex);
    const auto disc_pool = corpus::generate_corpus(pool_spec(cfg, 1, cfg.pool_sequences), lex);
    const auto eval_pool = corpus::generate_corpus(pool_spec(cfg, 2, cfg.pool_sequences), lex);
    auto held_spec = pool_spec(cfg, 3, cfg.heldout_sequences);
    held_spec.trigger_prob = 0.0;
    const auto heldout = corpus::generate_corpus(held_spec, lex);
    const auto& p = cfg.pipeline;
    const auto disc = corpus::select_prompts(disc_pool, lex, p.prompt_threshold, p.n_prompts, p.prompt_length);
    const auto ev = corpus::select_prompts(eval_pool, lex, p.prompt_threshold, p.n_prompts, p.prompt_length);

    corpus::write_corpus(st.out("corpus_train"), train);
    corpus::write_corpus(st.out("discovery_pool"), disc_pool);
    corpus::write_corpus(st.out("eval_pool"), eval_pool);
    corpus::write_corpus(st.out("heldout"), heldout);
    write_json(st.out("lexicon"), lex.to_json());
    corpus::write_corpus(st.out("prompts_discovery"), concat(disc));
    corpus::write_corpus(st.out("prompts_eval"), concat(ev));
    st.finish({{"train_sequences", train.size()},
               {"heldout_sequences", heldout.size()},
               {"toxic_prompts", disc.toxic.size()},
               {"latent_prompts", disc.latent.size()}});
    return "gen-corpus: " + std::to_string(train.size()) + " training sequences, " +
           std::to_string(disc.toxic.size() + disc.latent.size()) + " discovery and " +
           std::to_string(ev.toxic.size() + ev.latent.size()) + " eval prompts, " + std::to_string(heldout.size()) +
           " held-out sequences";
}

std::string train_lm(const RunConfig& cfg) {
    Stage st(cfg, "train-lm");
    const auto train = corpus::read_corpus(st.in("corpus_train"));
    const auto lex = load_lexicon(st);
    if (lex.vocab_size != cfg.model.vocab_size) throw ParameterError("train-lm: lexicon and model vocab sizes differ");
    const auto res = lm::train(cfg.model, train, cfg.train);
    lm::save_checkpoint(res.params, st.out("model"));
    json history = json::array();
    for (std::size_t i = 0; i < res.loss_history.size(); i += 50) history.push_back(res.loss_history[i]);
    write_json(st.out("train_log"), {{"final_loss", res.final_loss},
                                     {"train_perplexity", res.train_perplexity},
                                     {"steps", cfg.train.steps},
                                     {"loss_every_50", history}});
    st.finish({{"final_loss", res.final_loss}, {"train_perplexity", res.train_perplexity}});
    return "train-lm: " + std::to_string(cfg.train.steps) + " steps, final loss " + fixed(res.final_loss, 4) +
           ", train perplexity " + fixed(res.train_perplexity, 3);
}

std::string collect(const RunConfig& cfg) {
    Stage st(cfg, "collect");
    const lm::Model model = load_model(st);
    const auto prompts = corpus::read_corpus(st.in("prompts_discovery"));
    pipeline::CollectOptions opts;
    opts.T = cfg.pipeline.T;
    opts.decode = cfg.pipeline.decode;
    const auto conts = pipeline::collect_continuations(model, prompts, opts);

    std::string text;
    std::size_t rows = 0;
    for (const auto& c : conts) {
        text += json{{"prompt_id", c.prompt_id}, {"prompt", c.prompt}, {"tokens", c.tokens}}.dump() + "\n";
        rows += c.tokens.size();
    }
    io::DenseMatrixFile hidden;
    hidden.matrix = linalg::Matrix(rows, static_cast<std::size_t>(model.config().d_model));
    std::size_t r = 0;
    for (const auto& c : conts) {
        for (std::size_t t = 0; t < c.tokens.size(); ++t, ++r) {
            const auto src = c.trace.final_hidden.row(t);
            std::copy(src.begin(), src.end(), hidden.matrix.row(r).begin());
        }
    }
    hidden.metadata = {{"kind", "final_hidden"},
                       {"layer_index", kHeadLayer},
                       {"n_prompts", conts.size()},
                       {"T", cfg.pipeline.T},
                       {"model_hash", io::sha256_file(cfg.path("model"))}};
    io::write_text_atomic(st.out("continuations"), text);
    io::save_matrix(hidden, st.out("hidden"));
    st.finish({{"continuations", conts.size()}, {"hidden_rows", rows}});
    return "collect: " + std::to_string(conts.size()) + " continuations of T=" + std::to_string(cfg.pipeline.T) +
           ", " + std::to_string(rows) + " hidden states";
}

std::string attribute(const RunConfig& cfg) {
    Stage st(cfg, "attribute");
    const auto lex = load_lexicon(st);
    const auto conts = load_continuations(st);
    const auto records = pipeline::attribute_continuations(conts, lex, cfg.pipeline.delta);
    pipeline::write_records(st.out("records"), records);
    const auto toxic = static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.toxic; }));
    st.finish({{"records", records.size()}, {"toxic", toxic}, {"delta", cfg.pipeline.delta}});
    return "attribute: " + std::to_string(toxic) + " of " + std::to_string(records.size()) +
           " tokens flagged toxic at delta=" + fixed(cfg.pipeline.delta, 3);
}

std::string grads(const RunConfig& cfg) {
    Stage st(cfg, "grads");
    const lm::Model model = load_model(st);
    const auto records = pipeline::read_records(st.in("records"));
    GradientProvenance prov;
    prov.model_hash = io::sha256_file(cfg.path("model"));
    prov.corpus_seed = cfg.corpus.seed;
    prov.delta = cfg.pipeline.delta;
    prov.T = cfg.pipeline.T;
    const auto g = pipeline::build_gradient_matrix(model.head_matrix(), records, prov);
    io::save_gradient_matrix(g, st.out("gradients"));

    const auto real = linalg::truncated_svd(g.rows, 1).singular_values.front();
    const auto controls = pipeline::permutation_control(g, cfg.eval.permutation_controls, derive_seed(cfg.eval.seed, 0x9e));
    auto sorted = controls;
    std::sort(sorted.begin(), sorted.end());
    const double p90 = sorted.empty() ? 0.0 : sorted[static_cast<std::size_t>(0.9 * static_cast<double>(sorted.size() - 1) + 0.5)];
    json summary{{"n_rows", g.n_rows()},
                 {"dim", g.dim()},
                 {"skipped_zero_norm", g.provenance.skipped_zero_norm},
                 {"top_singular_value", real},
                 {"control_top_singular_values", controls},
                 {"control_p90", p90},
                 {"exceeds_control_p90", real > p90}};
    write_json(st.out("grads_summary"), summary);
    st.finish({{"n_rows", g.n_rows()}, {"top_singular_value", real}, {"control_p90", p90}});
    return "grads: " + std::to_string(g.n_rows()) + "x" + std::to_string(g.dim()) + " gradient matrix, sigma1 " +
           fixed(real, 3) + " vs permutation p90 " + fixed(p90, 3);
}

std::string discover(const RunConfig& cfg) {
    Stage st(cfg, "discover");
    const auto g = io::load_gradient_matrix(st.in("gradients"));
    st.in("model");
    const auto d = pipeline::discover_subspace(g, cfg.pipeline.k, discovery_info(cfg));
    io::save_subspace(d.subspace, st.out("subspace"));
    double energy = 0.0;
    for (double s : d.singular_values) energy += s * s;
    const double captured = pipeline::mean_projected_energy(d.subspace.basis, g.rows);
    write_json(st.out("discover_summary"), {{"k", d.subspace.k()},
                                            {"dim", d.subspace.dim()},
                                            {"singular_values", d.singular_values},
                                            {"mean_projected_energy", captured}});
    st.finish({{"k", d.subspace.k()}, {"mean_projected_energy", captured}});
    return "discover: k=" + std::to_string(d.subspace.k()) + " subspace of d=" + std::to_string(d.subspace.dim()) +
           ", sigma1 " + fixed(d.singular_values.front(), 3) + ", captured energy " + fixed(captured, 3);
}

std::string steer_eval(const RunConfig& cfg) {
    Stage st(cfg, "steer-eval");
    const lm::Model model = load_model(st);
    const auto subspace = io::load_subspace(st.in("subspace"));
    const auto prompts = corpus::read_corpus(st.in("prompts_eval"));
    const auto heldout = corpus::read_corpus(st.in("heldout"));
    const auto lex = load_lexicon(st);
    std::optional<steering::GateClassifier> gate;
    if (cfg.steering.mode == steering::Mode::classifier_gated) gate = steering::load_gate(st.in("gate"));
    const auto in = eval_inputs(cfg, prompts, heldout, lex);
    const auto hook = steering::make_decode_hook(cfg.steering, subspace, model.config(), gate ? &*gate : nullptr);
    const auto vanilla = eval::evaluate(model, nullptr, nullptr, in);
    const auto steered = eval::evaluate(model, hook.get(), cfg.steering.to_json(), in);
    const double reduction = vanilla.toxicity > 0.0 ? 1.0 - steered.toxicity / vanilla.toxicity : 0.0;
    const double ppl_increase = steered.perplexity / vanilla.perplexity - 1.0;
    write_json(st.out("steer_eval"), {{"vanilla", vanilla.to_json()},
                                      {"steered", steered.to_json()},
                                      {"toxicity_reduction", reduction},
                                      {"perplexity_increase", ppl_increase},
                                      {"utility_delta", steered.utility - vanilla.utility}});
    st.finish({{"toxicity_reduction", reduction}, {"perplexity_increase", ppl_increase}});
    return "steer-eval: " + std::string(steering::to_string(cfg.steering.mode)) + " beta=" +
           fixed(cfg.steering.beta, 2) + " toxicity " + fixed(vanilla.toxicity, 2) + " -> " +
           fixed(steered.toxicity, 2) + " (" + fixed(100.0 * reduction, 1) + "% lower), perplexity " +
           fixed(vanilla.perplexity, 3) + " -> " + fixed(steered.perplexity, 3);
}

std::string sweep(const RunConfig& cfg) {
    Stage st(cfg, "sweep");
    const lm::Model model = load_model(st);
    const auto subspace = io::load_subspace(st.in("subspace"));
    const auto prompts = corpus::read_corpus(st.in("prompts_eval"));
    const auto heldout = corpus::read_corpus(st.in("heldout"));
    const auto lex = load_lexicon(st);
    const auto grid = eval::run_sweep(model, subspace, cfg.eval.betas, cfg.eval.layers,
                                      eval_inputs(cfg, prompts, heldout, lex));
    io::write_text_atomic(st.out("sweep_csv"), eval::format_sweep_csv(grid));
    st.finish({{"cells", grid.cells.size()}});
    return "sweep: " + std::to_string(grid.layers.size()) + " layers x " + std::to_string(grid.betas.size()) +
           " betas = " + std::to_string(grid.cells.size()) + " cells";
}

std::string strategies(const RunConfig& cfg) {
    Stage st(cfg, "strategies");
    const lm::Model model = load_model(st);
    const auto subspace = io::load_subspace(st.in("subspace"));
    const auto prompts = corpus::read_corpus(st.in("prompts_eval"));
    const auto heldout = corpus::read_corpus(st.in("heldout"));
    const auto lex = load_lexicon(st);
    const auto records = pipeline::read_records(st.in("records"));
    const auto conts = load_continuations(st);
    const std::size_t d = static_cast<std::size_t>(model.config().d_model);

    // positives: states that emitted attributed toxic tokens; negatives: an equal
    // number of states that emitted benign tokens
    std::vector<std::vector<double>> pos, neg;
    for (const auto& r : records) {
        if (r.toxic) pos.push_back(r.hidden);
    }
    std::vector<std::pair<std::size_t, std::size_t>> benign;
    for (std::size_t i = 0; i < conts.size(); ++i) {
        for (std::size_t t = 0; t < conts[i].tokens.size(); ++t) {
            if (lex.is_benign(conts[i].tokens[t])) benign.emplace_back(i, t);
        }
    }
    Rng rng(cfg.eval.gate_seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(benign.begin(), benign.end(), rng);
    for (std::size_t i = 0; i < std::min(pos.size(), benign.size()); ++i) {
        const auto h = conts[benign[i].first].trace.final_hidden.row(benign[i].second);
        neg.emplace_back(h.begin(), h.end());
    }
    auto split = [&](const std::vector<std::vector<double>>& v, bool train) {
        const auto cut = static_cast<std::size_t>(std::llround((1.0 - cfg.eval.gate_holdout) * static_cast<double>(v.size())));
        return train ? std::vector<std::vector<double>>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(cut))
                     : std::vector<std::vector<double>>(v.begin() + static_cast<std::ptrdiff_t>(cut), v.end());
    };
    const auto ptr = stack(split(pos, true), d), ntr = stack(split(neg, true), d);
    const auto pte = stack(split(pos, false), d), nte = stack(split(neg, false), d);
    auto gate = steering::train_gate_classifier(ptr, ntr, cfg.eval.gate);
    const double train_acc = steering::gate_accuracy(gate, ptr, ntr);
    const double test_acc = pte.rows() && nte.rows() ? steering::gate_accuracy(gate, pte, nte) : 0.0;
    steering::save_gate(gate, st.out("gate"));

    steering::SteeringConfig last;
    last.beta = cfg.steering.beta;
    steering::SteeringConfig multi;
    multi.mode = steering::Mode::multi_layer;
    multi.beta = cfg.steering.beta;
    multi.layers = cfg.eval.multi_layers;
    multi.multi_beta_scale = cfg.steering.multi_beta_scale;
    steering::SteeringConfig gated;
    gated.mode = steering::Mode::classifier_gated;
    gated.beta = cfg.eval.gated_beta;
    gated.gate_threshold = cfg.steering.gate_threshold;
    for (auto* c : {&last, &multi, &gated}) c->validate(model.config().n_layers);

    const auto rows = eval::compare_strategies(model, subspace, gate, last, multi, gated,
                                               eval_inputs(cfg, prompts, heldout, lex));
    json table = json::array();
    for (const auto& r : rows) table.push_back({{"strategy", r.name}, {"report", r.report.to_json()}});
    write_json(st.out("strategies"), {{"rows", table},
                                      {"gate", {{"train_accuracy", train_acc},
                                                {"heldout_accuracy", test_acc},
                                                {"n_train", ptr.rows() + ntr.rows()},
                                                {"n_heldout", pte.rows() + nte.rows()}}}});
    io::write_text_atomic(st.out("strategies_table"), eval::format_strategy_table(rows));
    st.finish({{"gate_heldout_accuracy", test_acc}});
    std::string s = "strategies: toxicity";
    for (const auto& r : rows) s += " " + r.name + " " + fixed(r.report.toxicity, 2);
    return s + "; gate held-out accuracy " + fixed(test_acc, 3);
}

std::string theory_check(const RunConfig& cfg) {
    Stage st(cfg, "theory-check");
    const lm::Model model = load_model(st);
    const auto subspace = io::load_subspace(st.in("subspace"));
    const auto g = io::load_gradient_matrix(st.in("gradients"));
    const auto& ev = cfg.eval;
    const double beta = cfg.steering.beta;

    // a wide random head so that Vocab > d makes containment strict
    auto wide = cfg.model;
    wide.vocab_size = ev.theory_vocab;
    const auto w_wide = lm::Model(lm::init_params(wide)).head_matrix();

    theory::TheoryReport rep;
    rep.k = subspace.k();
    rep.beta = beta;
    rep.containment = theory::check_containment(w_wide, subspace.basis, beta, ev.theory_trials, derive_seed(ev.seed, 0x71));
    rep.locality = theory::check_locality(model.head_matrix(), subspace.basis, beta, ev.theory_trials, derive_seed(ev.seed, 0x72));
    rep.stability = theory::subspace_stability(g.rows, ev.noise_levels, ev.stability_trials, subspace.k(), derive_seed(ev.seed, 0x73));
    rep.null_angle = theory::null_model_angle(g.n_rows(), g.dim(), subspace.k(), ev.null_trials, derive_seed(ev.seed, 0x74));
    rep.validate();
    write_json(st.out("theory"), rep.to_json());
    io::write_text_atomic(st.out("theory_table"), rep.table());
    st.finish({{"containment_residual", rep.containment.residual}, {"null_model_angle", rep.null_angle}});
    return "theory-check: containment residual " + sci(rep.containment.residual) + ", rank " +
           std::to_string(rep.containment.rank) + ", witness " + fixed(rep.containment.witness_norm, 4) +
           ", locality residual " + sci(rep.locality.residual) + ", angle at noise " +
           fixed(rep.stability.front().noise, 2) + " " + fixed(rep.stability.front().mean_angle, 4) + " vs null " +
           fixed(rep.null_angle, 4);
}

std::string bench(const RunConfig& cfg) {
    Stage st(cfg, "bench");
    const lm::Model model = load_model(st);
    const auto subspace = io::load_subspace(st.in("subspace"));
    const auto g = io::load_gradient_matrix(st.in("gradients"));
    const auto prompts = corpus::read_corpus(st.in("prompts_eval"));
    steering::SteeringConfig last;
    last.beta = cfg.steering.beta;
    const auto hook = steering::make_decode_hook(last, subspace, model.config());
    const auto null = eval::runtime_overhead(model, nullptr, prompts, cfg.pipeline.T, cfg.eval.timing);
    const auto over = eval::runtime_overhead(model, hook.get(), prompts, cfg.pipeline.T, cfg.eval.timing);

    const std::size_t k = subspace.k();
    const std::size_t k2 = std::min(2 * k, std::min(g.n_rows(), g.dim()));
    const auto doubled = pipeline::discover_subspace(g, k2, discovery_info(cfg)).subspace;
    const auto hook2 = steering::make_decode_hook(last, doubled, model.config());
    const std::size_t d = static_cast<std::size_t>(model.config().d_model);
    const double c1 = eval::hook_cost(*hook, d, cfg.eval.bench_calls);
    const double c2 = eval::hook_cost(*hook2, d, cfg.eval.bench_calls);
    const json out{{"k", k},
                   {"k_doubled", k2},
                   {"T", cfg.pipeline.T},
                   {"overhead", over.to_json()},
                   {"null_overhead", null.to_json()},
                   {"hook_cost_k", c1},
                   {"hook_cost_2k", c2},
                   {"hook_cost_ratio", c2 / c1}};
    write_json(st.out("bench"), out);
    st.finish();
    return "bench: vanilla " + sci(over.vanilla) + " s/token, steered " + sci(over.steered) + " (" +
           fixed(100.0 * over.delta / over.vanilla, 2) + "%), hook cost ratio k=" + std::to_string(k2) + "/k=" +
           std::to_string(k) + " " + fixed(c2 / c1, 2);
}

std::string report(const RunConfig& cfg) {
    Stage st(cfg, "report");
    const auto verified = verify_provenance(cfg);
    const auto grid_bytes = io::read_file(st.in("sweep_csv"));
    const auto grid = eval::parse_sweep_csv(std::string(grid_bytes.begin(), grid_bytes.end()));

    io::write_text_atomic(st.out("sweep_per_beta"),
                          eval::format_aggregates(eval::per_beta(grid, eval::Metric::toxicity), "beta"));
    io::write_text_atomic(st.out("sweep_per_layer"),
                          eval::format_aggregates(eval::per_layer(grid, eval::Metric::toxicity), "layer"));
    io::write_text_atomic(st.out("toxicity_matrix"), eval::format_matrix(grid, eval::Metric::toxicity));
    io::write_text_atomic(st.out("perplexity_matrix"), eval::format_matrix(grid, eval::Metric::perplexity));

    const bool has_zero = std::find(grid.betas.begin(), grid.betas.end(), 0.0) != grid.betas.end();
    const bool has_head = std::find(grid.layers.begin(), grid.layers.end(), kHeadLayer) != grid.layers.end();
    if (!has_zero || !has_head) throw ParameterError("report: the sweep must include beta=0 at the head point (layer -1)");
    const auto& vanilla = grid.at(kHeadLayer, 0.0).report;

    std::ostringstream os;
    os << std::left << std::setw(28) << "row" << std::right << std::setw(10) << "toxicity" << std::setw(12)
       << "perplexity" << std::setw(10) << "utility" << "\n";
    auto row = [&](const std::string& name, const eval::EvalReport& r) {
        os << std::left << std::setw(28) << name << std::right << std::fixed << std::setprecision(2) << std::setw(10)
           << r.toxicity << std::setw(12) << std::setprecision(3) << r.perplexity << std::setw(10)
           << std::setprecision(4) << r.utility << "\n";
    };
    row("vanilla", vanilla);
    for (double b : grid.betas) {
        if (b > 0.0) row("head beta=" + fixed(b, 2), grid.at(kHeadLayer, b).report);
    }

    // the vanilla row must agree with steer-eval's unsteered arm
    std::string consistency = "not checked (no steer-eval)";
    if (fs::exists(cfg.path("steer_eval"))) {
        const auto se = eval::EvalReport::from_json(read_json(st.in("steer_eval")).at("vanilla"));
        if (se.toxicity != vanilla.toxicity || se.perplexity != vanilla.perplexity || se.utility != vanilla.utility) {
            throw DataError("report: sweep vanilla row differs from steer-eval's unsteered report");
        }
        consistency = "matches steer-eval";
    }
    if (fs::exists(cfg.path("strategies_table"))) {
        const auto b = io::read_file(st.in("strategies_table"));
        os << "\n" << std::string(b.begin(), b.end());
    }
    if (fs::exists(cfg.path("theory_table"))) {
        const auto b = io::read_file(st.in("theory_table"));
        os << "\n" << std::string(b.begin(), b.end());
    }
    if (fs::exists(cfg.path("bench"))) {
        const auto b = read_json(st.in("bench"));
        os << "\nsteering overhead " << std::fixed << std::setprecision(2)
           << 100.0 * b.at("overhead").at("relative").get<double>() << "% of vanilla sec/token; hook cost ratio 2k/k "
           << b.at("hook_cost_ratio").get<double>() << "\n";
    }
    os << "\nvanilla row " << consistency << "; provenance verified for " << verified.size() << " stages\n";
    io::write_text_atomic(st.out("summary"), os.str());
    st.finish({{"verified_stages", verified}});
    return "report: " + std::to_string(grid.cells.size()) + " sweep cells, vanilla toxicity " +
           fixed(vanilla.toxicity, 2) + ", provenance verified for " + std::to_string(verified.size()) + " stages";
}

std::vector<std::string> verify_provenance(const RunConfig& cfg) {
    std::map<std::string, json> metas;
    for (const auto& s : stage_names()) {
        const auto p = cfg.workdir / meta_path(s);
        if (fs::exists(p)) metas[s] = read_json(p);
    }
    std::vector<std::string> verified;
    for (const auto& s : stage_names()) {
        if (s == "report" || !metas.contains(s)) continue;
        const auto& meta = metas.at(s);
        for (const auto& [key, entry] : meta.at("outputs").items()) {
            const auto p = cfg.workdir / entry.at("path").get<std::string>();
            if (hex_or_empty(p) != entry.at("sha256").get<std::string>()) {
                throw DataError("provenance: " + entry.at("path").get<std::string>() + " changed since `" + s +
                                "` wrote it");
            }
        }
        for (const auto& [key, entry] : meta.at("inputs").items()) {
            const auto prod = producer_of(key);
            if (prod.empty() || prod == s) continue;
            if (!metas.contains(prod)) throw DataError("provenance: `" + s + "` input " + key + " has no `" + prod + "` record");
            const auto& outs = metas.at(prod).at("outputs");
            if (!outs.contains(key) || outs.at(key).at("sha256") != entry.at("sha256")) {
                throw DataError("provenance: `" + s + "` consumed a different " + entry.at("path").get<std::string>() +
                                " than `" + prod + "` last wrote; rerun `" + s + "`");
            }
        }
        verified.push_back(s);
    }
    return verified;
}

std::string run_stage(const std::string& name, const RunConfig& cfg) {
    using Fn = std::string (*)(const RunConfig&);
    static const std::map<std::string, Fn> table{
        {"gen-corpus", gen_corpus}, {"train-lm", train_lm},     {"collect", collect},
        {"attribute", attribute},   {"grads", grads},           {"discover", discover},
        {"steer-eval", steer_eval}, {"sweep", sweep},           {"strategies", strategies},
        {"theory-check", theory_check}, {"bench", bench},       {"report", report},
    };
    const auto it = table.find(name);
    if (it == table.end()) throw UsageError("unknown subcommand '" + name + "'");
    fs::create_directories(cfg.workdir);
    WorkdirLock lock(cfg.workdir);
    return it->second(cfg);
}

WorkdirLock::WorkdirLock(const fs::path& workdir) {
    const auto p = workdir / ".lock";
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw UsageError("cannot open lock file " + p.string() + ": " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw UsageError("workdir " + workdir.string() + " is locked by another invocation");
    }
}

WorkdirLock::~WorkdirLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

} // namespace substeer::workflow
