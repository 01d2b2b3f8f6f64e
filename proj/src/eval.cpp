#include "substeer/eval.hpp"

#include "substeer/error.hpp"
#include "substeer/pipeline.hpp"
#include "substeer/rng.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace substeer::eval {

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
    if (v.empty()) throw InternalError("median of an empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Linear interpolation between order statistics.
double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string fmt_double(double x) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, std::size_t line) {
    double x = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw DataError("sweep csv line " + std::to_string(line) + ": bad number '" + s + "'");
    }
    return x;
}

template <typename I>
I parse_int(const std::string& s, std::size_t line) {
    I x{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw DataError("sweep csv line " + std::to_string(line) + ": bad integer '" + s + "'");
    }
    return x;
}

double timed_pass(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                  std::size_t T, std::size_t n_prompts) {
    Clock::duration total{};
    std::size_t tokens = 0;
    for (std::size_t p = 0; p < n_prompts; ++p) {
        const auto& prompt = prompts[p];
        lm::DecodeSession session(model);
        for (std::size_t i = 0; i + 1 < prompt.size(); ++i) session.step(prompt[i]);
        auto argmax = [](std::span<const double> l) {
            return static_cast<corpus::Token>(std::max_element(l.begin(), l.end()) - l.begin());
        };
        corpus::Token next = argmax(session.step(prompt.back(), hook));
        const auto t0 = Clock::now();
        for (std::size_t i = 1; i < T; ++i) next = argmax(session.step(next, hook));
        total += Clock::now() - t0;
        tokens += T - 1;
    }
    return std::chrono::duration<double>(total).count() / static_cast<double>(tokens);
}

void check_timing_args(const std::vector<Sequence>& prompts, std::size_t T, const TimingOptions& o) {
    if (T < 2) throw ParameterError("timing: T must be at least 2 (the first token is excluded)");
    if (prompts.empty()) throw ParameterError("timing: no prompts");
    if (o.repetitions < 1 || o.max_prompts < 1) throw ParameterError("timing: repetitions and max_prompts must be positive");
}

} // namespace

ToxicityStats toxicity_stats(const lm::Model& model, const lm::HiddenStateHook* hook,
                             const std::vector<Sequence>& prompts, const corpus::Lexicon& lex, std::size_t T,
                             const lm::DecodeConfig& decode) {
    if (prompts.empty()) throw ParameterError("eval_toxicity: no prompts");
    ToxicityStats s;
    s.n_prompts = prompts.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto y = lm::generate(model, prompts[i], T, hook, pipeline::prompt_decode(decode, i));
        acc += corpus::toxicity_score(y, lex);
        s.toxic_tokens += static_cast<std::size_t>(std::count_if(y.begin(), y.end(), [&](auto t) { return lex.is_toxic(t); }));
    }
    s.percent = 100.0 * acc / static_cast<double>(prompts.size());
    return s;
}

double eval_toxicity(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                     const corpus::Lexicon& lex, std::size_t T, const lm::DecodeConfig& decode) {
    return toxicity_stats(model, hook, prompts, lex, T, decode).percent;
}

double utility_proxy(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& corpus) {
    if (corpus.empty()) throw ParameterError("utility_proxy: empty corpus");
    std::size_t hits = 0, total = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        const auto res = model.forward(seq, hook, false);
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            const auto row = res.logits.row(t);
            const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
            hits += pred == seq[t + 1];
            ++total;
        }
    }
    if (total == 0) throw ParameterError("utility_proxy: corpus has no next-token positions");
    return static_cast<double>(hits) / static_cast<double>(total);
}

double sec_per_token(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                     std::size_t T, const TimingOptions& options) {
    check_timing_args(prompts, T, options);
    const std::size_t n = std::min(prompts.size(), options.max_prompts);
    for (std::size_t w = 0; w < options.warmup; ++w) timed_pass(model, hook, prompts, T, n);
    std::vector<double> reps;
    for (std::size_t r = 0; r < options.repetitions; ++r) reps.push_back(timed_pass(model, hook, prompts, T, n));
    return median(reps);
}

nlohmann::json Overhead::to_json() const {
    return {{"vanilla_sec_per_token", vanilla},
            {"steered_sec_per_token", steered},
            {"delta", delta},
            {"relative", vanilla > 0.0 ? delta / vanilla : 0.0},
            {"noise_floor", noise_floor}};
}

Overhead runtime_overhead(const lm::Model& model, const lm::HiddenStateHook* hook, const std::vector<Sequence>& prompts,
                          std::size_t T, const TimingOptions& options) {
    check_timing_args(prompts, T, options);
    const std::size_t n = std::min(prompts.size(), options.max_prompts);
    for (std::size_t w = 0; w < options.warmup; ++w) {
        timed_pass(model, nullptr, prompts, T, n);
        timed_pass(model, hook, prompts, T, n);
    }
    std::vector<double> vanilla, steered, noise;
    for (std::size_t r = 0; r < options.repetitions; ++r) {
        const double a = timed_pass(model, nullptr, prompts, T, n);
        const double b = timed_pass(model, hook, prompts, T, n);
        const double c = timed_pass(model, nullptr, prompts, T, n);
        vanilla.push_back(0.5 * (a + c));
        steered.push_back(b);
        noise.push_back(std::abs(a - c));
    }
    Overhead o;
    o.vanilla = median(vanilla);
    o.steered = median(steered);
    o.delta = o.steered - o.vanilla;
    o.noise_floor = median(noise);
    return o;
}

double hook_cost(const lm::HiddenStateHook& hook, std::size_t dim, std::size_t calls, std::size_t repetitions) {
    if (calls == 0 || repetitions == 0) throw ParameterError("hook_cost: calls and repetitions must be positive");
    Rng rng(derive_seed(0x7111e, dim));
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> base(dim), h(dim);
    for (double& x : base) x = n01(rng);
    std::vector<double> reps;
    double sink = 0.0;
    for (std::size_t r = 0; r < repetitions + 1; ++r) {
        const auto t0 = Clock::now();
        for (std::size_t c = 0; c < calls; ++c) {
            std::copy(base.begin(), base.end(), h.begin());
            hook.apply(kHeadLayer, h);
            sink += h[c % dim];
        }
        const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
        if (r > 0) reps.push_back(dt / static_cast<double>(calls));  // first repetition warms up
    }
    volatile double keep = sink;
    (void)keep;
    return median(reps);
}

void EvalReport::validate() const {
    if (!(toxicity >= 0.0 && toxicity <= 100.0)) throw InternalError("eval report: toxicity outside [0, 100]");
    if (!(perplexity >= 1.0)) throw InternalError("eval report: perplexity below 1");
    if (!(sec_per_token > 0.0)) throw InternalError("eval report: sec_per_token must be positive");
}

nlohmann::json EvalReport::to_json() const {
    return {{"toxicity", toxicity},       {"perplexity", perplexity}, {"utility", utility},
            {"sec_per_token", sec_per_token}, {"n_prompts", n_prompts}, {"T", T},
            {"steering", steering},       {"seed", seed},             {"toxic_tokens", toxic_tokens}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        r.toxicity = j.at("toxicity").get<double>();
        r.perplexity = j.at("perplexity").get<double>();
        r.utility = j.at("utility").get<double>();
        r.sec_per_token = j.at("sec_per_token").get<double>();
        r.n_prompts = j.at("n_prompts").get<std::size_t>();
        r.T = j.at("T").get<std::size_t>();
        r.steering = j.at("steering");
        r.seed = j.at("seed").get<std::uint64_t>();
        r.toxic_tokens = j.value("toxic_tokens", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("eval report: ") + e.what());
    }
    return r;
}

EvalReport evaluate(const lm::Model& model, const lm::HiddenStateHook* hook, const nlohmann::json& steering,
                    const EvalInputs& in) {
    if (!in.prompts || !in.heldout) throw ParameterError("evaluate: prompts and held-out corpus are required");
    EvalReport r;
    const auto tox = toxicity_stats(model, hook, *in.prompts, in.lexicon, in.T, in.decode);
    r.toxicity = tox.percent;
    r.toxic_tokens = tox.toxic_tokens;
    r.perplexity = lm::perplexity(model, *in.heldout, hook);
    r.utility = utility_proxy(model, hook, *in.heldout);
    r.sec_per_token = sec_per_token(model, hook, *in.prompts, in.T, in.timing);
    r.n_prompts = in.prompts->size();
    r.T = in.T;
    r.steering = steering;
    r.seed = in.decode.seed;
    r.validate();
    return r;
}

steering::SteeringConfig cell_config(int layer, double beta) {
    steering::SteeringConfig c;
    c.beta = beta;
    if (layer != kHeadLayer) {
        c.mode = steering::Mode::multi_layer;
        c.layers = {layer};
        c.multi_beta_scale = 1.0;
    }
    return c;
}

const SweepCell& SweepGrid::at(int layer, double beta) const {
    for (const auto& c : cells) {
        if (c.layer == layer && c.beta == beta) return c;
    }
    throw InternalError("sweep grid: missing cell layer=" + std::to_string(layer) + " beta=" + fmt_double(beta));
}

void SweepGrid::check_complete() const {
    if (cells.size() != betas.size() * layers.size()) {
        throw InternalError("sweep grid: " + std::to_string(cells.size()) + " cells for a " +
                            std::to_string(layers.size()) + "x" + std::to_string(betas.size()) + " grid");
    }
    for (int l : layers) {
        for (double b : betas) at(l, b);
    }
}

std::vector<double> default_betas() {
    std::vector<double> b;
    for (int i = 0; i <= 10; ++i) b.push_back(i / 10.0);
    return b;
}

std::vector<int> default_layers(int n_layers) {
    std::vector<int> l;
    for (int i = 0; i < n_layers; ++i) l.push_back(i);
    l.push_back(kHeadLayer);
    return l;
}

SweepGrid run_sweep(const lm::Model& model, const ToxicSubspace& subspace, const std::vector<double>& betas,
                    const std::vector<int>& layers, const EvalInputs& in) {
    if (betas.empty() || layers.empty()) throw ParameterError("sweep: beta and layer grids must be nonempty");
    SweepGrid grid{betas, layers, {}};
    for (int layer : layers) {
        for (double beta : betas) {
            const auto cfg = cell_config(layer, beta);
            const auto hook = steering::make_decode_hook(cfg, subspace, model.config());
            grid.cells.push_back({layer, beta, evaluate(model, hook.get(), cfg.to_json(), in)});
        }
    }
    grid.check_complete();
    return grid;
}

std::string format_sweep_csv(const SweepGrid& grid) {
    std::string out = std::string(kSweepHeader) + "\n";
    for (const auto& c : grid.cells) {
        const auto& r = c.report;
        out += std::to_string(c.layer) + "," + fmt_double(c.beta) + "," + fmt_double(r.toxicity) + "," +
               fmt_double(r.perplexity) + "," + fmt_double(r.utility) + "," + fmt_double(r.sec_per_token) + "," +
               std::to_string(r.n_prompts) + "," + std::to_string(r.seed) + "\n";
    }
    return out;
}

SweepGrid parse_sweep_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kSweepHeader) throw DataError("sweep csv: missing or wrong header");
    SweepGrid grid;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 8) throw DataError("sweep csv line " + std::to_string(lineno) + ": expected 8 fields");
        SweepCell c;
        c.layer = parse_int<int>(f[0], lineno);
        c.beta = parse_double(f[1], lineno);
        c.report.toxicity = parse_double(f[2], lineno);
        c.report.perplexity = parse_double(f[3], lineno);
        c.report.utility = parse_double(f[4], lineno);
        c.report.sec_per_token = parse_double(f[5], lineno);
        c.report.n_prompts = parse_int<std::size_t>(f[6], lineno);
        c.report.seed = parse_int<std::uint64_t>(f[7], lineno);
        if (std::find(grid.layers.begin(), grid.layers.end(), c.layer) == grid.layers.end()) grid.layers.push_back(c.layer);
        if (std::find(grid.betas.begin(), grid.betas.end(), c.beta) == grid.betas.end()) grid.betas.push_back(c.beta);
        grid.cells.push_back(std::move(c));
    }
    try {
        grid.check_complete();
    } catch (const InternalError& e) {
        throw DataError(std::string("sweep csv: incomplete grid: ") + e.what());
    }
    return grid;
}

const char* to_string(Metric m) noexcept {
    switch (m) {
        case Metric::toxicity: return "toxicity";
        case Metric::perplexity: return "perplexity";
        case Metric::utility: return "utility";
    }
    return "unknown";
}

namespace {

double metric_of(const EvalReport& r, Metric m) {
    switch (m) {
        case Metric::toxicity: return r.toxicity;
        case Metric::perplexity: return r.perplexity;
        case Metric::utility: return r.utility;
    }
    return 0.0;
}

Aggregate summarize(double key, const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {key, mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

} // namespace

std::vector<Aggregate> per_beta(const SweepGrid& grid, Metric metric) {
    std::vector<Aggregate> out;
    for (double b : grid.betas) {
        std::vector<double> xs;
        for (int l : grid.layers) xs.push_back(metric_of(grid.at(l, b).report, metric));
        out.push_back(summarize(b, xs));
    }
    return out;
}

std::vector<Aggregate> per_layer(const SweepGrid& grid, Metric metric) {
    std::vector<Aggregate> out;
    for (int l : grid.layers) {
        std::vector<double> xs;
        for (double b : grid.betas) xs.push_back(metric_of(grid.at(l, b).report, metric));
        out.push_back(summarize(static_cast<double>(l), xs));
    }
    return out;
}

std::string format_aggregates(const std::vector<Aggregate>& rows, const std::string& key_name) {
    std::string out = key_name + ",mean,std\n";
    for (const auto& r : rows) out += fmt_double(r.key) + "," + fmt_double(r.mean) + "," + fmt_double(r.std) + "\n";
    return out;
}

std::string format_matrix(const SweepGrid& grid, Metric metric) {
    grid.check_complete();
    std::vector<double> all;
    for (const auto& c : grid.cells) all.push_back(metric_of(c.report, metric));
    std::string out = "# rows=layers cols=betas p10=" + fmt_double(percentile(all, 0.10)) +
                      " p90=" + fmt_double(percentile(all, 0.90)) + "\n";
    for (int l : grid.layers) {
        for (std::size_t j = 0; j < grid.betas.size(); ++j) {
            if (j) out += ' ';
            out += fmt_double(metric_of(grid.at(l, grid.betas[j]).report, metric));
        }
        out += '\n';
    }
    return out;
}

std::vector<StrategyRow> compare_strategies(const lm::Model& model, const ToxicSubspace& subspace,
                                            const steering::GateClassifier& gate, const steering::SteeringConfig& last,
                                            const steering::SteeringConfig& multi,
                                            const steering::SteeringConfig& gated, const EvalInputs& in) {
    std::vector<StrategyRow> rows;
    rows.push_back({"vanilla", evaluate(model, nullptr, nullptr, in)});
    for (const auto* cfg : {&last, &multi, &gated}) {
        const auto hook = steering::make_decode_hook(*cfg, subspace, model.config(), &gate);
        rows.push_back({steering::to_string(cfg->mode), evaluate(model, hook.get(), cfg->to_json(), in)});
    }
    return rows;
}

std::string format_strategy_table(const std::vector<StrategyRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "strategy" << std::right << std::setw(10) << "toxicity" << std::setw(12)
       << "perplexity" << std::setw(10) << "utility" << std::setw(14) << "sec/token" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(18) << r.name << std::right << std::fixed << std::setprecision(2) << std::setw(10)
           << r.report.toxicity << std::setw(12) << r.report.perplexity << std::setprecision(4) << std::setw(10)
           << r.report.utility << std::scientific << std::setprecision(3) << std::setw(14) << r.report.sec_per_token
           << std::defaultfloat << "\n";
    }
    return os.str();
}

} // namespace substeer::eval
