// Acceptance run: one PASS/FAIL line per criterion, then a few additional
// measurements. Exits 0 after reporting unless --strict is given, in which
// case any FAIL makes the exit code 1.

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "substeer/pipeline.hpp"
#include "substeer/theory.hpp"
#include "substeer/workflow.hpp"

#include "oracles/jacobi_eigen.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <random>
#include <regex>
#include <set>
#include <map>
#include <sstream>
#include <sys/resource.h>

using namespace substeer;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void line(bool ok, const std::string& name, const std::string& detail) {
    if (!ok) ++failures;
    std::cout << (ok ? "PASS " : "FAIL ") << std::left << std::setw(28) << name << detail << std::endl;
}

void info(bool ok, const std::string& name, const std::string& detail) {
    std::cout << (ok ? "  ok   " : "  miss ") << std::left << std::setw(28) << name << detail << std::endl;
}

std::string num(double x, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << x;
    return os.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double cpu_seconds() {
    rusage u{};
    getrusage(RUSAGE_SELF, &u);
    return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
           1e-6 * static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = n01(rng);
    return v;
}

linalg::SubspaceBasis random_basis(std::size_t d, std::size_t k, std::mt19937_64& rng) {
    std::vector<std::vector<double>> vs;
    for (std::size_t i = 0; i < k; ++i) vs.push_back(gaussian(d, rng));
    return linalg::orthonormalize(vs);
}

Eigen::MatrixXd basis_matrix(const linalg::SubspaceBasis& b) {
    Eigen::MatrixXd v(b.dim(), b.k());
    for (std::size_t i = 0; i < b.k(); ++i) {
        for (std::size_t j = 0; j < b.dim(); ++j) v(j, i) = b.vector(i)[j];
    }
    return v;
}

Eigen::MatrixXd to_eigen(const linalg::Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
    }
    return e;
}

double rel(const std::vector<double>& a, const std::vector<double>& b, double scale) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m / std::max(scale, 1e-300);
}

std::string slurp(const fs::path& p) {
    const auto b = io::read_file(p);
    return {b.begin(), b.end()};
}

// ---------------------------------------------------------------------------

void projector_suite() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double idem = 0.0, sym = 0.0, contraction = 0.0, ident = 0.0, annihil = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t d = 4 + static_cast<std::size_t>(t % 61);
        const std::size_t k = 1 + static_cast<std::size_t>(t * 7) % d;
        const auto b = random_basis(d, k, rng);
        const auto h = gaussian(d, rng), x = gaussian(d, rng);
        const double hn = linalg::norm2(h);
        const double beta = u01(rng);
        const auto p = linalg::project_onto(h, b);
        idem = std::max(idem, rel(linalg::project_onto(p, b), p, hn));
        const double a1 = linalg::dot(x, linalg::project_onto(h, b)), a2 = linalg::dot(linalg::project_onto(x, b), h);
        sym = std::max(sym, std::abs(a1 - a2) / (hn * linalg::norm2(x)));
        contraction = std::max(contraction, linalg::norm2(linalg::project_out(h, b, beta)) / hn - 1.0);
        ident = std::max(ident, rel(linalg::project_out(h, b, 0.0), h, hn));
        const auto full = random_basis(d, d, rng);
        annihil = std::max(annihil, linalg::norm2(linalg::project_out(h, full, 1.0)) / hn);
    }
    const double secs = seconds_since(t0);
    const bool ok = idem <= 1e-10 && sym <= 1e-10 && contraction <= 1e-10 && ident == 0.0 && annihil <= 1e-10 && secs < 5.0;
    line(ok, "projector-algebra",
         "idempotence " + num(idem) + ", symmetry " + num(sym) + ", contraction excess " + num(contraction) +
             ", beta=0 " + num(ident) + ", annihilation " + num(annihil) + " (1000 trials each, " + num(secs, 3) + " s)");
}

void svd_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(202);
    std::uniform_int_distribution<std::size_t> rows(2, 32), cols(2, 24);
    double worst_sv = 0.0, worst_angle = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = rows(rng), n = cols(rng), r = std::min(m, n);
        linalg::Matrix a(m, n, gaussian(m * n, rng));
        const std::size_t k = 1 + static_cast<std::size_t>(t) % std::max<std::size_t>(1, r - 1);
        const auto lib = linalg::truncated_svd(a, k);
        const auto ref = oracle::svd_via_gram(a.data(), m, n);
        for (std::size_t i = 0; i < k; ++i) worst_sv = std::max(worst_sv, std::abs(lib.singular_values[i] - ref.values[i]));
        Eigen::MatrixXd vo(n, k);
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < n; ++j) vo(j, i) = ref.vectors[i][j];
        }
        // sines of the principal angles: the part of the library basis outside span(oracle)
        const Eigen::MatrixXd l = basis_matrix(lib.basis);
        const Eigen::MatrixXd q = vo.householderQr().householderQ() * Eigen::MatrixXd::Identity(n, k);
        const Eigen::MatrixXd out = l - q * (q.transpose() * l);
        worst_angle = std::max(worst_angle, std::asin(std::min(1.0, out.jacobiSvd().singularValues()(0))));
    }
    const double secs = seconds_since(t0);
    line(worst_sv <= 1e-10 && worst_angle <= 1e-8 && secs < 10.0, "svd-oracle",
         "50 matrices up to 32x24: max singular value error " + num(worst_sv) + ", max principal angle " +
             num(worst_angle) + " rad (" + num(secs, 3) + " s)");
}

void gradient_fd() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(303);
    const std::size_t vocab = 64, d = 64;
    linalg::Matrix w(vocab, d, gaussian(vocab * d, rng));
    for (double& x : w.data()) x *= 0.3;
    const Eigen::MatrixXd W = to_eigen(w);
    auto logprob = [&](const Eigen::VectorXd& h, Eigen::Index y) {
        const Eigen::VectorXd z = W * h;
        const double mx = z.maxCoeff();
        return z(y) - mx - std::log((z.array() - mx).exp().sum());
    };
    double worst = 0.0;
    std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
    for (int t = 0; t < 100; ++t) {
        const auto h = gaussian(d, rng);
        const int y = tok(rng);
        const auto g = lm::grad_logprob_wrt_hidden(w, h, y);
        Eigen::VectorXd he = Eigen::Map<const Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(d));
        for (std::size_t j = 0; j < d; ++j) {
            Eigen::VectorXd hp = he, hm = he;
            hp(static_cast<Eigen::Index>(j)) += 1e-5;
            hm(static_cast<Eigen::Index>(j)) -= 1e-5;
            const double fd = (logprob(hp, y) - logprob(hm, y)) / 2e-5;
            worst = std::max(worst, std::abs(fd - g[j]));
        }
    }
    const double secs = seconds_since(t0);
    line(worst <= 1e-7 && secs < 5.0, "gradient-fd",
         "100 (h, y) pairs, step 1e-5: max abs error " + num(worst) + " (" + num(secs, 3) + " s)");
}

void locality(const lm::Model& model, const ToxicSubspace& sub, double beta) {
    std::mt19937_64 rng(404);
    const Eigen::MatrixXd W = to_eigen(model.head_matrix());
    const Eigen::MatrixXd V = basis_matrix(sub.basis);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const auto g = gaussian(sub.dim(), rng);
        Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
        h -= V * (V.transpose() * h);
        const std::vector<double> hv(h.data(), h.data() + h.size());
        const auto steered = linalg::project_out(hv, sub.basis, beta);
        const Eigen::VectorXd a = W * Eigen::Map<const Eigen::VectorXd>(steered.data(), h.size());
        worst = std::max(worst, (a - W * h).cwiseAbs().maxCoeff());
    }
    line(worst <= 1e-9, "locality", "trained W0, discovered k=" + std::to_string(sub.k()) +
                                        " subspace, 1000 complement samples: max logit residual " + num(worst));
}

void containment(const RunConfig& cfg, const ToxicSubspace& sub, double beta) {
    auto wide = cfg.model;
    wide.vocab_size = 256;
    const auto w0 = lm::Model(lm::init_params(wide)).head_matrix();
    const Eigen::MatrixXd W = to_eigen(w0);
    const Eigen::MatrixXd V = basis_matrix(sub.basis);
    const Eigen::MatrixXd A = -beta * V * V.transpose();
    const Eigen::MatrixXd WA = W * A;
    std::mt19937_64 rng(505);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const auto g = gaussian(64, rng);
        const Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(g.data(), 64);
        const auto steered = linalg::project_out(g, sub.basis, beta);
        const Eigen::VectorXd lhs = W * Eigen::Map<const Eigen::VectorXd>(steered.data(), 64);
        const Eigen::VectorXd rhs = W * h + WA * h;
        worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
    }
    const Eigen::VectorXd s = WA.jacobiSvd().singularValues();
    const auto rank = (s.array() > 1e-8).count();
    // witness: u from the left null space of W0, dW = u x^T, least-squares A*
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(W);
    const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(256, 256);
    const Eigen::VectorXd u = Q.col(200);
    const auto xs = gaussian(64, rng);
    const Eigen::MatrixXd dW = u * Eigen::Map<const Eigen::VectorXd>(xs.data(), 64).transpose();
    const Eigen::MatrixXd Astar = W.colPivHouseholderQr().solve(dW);
    const double witness = (dW - W * Astar).norm() / dW.norm();
    const auto lib = theory::check_containment(w0, sub.basis, beta, 1000, 7);
    const bool ok = worst <= 1e-9 && rank <= 64 && witness > 0.99 && lib.residual <= 1e-9 && lib.witness_norm > 0.99 &&
                    lib.rank == static_cast<std::size_t>(rank);
    line(ok, "containment",
         "Vocab=256, d=64, 1000 trials: identity residual " + num(worst) + " (library " + num(lib.residual) +
             "), rank(W0 A) " + std::to_string(rank) + " <= 64, witness norm " + num(witness, 6) + " (library " +
             num(lib.witness_norm, 6) + ")");
}

void attribution_fixtures() {
    const auto lex = corpus::Lexicon::defaults();
    const double eps = std::numeric_limits<double>::epsilon();
    auto closed = [&](const corpus::Sequence& y, std::size_t t) {
        double prod = 1.0;
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (j != t) prod *= 1.0 - lex.weight(y[j]);
        }
        return lex.weight(y[t]) * prod;
    };
    double worst = 0.0;
    bool flags_ok = true;
    corpus::Token w08 = -1;
    for (auto t : lex.toxic_ids) {
        if (lex.weight(t) == 0.8) w08 = t;
    }
    const auto b = lex.benign_ids();
    struct Case {
        corpus::Sequence y;
        double delta;
        std::vector<bool> flags;
    };
    const std::vector<Case> cases{
        {{b[0], b[1], b[2], b[3]}, 0.1, {false, false, false, false}},
        {{b[0], w08, b[1]}, 0.5, {false, true, false}},
        {{b[0], w08, b[1], w08}, 0.5, {false, false, false, false}},
    };
    for (const auto& c : cases) {
        const auto r = pipeline::attribute_tokens(c.y, lex, c.delta);
        for (std::size_t t = 0; t < c.y.size(); ++t) {
            worst = std::max(worst, std::abs(r[t].drop - closed(c.y, t)));
            flags_ok = flags_ok && r[t].toxic == c.flags[t];
        }
    }
    const auto pair = pipeline::attribute_tokens(cases[2].y, lex, 0.5);
    line(w08 >= 0 && flags_ok && worst <= 4 * eps, "attribution-fixtures",
         "all-benign, single w=0.8 (drop " + num(pipeline::attribute_tokens(cases[1].y, lex, 0.5)[1].drop, 17) +
             "), two redundant w=0.8 (drops " + num(pair[1].drop, 17) + ", none flagged): max |drop - closed form| " +
             num(worst) + " (" + num(worst / eps, 3) + " eps)");
}

// ---------------------------------------------------------------------------

struct Chain {
    RunConfig cfg;
    double cpu = 0.0;
    double wall = 0.0;
};

Chain run_chain(const fs::path& dir) {
    fs::remove_all(dir);
    Chain c{RunConfig::from_json(json::object())};
    c.cfg.workdir = dir;
    const double cpu0 = cpu_seconds();
    const auto t0 = Clock::now();
    for (const auto& s : workflow::stage_names()) std::cerr << workflow::run_stage(s, c.cfg) << std::endl;
    c.cpu = cpu_seconds() - cpu0;
    c.wall = seconds_since(t0);
    return c;
}

void end_to_end(const Chain& ch) {
    const auto& cfg = ch.cfg;
    const auto se = json::parse(slurp(cfg.path("steer_eval")));
    const auto van = eval::EvalReport::from_json(se.at("vanilla"));
    const auto st = eval::EvalReport::from_json(se.at("steered"));
    const double red = 1.0 - st.toxicity / van.toxicity;
    const double ppl = st.perplexity / van.perplexity - 1.0;

    // rescore the vanilla arm with a test-side noisy-or
    const lm::Model model(lm::load_checkpoint(cfg.path("model")));
    const auto prompts = corpus::read_corpus(cfg.path("prompts_eval"));
    const auto lex = corpus::Lexicon::defaults();
    double acc = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        lm::DecodeConfig dc = cfg.pipeline.decode;
        dc.seed = cfg.eval.seed;
        const auto y = lm::generate(model, prompts[i], cfg.pipeline.T, nullptr, pipeline::prompt_decode(dc, i));
        double keep = 1.0;
        for (auto t : y) keep *= 1.0 - lex.weight(t);
        acc += 1.0 - keep;
    }
    const double rescored = 100.0 * acc / static_cast<double>(prompts.size());
    const bool ok = red >= 0.20 && ppl <= 0.25 && ch.cpu <= 600.0 && std::abs(rescored - van.toxicity) <= 1e-9;
    line(ok, "end-to-end",
         "last-layer beta=0.5: toxicity " + num(van.toxicity) + " -> " + num(st.toxicity) + " (" + num(100 * red, 3) +
             "% lower, need >= 20%), perplexity " + num(van.perplexity) + " -> " + num(st.perplexity) + " (+" +
             num(100 * ppl, 3) + "%, need <= 25%), full chain " + num(ch.cpu / 60.0, 3) +
             " CPU-min (need <= 10), rescored vanilla " + num(rescored));
}

void sweep_shape(const Chain& ch) {
    const auto grid = eval::parse_sweep_csv(slurp(ch.cfg.path("sweep_csv")));
    std::vector<double> tox;
    for (int i = 0; i <= 10; i += 2) tox.push_back(grid.at(kHeadLayer, i / 10.0).report.toxicity);
    int rises = 0;
    double worst_rise = 0.0;
    for (std::size_t i = 1; i < tox.size(); ++i) {
        if (tox[i] > tox[i - 1]) {
            ++rises;
            worst_rise = std::max(worst_rise, tox[i] - tox[i - 1]);
        }
    }
    std::string series;
    for (double t : tox) series += (series.empty() ? "" : " ") + num(t);
    line(rises == 0 || (rises == 1 && worst_rise < 1.0), "head-monotone-in-beta",
         "head toxicity at beta 0,0.2,...,1: " + series + " (" + std::to_string(rises) + " rises, largest " +
             num(worst_rise) + " points)");

    const double v = grid.at(kHeadLayer, 0.0).report.toxicity;
    const double head = v - grid.at(kHeadLayer, 0.8).report.toxicity;
    const double first = v - grid.at(0, 0.8).report.toxicity;
    line(head > first, "head-largest-reduction",
         "reduction at beta=0.8: head " + num(head) + " points vs block 0 " + num(first) + " points");
}

void strategies(const Chain& ch) {
    const auto j = json::parse(slurp(ch.cfg.path("strategies")));
    std::map<std::string, eval::EvalReport> r;
    for (const auto& row : j.at("rows")) r[row.at("strategy")] = eval::EvalReport::from_json(row.at("report"));
    const auto& van = r.at("vanilla");
    const auto& last = r.at("last_layer");
    const auto& multi = r.at("multi_layer");
    const auto& gated = r.at("classifier_gated");
    const bool beat = last.toxicity < van.toxicity && multi.toxicity < van.toxicity && gated.toxicity < van.toxicity;
    const bool gate_ok = gated.toxicity <= last.toxicity + 2.0;
    const bool soft = multi.perplexity <= last.perplexity;
    line(beat && gate_ok, "strategy-comparison",
         "toxicity vanilla " + num(van.toxicity) + ", last " + num(last.toxicity) + ", multi " + num(multi.toxicity) +
             ", gated " + num(gated.toxicity) + "; gated <= last + 2: " + (gate_ok ? "yes" : "no") +
             "; soft (not gating): multi perplexity " + num(multi.perplexity) + " <= last " + num(last.perplexity) +
             ": " + (soft ? "pass" : "fail"));
}

void utility(const Chain& ch) {
    const auto se = json::parse(slurp(ch.cfg.path("steer_eval")));
    const double van = se.at("vanilla").at("utility"), st = se.at("steered").at("utility");
    line(std::abs(st - van) <= 0.03, "utility-proxy",
         "next-token accuracy " + num(van) + " -> " + num(st) + " at beta=0.5 last-layer (|delta| " +
             num(std::abs(st - van)) + ", need <= 0.03)");
}

void runtime(const Chain& ch) {
    const auto b = json::parse(slurp(ch.cfg.path("bench")));
    const double relv = b.at("overhead").at("relative");
    const double ratio = b.at("hook_cost_ratio");
    const auto& o = b.at("overhead");
    line(relv <= 0.10 && ratio >= 1.0 && ratio <= 4.0, "runtime-overhead",
         "k=8, d=64: vanilla " + num(o.at("vanilla_sec_per_token").get<double>()) + " s/token, steered " +
             num(o.at("steered_sec_per_token").get<double>()) + " (" + num(100 * relv, 3) + "%, need <= 10%; noise floor " +
             num(o.at("noise_floor").get<double>()) + " s); projection cost k=16 over k=8 " + num(ratio, 3) +
             " (need 2x within a 2x band)");
}

void stability(const Chain& ch) {
    const auto t = json::parse(slurp(ch.cfg.path("theory")));
    const double a = t.at("stability").at(0).at("mean_angle");
    const double eps = t.at("stability").at(0).at("noise");
    const double null = t.at("null_model_angle");
    line(eps == 0.01 && a < 0.2 && null > 0.5, "spectral-stability",
         "mean principal angle at noise 0.01 " + num(a) + " rad (need < 0.2), i.i.d. null model " + num(null) +
             " rad (need > 0.5)");
}

// Files carrying wall-clock timings are compared with those fields removed.
const std::set<std::string> kTimed{"steer_eval", "sweep_csv", "strategies", "strategies_table", "bench", "summary"};

void strip_timing(json& j) {
    if (j.is_object()) {
        for (const auto* k : {"sec_per_token", "vanilla_sec_per_token", "steered_sec_per_token", "delta", "relative",
                              "noise_floor", "hook_cost_k", "hook_cost_2k", "hook_cost_ratio"}) {
            j.erase(k);
        }
        for (auto& [k, v] : j.items()) strip_timing(v);
    } else if (j.is_array()) {
        for (auto& v : j) strip_timing(v);
    }
}

std::string normalized(const fs::path& p, const RunConfig& cfg) {
    const auto rel = fs::relative(p, cfg.workdir).string();
    std::string text = slurp(p);
    auto is = [&](const char* a) { return rel == cfg.artifact(a); };
    if (p.extension() == ".json" && (is("steer_eval") || is("strategies") || is("bench"))) {
        auto j = json::parse(text);
        strip_timing(j);
        return j.dump();
    }
    if (rel.ends_with(".meta.json")) {
        auto j = json::parse(text);
        for (const auto* side : {"inputs", "outputs"}) {
            for (const auto& k : kTimed) j.at(side).erase(k);
        }
        return j.dump();
    }
    if (is("sweep_csv")) {
        std::istringstream in(text);
        std::string out, l;
        while (std::getline(in, l)) {
            std::vector<std::string> f;
            std::stringstream ss(l);
            std::string cell;
            while (std::getline(ss, cell, ',')) f.push_back(cell);
            if (f.size() > 5) f.erase(f.begin() + 5);
            for (const auto& x : f) out += x + ",";
            out += "\n";
        }
        return out;
    }
    if (is("strategies_table") || is("summary")) {
        static const std::regex sci(R"(\s+[0-9]\.[0-9]+e[-+][0-9]+$)");
        std::istringstream in(text);
        std::string out, l;
        while (std::getline(in, l)) {
            if (l.starts_with("steering overhead")) continue;
            out += std::regex_replace(l, sci, "") + "\n";
        }
        return out;
    }
    return text;
}

void determinism_and_formats(const Chain& a, const Chain& b) {
    std::size_t compared = 0, exact = 0;
    std::vector<std::string> diffs;
    for (const auto& e : fs::recursive_directory_iterator(a.cfg.workdir)) {
        if (!e.is_regular_file() || e.path().filename() == ".lock") continue;
        const auto other = b.cfg.workdir / fs::relative(e.path(), a.cfg.workdir);
        ++compared;
        if (!fs::exists(other)) {
            diffs.push_back(fs::relative(e.path(), a.cfg.workdir).string() + " (missing)");
            continue;
        }
        if (slurp(e.path()) == slurp(other)) {
            ++exact;
            continue;
        }
        if (normalized(e.path(), a.cfg) != normalized(other, b.cfg)) diffs.push_back(fs::relative(e.path(), a.cfg.workdir).string());
    }

    // round trips through every binary and text format in the workdir
    const auto& c = a.cfg;
    bool rt = true;
    rt = rt && io::encode_subspace(io::load_subspace(c.path("subspace"))) == io::read_file(c.path("subspace"));
    for (const auto* m : {"gradients", "hidden"}) rt = rt && io::encode_matrix(io::load_matrix(c.path(m))) == io::read_file(c.path(m));
    rt = rt && lm::encode_checkpoint(lm::load_checkpoint(c.path("model"))) == io::read_file(c.path("model"));
    rt = rt && pipeline::format_records(pipeline::read_records(c.path("records"))) == slurp(c.path("records"));
    rt = rt && eval::format_sweep_csv(eval::parse_sweep_csv(slurp(c.path("sweep_csv")))) == slurp(c.path("sweep_csv"));
    rt = rt && corpus::format_corpus(corpus::read_corpus(c.path("prompts_eval"))) == slurp(c.path("prompts_eval"));
    rt = rt && steering::GateClassifier::from_json(json::parse(slurp(c.path("gate")))).to_json() ==
                   json::parse(slurp(c.path("gate")));

    // damaged files raise named errors
    std::vector<std::string> named;
    auto expect = [&](const char* what, auto&& fn, FormatErrorCode code) {
        try {
            fn();
            named.push_back(std::string(what) + ": no error");
        } catch (const FormatError& e) {
            if (e.code != code || std::string(e.what()).find(to_string(code)) == std::string::npos) {
                named.push_back(std::string(what) + ": " + e.what());
            }
        }
    };
    const auto sub = io::read_file(c.path("subspace"));
    const auto mat = io::read_file(c.path("gradients"));
    auto cut = [](const io::Bytes& b, std::size_t n) { return io::Bytes(b.begin(), b.begin() + static_cast<long>(n)); };
    expect("txss truncated", [&] { io::decode_subspace(cut(sub, sub.size() / 2)); }, FormatErrorCode::truncated);
    expect("txmd truncated", [&] { io::decode_matrix(cut(mat, mat.size() - 3)); }, FormatErrorCode::truncated);
    auto bad = sub;
    bad[1] = 'Z';
    expect("txss magic", [&] { io::decode_subspace(bad); }, FormatErrorCode::bad_magic);
    bad = mat;
    bad[4] = 9;
    expect("txmd version", [&] { io::decode_matrix(bad); }, FormatErrorCode::bad_version);
    bool ckpt = false;
    try {
        lm::decode_checkpoint(cut(io::read_file(c.path("model")), 100));
    } catch (const Error& e) {
        ckpt = e.kind() == ErrorKind::format;
    }
    if (!ckpt) named.push_back("checkpoint truncated: no format error");

    std::string detail = std::to_string(compared) + " artifacts rerun, " + std::to_string(exact) +
                         " byte-identical, " + std::to_string(compared - exact - diffs.size()) +
                         " identical outside timing fields";
    for (const auto& d : diffs) detail += "; differs: " + d;
    detail += "; round-trips " + std::string(rt ? "byte-equal" : "MISMATCH");
    detail += "; damaged files " + std::string(named.empty() ? "raise named format errors" : "problem:");
    for (const auto& n : named) detail += " " + n;
    line(diffs.empty() && rt && named.empty(), "determinism-formats", detail);
}

// ---------------------------------------------------------------------------

void extras(const Chain& ch, const ToxicSubspace& sub) {
    const auto& cfg = ch.cfg;
    std::cout << "-- additional measurements (not acceptance criteria) --" << std::endl;
    const auto lex = corpus::Lexicon::defaults();
    const lm::Model model(lm::load_checkpoint(cfg.path("model")));

    // generator law and model law after a trigger
    const auto train = corpus::read_corpus(cfg.path("corpus_train"));
    std::size_t trig = 0, tox = 0;
    double model_mass = 0.0;
    std::size_t model_n = 0;
    for (std::size_t s = 0; s < train.size(); ++s) {
        const auto& y = train[s];
        for (std::size_t t = 0; t + 1 < y.size(); ++t) {
            if (!lex.is_trigger(y[t])) continue;
            ++trig;
            tox += lex.is_toxic(y[t + 1]);
        }
        if (s < 300) {
            const auto res = model.forward(y, nullptr, false);
            for (std::size_t t = 0; t + 1 < y.size(); ++t) {
                if (!lex.is_trigger(y[t])) continue;
                const auto p = lm::softmax(res.logits.row(t));
                double m = 0.0;
                for (auto id : lex.toxic_ids) m += p[static_cast<std::size_t>(id)];
                model_mass += m;
                ++model_n;
            }
        }
    }
    const double emp = static_cast<double>(tox) / static_cast<double>(trig);
    const double mod = model_mass / static_cast<double>(model_n);
    info(std::abs(mod - cfg.corpus.toxic_burst_prob) <= 0.15, "model P(toxic|trigger)",
         num(mod) + " vs toxic_burst_prob " + num(cfg.corpus.toxic_burst_prob) + " (corpus " + num(emp) + ", +-0.15)");

    // greedy latent-prompt toxic-token counts
    const auto prompts = corpus::read_corpus(cfg.path("prompts_eval"));
    const std::vector<corpus::Sequence> latent(prompts.begin() + static_cast<long>(cfg.pipeline.n_prompts), prompts.end());
    steering::SteeringConfig sc;
    const auto hook = steering::make_decode_hook(sc, sub, model.config());
    std::size_t plain = 0, steered = 0;
    for (const auto& p : latent) {
        for (auto t : lm::generate(model, p, cfg.pipeline.T, nullptr, {true, 1.0, 0})) plain += lex.is_toxic(t);
        for (auto t : lm::generate(model, p, cfg.pipeline.T, hook.get(), {true, 1.0, 0})) steered += lex.is_toxic(t);
    }
    info(steered < plain, "greedy latent toxic count",
         std::to_string(latent.size()) + " latent prompts, beta=0.5: " + std::to_string(plain) + " unsteered vs " +
             std::to_string(steered) + " steered");

    const auto g = json::parse(slurp(cfg.path("grads_summary")));
    const std::size_t n = g.at("n_rows");
    info(n >= 500 && g.at("exceeds_control_p90").get<bool>(), "permutation control",
         "sigma1 " + num(g.at("top_singular_value").get<double>()) + " vs control p90 " +
             num(g.at("control_p90").get<double>()) + " over " + std::to_string(n) + " toxic tokens (control is meant for >= 500)");

    const auto s = json::parse(slurp(cfg.path("strategies")));
    const double acc = s.at("gate").at("heldout_accuracy");
    info(acc >= 0.8, "gate held-out accuracy", num(acc) + " (need >= 0.8)");

    const auto heldout = corpus::read_corpus(cfg.path("heldout"));
    double benign_tox = 0.0;
    for (const auto& y : heldout) benign_tox += corpus::toxicity_score(y, lex);
    benign_tox = 100.0 * benign_tox / static_cast<double>(heldout.size());
    const std::vector<corpus::Sequence> toxic(prompts.begin(), prompts.begin() + static_cast<long>(cfg.pipeline.n_prompts));
    lm::DecodeConfig dc = cfg.pipeline.decode;
    dc.seed = cfg.eval.seed;
    const double prone = eval::eval_toxicity(model, nullptr, toxic, lex, cfg.pipeline.T, dc);
    info(prone > benign_tox, "toxic-prone vs benign text",
         "continuations " + num(prone) + " vs held-out benign sequences " + num(benign_tox));
    std::cout << "full chain wall " << num(ch.wall, 4) << " s, CPU " << num(ch.cpu, 4) << " s" << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    const bool strict = argc > 1 && std::strcmp(argv[1], "--strict") == 0;
    try {
        projector_suite();
        svd_oracle();
        gradient_fd();
        attribution_fixtures();

        const auto base = fs::temp_directory_path() / "substeer_acceptance";
        const auto a = run_chain(base / "a");
        const lm::Model model(lm::load_checkpoint(a.cfg.path("model")));
        const auto sub = io::load_subspace(a.cfg.path("subspace"), a.cfg.path("gradients"));
        locality(model, sub, a.cfg.steering.beta);
        containment(a.cfg, sub, a.cfg.steering.beta);
        end_to_end(a);
        sweep_shape(a);
        strategies(a);
        utility(a);
        runtime(a);
        stability(a);
        const auto b = run_chain(base / "b");
        determinism_and_formats(a, b);
        extras(a, sub);
    } catch (const std::exception& e) {
        std::cout << "FAIL acceptance run aborted: " << e.what() << std::endl;
        return 1;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return strict && failures > 0 ? 1 : 0;
}
