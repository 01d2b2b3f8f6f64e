#include "substeer/pipeline.hpp"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "substeer/rng.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace substeer::pipeline {

lm::DecodeConfig prompt_decode(const lm::DecodeConfig& base, std::size_t prompt_id) {
    lm::DecodeConfig d = base;
    d.seed = derive_seed(base.seed, prompt_id);
    return d;
}

std::vector<Continuation> collect_continuations(const lm::Model& model, const std::vector<Sequence>& prompts,
                                                const CollectOptions& options) {
    if (prompts.empty()) throw ParameterError("collect_continuations: no prompts");
    if (options.T == 0) throw ParameterError("collect_continuations: T must be positive");
    std::vector<Continuation> out;
    out.reserve(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto g = lm::generate_traced(model, prompts[i], options.T, nullptr, prompt_decode(options.decode, i));
        out.push_back({i, prompts[i], std::move(g.tokens), std::move(g.trace)});
    }
    return out;
}

nlohmann::json TokenRecord::to_json() const {
    nlohmann::json j{{"prompt_id", prompt_id}, {"position", position}, {"token", token},
                     {"drop", drop},           {"toxic", toxic}};
    if (toxic) j["hidden"] = hidden;
    return j;
}

TokenRecord TokenRecord::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"prompt_id", "position", "token", "drop", "toxic", "hidden"};
    TokenRecord r;
    try {
        for (const auto& [key, value] : j.items()) {
            if (!known.contains(key)) throw DataError("token record: unknown field '" + key + "'");
        }
        r.prompt_id = j.at("prompt_id").get<std::size_t>();
        r.position = j.at("position").get<std::size_t>();
        r.token = j.at("token").get<Token>();
        r.drop = j.at("drop").get<double>();
        r.toxic = j.at("toxic").get<bool>();
        if (j.contains("hidden")) r.hidden = j.at("hidden").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("token record: ") + e.what());
    }
    if (r.toxic == r.hidden.empty()) {
        throw DataError("token record " + std::to_string(r.prompt_id) + ":" + std::to_string(r.position) +
                        ": hidden state must be present exactly when the toxic flag is set");
    }
    return r;
}

std::vector<TokenRecord> attribute_tokens(std::span<const Token> y, const corpus::Lexicon& lex, double delta,
                                          std::size_t prompt_id) {
    if (y.empty()) throw ParameterError("attribute_tokens: empty continuation");
    if (!(delta > 0.0 && delta <= 1.0)) throw ParameterError("attribute_tokens: delta must lie in (0, 1]");
    const double full = corpus::toxicity_score(y, lex);
    std::vector<TokenRecord> out;
    out.reserve(y.size());
    Sequence without;
    without.reserve(y.size());
    for (std::size_t t = 0; t < y.size(); ++t) {
        without.assign(y.begin(), y.end());
        without.erase(without.begin() + static_cast<long>(t));
        TokenRecord r;
        r.prompt_id = prompt_id;
        r.position = t;
        r.token = y[t];
        r.drop = full - corpus::toxicity_score(without, lex);
        r.toxic = r.drop >= delta;
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<TokenRecord> attribute_continuations(const std::vector<Continuation>& continuations,
                                                 const corpus::Lexicon& lex, double delta) {
    std::vector<TokenRecord> out;
    for (const auto& c : continuations) {
        auto records = attribute_tokens(c.tokens, lex, delta, c.prompt_id);
        for (auto& r : records) {
            if (!r.toxic) continue;
            const auto h = c.trace.final_hidden.row(r.position);
            r.hidden.assign(h.begin(), h.end());
        }
        out.insert(out.end(), std::make_move_iterator(records.begin()), std::make_move_iterator(records.end()));
    }
    return out;
}

std::string format_records(const std::vector<TokenRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.to_json().dump();
        out += '\n';
    }
    return out;
}

std::vector<TokenRecord> parse_records(const std::string& ndjson) {
    std::vector<TokenRecord> out;
    std::istringstream in(ndjson);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("records line " + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(TokenRecord::from_json(j));
    }
    return out;
}

void write_records(const std::filesystem::path& path, const std::vector<TokenRecord>& records) {
    io::write_text_atomic(path, format_records(records));
}

std::vector<TokenRecord> read_records(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse_records(std::string(bytes.begin(), bytes.end()));
}

GradientMatrix build_gradient_matrix(const linalg::Matrix& head, const std::vector<TokenRecord>& records,
                                     GradientProvenance provenance) {
    const std::size_t d = head.cols();
    std::vector<double> rows;
    std::size_t n = 0, toxic = 0;
    provenance.skipped_zero_norm = 0;
    for (const auto& r : records) {
        if (!r.toxic) continue;
        ++toxic;
        if (r.hidden.size() != d) {
            throw DataError("token record " + std::to_string(r.prompt_id) + ":" + std::to_string(r.position) +
                            " has a hidden state of length " + std::to_string(r.hidden.size()) + ", expected " +
                            std::to_string(d));
        }
        auto g = lm::grad_logprob_wrt_hidden(head, r.hidden, r.token);
        const double norm = linalg::norm2(g);
        if (norm < 1e-12) {
            ++provenance.skipped_zero_norm;
            continue;
        }
        for (double& x : g) x /= norm;
        rows.insert(rows.end(), g.begin(), g.end());
        ++n;
    }
    if (toxic == 0) throw ParameterError("build_gradient_matrix: no toxic records");
    if (n == 0) {
        throw EmptyMatrixError("build_gradient_matrix: all " + std::to_string(toxic) +
                               " toxic-token gradients have zero norm");
    }
    return {linalg::Matrix(n, d, std::move(rows)), std::move(provenance)};
}

std::vector<double> permutation_control(const GradientMatrix& g, std::size_t n_controls, std::uint64_t seed) {
    const std::size_t n = g.n_rows(), d = g.dim();
    std::vector<double> out;
    out.reserve(n_controls);
    std::vector<std::size_t> order(n);
    for (std::size_t c = 0; c < n_controls; ++c) {
        Rng rng(derive_seed(seed, c));
        std::bernoulli_distribution flip(0.5);
        linalg::Matrix m(n, d);
        for (std::size_t j = 0; j < d; ++j) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t i = 0; i < n; ++i) {
                const double x = g.rows(order[i], j);
                m(i, j) = flip(rng) ? -x : x;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            auto row = m.row(i);
            const double norm = linalg::norm2(row);
            if (norm > 0.0) {
                for (double& x : row) x /= norm;
            }
        }
        out.push_back(linalg::truncated_svd(m, 1).singular_values[0]);
    }
    return out;
}

std::int64_t creation_time() {
    if (const char* s = std::getenv("SOURCE_DATE_EPOCH")) {
        try {
            return std::stoll(s);
        } catch (const std::exception&) {
            throw ParameterError(std::string("SOURCE_DATE_EPOCH is not an integer: ") + s);
        }
    }
    return 0;
}

Discovery discover_subspace(const GradientMatrix& g, std::size_t k, const DiscoveryInfo& info) {
    const std::size_t bound = std::min(g.n_rows(), g.dim());
    if (k < 1 || k > bound) {
        throw ParameterError("discover_subspace: k=" + std::to_string(k) + " outside [1, min(N=" +
                             std::to_string(g.n_rows()) + ", d=" + std::to_string(g.dim()) + ")]");
    }
    auto svd = linalg::truncated_svd(g.rows, k);
    Discovery out;
    out.singular_values = std::move(svd.singular_values);
    out.subspace.basis = std::move(svd.basis);
    out.subspace.layer_index = info.layer_index;
    auto& p = out.subspace.provenance;
    p.model_hash = info.model_hash.empty() ? g.provenance.model_hash : info.model_hash;
    p.gradient_hash = io::sha256_hex(io::encode_matrix(io::to_matrix_file(g)));
    p.created = creation_time();
    p.delta = g.provenance.delta;
    p.T = g.provenance.T;
    p.corpus_seed = info.corpus_seed != 0 ? info.corpus_seed : g.provenance.corpus_seed;
    p.model_seed = info.model_seed;
    return out;
}

double mean_projected_energy(const linalg::SubspaceBasis& basis, const linalg::Matrix& rows) {
    if (rows.rows() == 0) throw ParameterError("mean_projected_energy: no rows");
    double acc = 0.0;
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        const auto p = linalg::project_onto(rows.row(i), basis);
        acc += linalg::dot(p, p);
    }
    return acc / static_cast<double>(rows.rows());
}

} // namespace substeer::pipeline
