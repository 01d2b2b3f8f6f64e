#include "substeer/corpus.hpp"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "substeer/rng.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace substeer::corpus {

Lexicon Lexicon::defaults() {
    Lexicon lex;
    lex.vocab_size = 64;
    lex.pad_id = 0;
    lex.bos_id = 1;
    lex.eos_id = 2;
    const double w[] = {0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95};
    for (int i = 0; i < 8; ++i) {
        lex.toxic_ids.push_back(3 + i);
        lex.weights[3 + i] = w[i];
    }
    for (int i = 0; i < 4; ++i) lex.trigger_ids.push_back(11 + i);
    return lex;
}

void Lexicon::validate() const {
    if (vocab_size < 5) throw ParameterError("lexicon: vocab_size must be at least 5");
    std::set<Token> seen;
    auto claim = [&](Token t, const char* what) {
        if (t < 0 || t >= vocab_size) {
            throw ParameterError(std::string("lexicon: ") + what + " id " + std::to_string(t) + " outside vocabulary");
        }
        if (!seen.insert(t).second) {
            throw ParameterError(std::string("lexicon: id ") + std::to_string(t) + " assigned twice");
        }
    };
    claim(pad_id, "pad");
    claim(bos_id, "bos");
    claim(eos_id, "eos");
    for (Token t : toxic_ids) claim(t, "toxic");
    for (Token t : trigger_ids) claim(t, "trigger");
    if (toxic_ids.empty()) throw ParameterError("lexicon: no toxic ids");
    if (trigger_ids.empty()) throw ParameterError("lexicon: no trigger ids");
    if (static_cast<int>(seen.size()) >= vocab_size) throw ParameterError("lexicon: no benign ids left");
    if (weights.size() != toxic_ids.size()) throw ParameterError("lexicon: every toxic id needs exactly one weight");
    for (Token t : toxic_ids) {
        auto it = weights.find(t);
        if (it == weights.end()) throw ParameterError("lexicon: toxic id " + std::to_string(t) + " has no weight");
        if (!(it->second > 0.0 && it->second <= 1.0)) {
            throw ParameterError("lexicon: weight of toxic id " + std::to_string(t) + " outside (0, 1]");
        }
    }
}

bool Lexicon::is_toxic(Token t) const { return weights.contains(t); }

bool Lexicon::is_trigger(Token t) const {
    return std::find(trigger_ids.begin(), trigger_ids.end(), t) != trigger_ids.end();
}

bool Lexicon::is_special(Token t) const { return t == pad_id || t == bos_id || t == eos_id; }

bool Lexicon::is_benign(Token t) const {
    return t >= 0 && t < vocab_size && !is_toxic(t) && !is_trigger(t) && !is_special(t);
}

std::vector<Token> Lexicon::benign_ids() const {
    std::vector<Token> out;
    for (Token t = 0; t < vocab_size; ++t)
        if (is_benign(t)) out.push_back(t);
    return out;
}

double Lexicon::weight(Token t) const {
    auto it = weights.find(t);
    return it == weights.end() ? 0.0 : it->second;
}

nlohmann::json Lexicon::to_json() const {
    nlohmann::json w = nlohmann::json::object();
    for (const auto& [id, value] : weights) w[std::to_string(id)] = value;
    return {{"vocab_size", vocab_size}, {"toxic_ids", toxic_ids}, {"trigger_ids", trigger_ids}, {"weights", w},
            {"bos_id", bos_id},         {"eos_id", eos_id},       {"pad_id", pad_id}};
}

Lexicon Lexicon::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"vocab_size", "toxic_ids", "trigger_ids", "weights",
                                             "bos_id",     "eos_id",    "pad_id"};
    Lexicon lex = defaults();
    try {
        for (const auto& [key, value] : j.items()) {
            if (!known.contains(key)) throw ParameterError("lexicon: unknown key '" + key + "'");
        }
        if (j.contains("vocab_size")) lex.vocab_size = j.at("vocab_size").get<int>();
        if (j.contains("toxic_ids")) lex.toxic_ids = j.at("toxic_ids").get<std::vector<Token>>();
        if (j.contains("trigger_ids")) lex.trigger_ids = j.at("trigger_ids").get<std::vector<Token>>();
        if (j.contains("weights")) {
            lex.weights.clear();
            for (const auto& [key, value] : j.at("weights").items()) lex.weights[std::stoi(key)] = value.get<double>();
        }
        if (j.contains("bos_id")) lex.bos_id = j.at("bos_id").get<Token>();
        if (j.contains("eos_id")) lex.eos_id = j.at("eos_id").get<Token>();
        if (j.contains("pad_id")) lex.pad_id = j.at("pad_id").get<Token>();
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("lexicon: ") + e.what());
    }
    lex.validate();
    return lex;
}

void CorpusSpec::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string("corpus: ") + name + " must lie in [0, 1]");
    };
    prob(trigger_prob, "trigger_prob");
    prob(toxic_burst_prob, "toxic_burst_prob");
    prob(burst_continue_prob, "burst_continue_prob");
    if (max_len < 4) throw ParameterError("corpus: max_len must be at least 4");
}

std::vector<Sequence> generate_corpus(const CorpusSpec& spec, const Lexicon& lex) {
    spec.validate();
    lex.validate();
    const auto benign = lex.benign_ids();
    std::vector<Sequence> out;
    out.reserve(spec.num_sequences);

    enum class State { normal, after_trigger, in_burst };

    for (std::size_t i = 0; i < spec.num_sequences; ++i) {
        Rng rng(derive_seed(spec.seed, i));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> pick_benign(0, benign.size() - 1);
        std::uniform_int_distribution<std::size_t> pick_toxic(0, lex.toxic_ids.size() - 1);
        std::uniform_int_distribution<std::size_t> pick_trigger(0, lex.trigger_ids.size() - 1);

        Sequence seq;
        seq.reserve(spec.max_len);
        seq.push_back(lex.bos_id);
        State state = State::normal;
        while (seq.size() < spec.max_len) {
            if (state == State::after_trigger || state == State::in_burst) {
                const double p = state == State::after_trigger ? spec.toxic_burst_prob : spec.burst_continue_prob;
                if (u01(rng) < p) {
                    seq.push_back(lex.toxic_ids[pick_toxic(rng)]);
                    state = State::in_burst;
                    continue;
                }
            }
            if (u01(rng) < spec.trigger_prob) {
                seq.push_back(lex.trigger_ids[pick_trigger(rng)]);
                state = State::after_trigger;
            } else {
                seq.push_back(benign[pick_benign(rng)]);
                state = State::normal;
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

double toxicity_score(std::span<const Token> y, const Lexicon& lex) {
    double keep = 1.0;
    for (Token t : y) {
        if (t < 0 || t >= lex.vocab_size) throw DataError("toxicity_score: unknown token id " + std::to_string(t));
        const double w = lex.weight(t);
        if (w > 0.0) keep *= 1.0 - w;
    }
    return 1.0 - keep;
}

PromptSet select_prompts(const std::vector<Sequence>& corpus, const Lexicon& lex, double threshold, std::size_t n,
                         std::size_t prompt_length) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ParameterError("select_prompts: threshold must lie in [0, 1]");
    if (prompt_length < 2) throw ParameterError("select_prompts: prompt length must be at least 2");
    PromptSet out;
    for (const auto& seq : corpus) {
        if (out.toxic.size() < n) {
            const std::size_t len = std::min(prompt_length, seq.size());
            std::span<const Token> prefix(seq.data(), len);
            if (toxicity_score(prefix, lex) > threshold) out.toxic.emplace_back(prefix.begin(), prefix.end());
        }
        if (out.latent.size() < n) {
            // shortest prefix ending in the first trigger, if it fits and carries no toxic token
            for (std::size_t p = 0; p < std::min(prompt_length, seq.size()); ++p) {
                if (lex.is_toxic(seq[p])) break;
                if (lex.is_trigger(seq[p])) {
                    if (p >= 1) out.latent.emplace_back(seq.begin(), seq.begin() + static_cast<long>(p + 1));
                    break;
                }
            }
        }
        if (out.toxic.size() >= n && out.latent.size() >= n) break;
    }
    if (out.toxic.size() < n) {
        throw ShortfallError(out.toxic.size(), n,
                             "select_prompts: found only " + std::to_string(out.toxic.size()) +
                                 " toxic prompts, " + std::to_string(n) + " requested");
    }
    if (out.latent.size() < n) {
        throw ShortfallError(out.latent.size(), n,
                             "select_prompts: found only " + std::to_string(out.latent.size()) +
                                 " latent prompts, " + std::to_string(n) + " requested");
    }
    return out;
}

std::string format_corpus(const std::vector<Sequence>& corpus) {
    std::string out;
    for (const auto& seq : corpus) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i) out += ' ';
            out += std::to_string(seq[i]);
        }
        out += '\n';
    }
    return out;
}

std::vector<Sequence> parse_corpus(const std::string& text) {
    std::vector<Sequence> out;
    std::istringstream lines(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ids(line);
        Sequence seq;
        std::string tok;
        while (ids >> tok) {
            try {
                std::size_t used = 0;
                const int id = std::stoi(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
                seq.push_back(id);
            } catch (const std::exception&) {
                throw DataError("corpus line " + std::to_string(lineno) + ": bad token '" + tok + "'");
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

void write_corpus(const std::filesystem::path& path, const std::vector<Sequence>& corpus) {
    const std::string text = format_corpus(corpus);
    io::write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<Sequence> read_corpus(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse_corpus(std::string(bytes.begin(), bytes.end()));
}

} // namespace substeer::corpus
