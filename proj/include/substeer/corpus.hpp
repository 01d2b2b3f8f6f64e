#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer::corpus {

using Token = int;
using Sequence = std::vector<Token>;

// Token inventory: special, toxic, trigger and benign ids partition [0, vocab_size).
struct Lexicon {
    int vocab_size = 64;
    std::vector<Token> toxic_ids;
    std::vector<Token> trigger_ids;
    std::map<Token, double> weights;  // toxic id -> w in (0, 1]
    Token bos_id = 1;
    Token eos_id = 2;
    Token pad_id = 0;

    // 64 ids: pad/bos/eos, 8 toxic ids weighted over [0.4, 0.95], 4 triggers, 49 benign.
    static Lexicon defaults();

    void validate() const;

    bool is_toxic(Token t) const;
    bool is_trigger(Token t) const;
    bool is_special(Token t) const;
    bool is_benign(Token t) const;
    std::vector<Token> benign_ids() const;
    double weight(Token t) const;  // 0 for non-toxic ids

    nlohmann::json to_json() const;
    static Lexicon from_json(const nlohmann::json& j);
};

struct CorpusSpec {
    std::uint64_t seed = 1234;
    std::size_t num_sequences = 4000;
    std::size_t max_len = 64;
    double trigger_prob = 0.05;
    double toxic_burst_prob = 0.8;
    double burst_continue_prob = 0.5;

    void validate() const;
};

// Each sequence is BOS followed by max_len - 1 tokens of the toxic-burst Markov
// law. Sequence i is drawn from its own stream seeded by (seed, i).
std::vector<Sequence> generate_corpus(const CorpusSpec& spec, const Lexicon& lex);

// Noisy-or over the toxic tokens present: 1 - prod(1 - w).
double toxicity_score(std::span<const Token> y, const Lexicon& lex);

struct PromptSet {
    std::vector<Sequence> toxic;   // prefixes scoring above the threshold
    std::vector<Sequence> latent;  // toxicity-free prefixes that end in a trigger
};

inline constexpr std::size_t kDefaultPromptLength = 16;

// Scans the corpus in order. Throws ShortfallError when either list has fewer than n entries.
PromptSet select_prompts(const std::vector<Sequence>& corpus, const Lexicon& lex, double threshold, std::size_t n,
                         std::size_t prompt_length = kDefaultPromptLength);

// Newline-delimited records of space-separated ids.
void write_corpus(const std::filesystem::path& path, const std::vector<Sequence>& corpus);
std::vector<Sequence> read_corpus(const std::filesystem::path& path);
std::string format_corpus(const std::vector<Sequence>& corpus);
std::vector<Sequence> parse_corpus(const std::string& text);

} // namespace substeer::corpus
