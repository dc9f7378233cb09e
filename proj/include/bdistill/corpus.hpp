#pragma once

#include "bdistill/mdp.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace bdistill {

/**
 * Character n-gram model with additive smoothing.
 *
 * `order` is the context length: P(w | previous `order` characters). Tokens
 * are the distinct bytes of the training text in ascending order plus a final
 * end-of-sequence token. The training text is read as one sequence followed by
 * EOS; only full-length contexts are counted, so
 *     P(w | c) = (count(c, w) + delta) / (count(c) + delta * |vocab|)
 * and an unseen context is uniform.
 */
class NgramTeacher {
public:
    int order() const { return order_; }
    double delta() const { return delta_; }
    int vocab_size() const { return static_cast<int>(symbols_.size()) + 1; }
    ActionId eos() const { return static_cast<ActionId>(symbols_.size()); }
    const std::string& symbols() const { return symbols_; }

    /// Token id of a byte; -1 when the byte is outside the vocabulary.
    ActionId token(char c) const;
    std::string render(ActionId token) const;

    /// Conditional distribution given the last `order` characters of `context`.
    VTable conditional(std::string_view context) const;

    std::size_t num_contexts() const { return counts_.size(); }

    friend NgramTeacher train_ngram(std::string_view text, int n, double delta, int vocab_cap);

private:
    int order_ = 1;
    double delta_ = 0.1;
    std::string symbols_;
    std::map<std::string, std::vector<double>, std::less<>> counts_;
};

NgramTeacher train_ngram(std::string_view text, int n, double delta = 0.1, int vocab_cap = 256);

struct NgramMdp {
    TokenMdp mdp;
    Policy teacher;
    /// Context text of every non-terminal state (prompt plus generated characters).
    std::vector<std::string> state_text;
};

/**
 * Prefix-tree MDP over the teacher's vocabulary rooted at each prompt; EOS and
 * depth-(horizon - 1) actions lead to the terminal. Rewards are log pi*(a|s).
 */
NgramMdp ngram_to_mdp(const NgramTeacher& teacher, const std::vector<std::string>& prompts, int horizon,
                      double gamma, std::int64_t max_entries = 2'000'000);

struct SparsityProfile {
    VTable mean_probs;
    VTable cumulative;
    int n_contexts = 0;
    int n_sequences = 0;

    /// Cumulative mass of the `rank` most probable tokens (1-based, clamped to the vocabulary).
    double mass_at(int rank) const;
};

/**
 * Rank-wise mean of sorted teacher rows over every state visited by n_sequences
 * sampled trajectories (sequence i starts at prompt i mod |prompts|).
 */
SparsityProfile sparsity_profile(const Policy& teacher, const TokenMdp& mdp, int n_sequences, std::uint64_t seed);

/// Reads a whole text file; throws std::runtime_error when missing.
std::string read_text_file(const std::string& path);

/// Location of the bundled corpus text.
std::string bundled_corpus_path();

} // namespace bdistill
