#pragma once

#include "bdistill/numerics.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace bdistill {

using StateId = int;
using ActionId = int;

using IndexTable = Eigen::Matrix<StateId, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/**
 * Finite MDP with deterministic transitions over a token vocabulary.
 *
 * Rows of `next` and `reward` are indexed by state, columns by action. The
 * optional absorbing terminal state maps every action to itself with zero
 * reward; it carries V = 0 and Q = 0 in every solver. For generated token
 * MDPs the non-terminal states form a prefix forest rooted at the prompts.
 */
struct TokenMdp {
    int vocab_size = 0;
    int horizon = 0;
    double gamma = 0.0;
    std::vector<StateId> prompts;
    StateId terminal = -1;
    IndexTable next;
    QTable reward;

    /// Depth below the owning prompt; -1 for the terminal and unreachable states.
    std::vector<int> depth;

    int num_states() const { return static_cast<int>(next.rows()); }
    bool has_terminal() const { return terminal >= 0; }
    bool is_terminal(StateId s) const { return s == terminal; }
    /// Number of (s, a) pairs; the terminal self-loop counts once.
    std::int64_t num_pairs() const;
};

/**
 * Validate and finish an MDP from raw tables: checks totality, finiteness,
 * the terminal self-loop and gamma in [0, 1), then fills `depth`.
 */
TokenMdp make_mdp(int vocab_size, int horizon, double gamma, std::vector<StateId> prompts,
                  IndexTable next, QTable reward, StateId terminal);

/// Throws DomainError unless `mdp` is a prefix forest: acyclic, reachable, depth + 1 per step.
void check_token_tree(const TokenMdp& mdp);

enum class RewardLaw { uniform, normal };

struct MdpGenSpec {
    int vocab_size = 8;
    int horizon = 3;
    int n_prompts = 1;
    RewardLaw reward_law = RewardLaw::normal;
    double sigma = 1.0;
    double gamma = 0.9;
    std::uint64_t seed = 0;
    std::int64_t max_entries = 2'000'000;
};

/// Non-terminal node count of a full prefix forest: n_prompts * (V^H - 1) / (V - 1).
std::int64_t prefix_forest_size(int vocab_size, int horizon, int n_prompts);

TokenMdp build_token_mdp(const MdpGenSpec& spec);

std::vector<std::pair<ActionId, StateId>> successors(const TokenMdp& mdp, StateId s);

/// Row-stochastic action distribution for every state (the terminal row is unused).
struct Policy {
    Table<double> probs;

    int num_states() const { return static_cast<int>(probs.rows()); }
    int num_actions() const { return static_cast<int>(probs.cols()); }
    auto row(StateId s) const { return probs.row(s); }
    bool structurally_zero(StateId s, ActionId a) const { return probs(s, a) == 0.0; }
};

Policy uniform_policy(const TokenMdp& mdp);

/// Throws DomainError if shapes mismatch or a non-terminal row is not a distribution.
void check_policy(const TokenMdp& mdp, const Policy& policy, double tol = 1e-12);

/// Uniform distribution over the MDP's prompts.
VTable uniform_start(const TokenMdp& mdp);

} // namespace bdistill
