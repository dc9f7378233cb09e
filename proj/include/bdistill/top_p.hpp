#pragma once

#include "bdistill/soft_rl.hpp"

#include <cstdint>
#include <limits>
#include <vector>

namespace bdistill {

enum class CandidateMode {
    /// A*_p(s) per state (default).
    state_dependent,
    /// A*_p = union over non-terminal states of A*_p(s), shared by every state.
    state_union,
};

/**
 * Top-p (nucleus) candidate actions per state.
 *
 * Each non-terminal state lists the shortest prefix of its teacher row, sorted
 * by descending probability with ascending-index tiebreak, whose mass reaches
 * the nominal p. The terminal state has an empty set.
 */
struct CandidateSets {
    std::vector<std::vector<ActionId>> actions;
    VTable realized_mass;
    double nominal_p = 1.0;
    CandidateMode mode = CandidateMode::state_dependent;
    Table<std::uint8_t> member;

    int num_states() const { return static_cast<int>(actions.size()); }
    bool contains(StateId s, ActionId a) const { return member(s, a) != 0; }
    const std::vector<ActionId>& at(StateId s) const { return actions[static_cast<std::size_t>(s)]; }
    /// Smallest realized mass over non-empty sets.
    double min_realized_mass() const;
    std::int64_t support_size() const;
};

/// Slack used when comparing cumulative teacher mass against p.
inline constexpr double kMassSlack = 1e-12;

CandidateSets build_candidate_sets(const TokenMdp& mdp, const Policy& teacher, double p,
                                   CandidateMode mode = CandidateMode::state_dependent);

/// Every action at every non-terminal state (the p = 1 sets of a full-support teacher).
CandidateSets full_candidate_sets(const TokenMdp& mdp);

/// proj_p(pi): renormalize each row on its candidate set, exact zeros elsewhere.
Policy project_policy(const Policy& policy, const CandidateSets& sets);

/// V(s) = E_{a ~ pi}[Q(s,a) - log pi(a|s)] summed over the candidate set only.
VTable projected_policy_values(const TokenMdp& mdp, const Policy& projected, const QTable& qbar,
                               const CandidateSets& sets);

/// log sum_{a in A*_p(s)} exp Q(s,a) per state; terminal 0.
VTable restricted_logsumexp_values(const TokenMdp& mdp, const QTable& q, const CandidateSets& sets);

/**
 * One application of B^pi_p on supported (s, a) pairs. Entries outside the
 * candidate sets are copied from `qbar` unchanged.
 */
QTable top_p_bellman_apply(const TokenMdp& mdp, const Policy& policy, const QTable& qbar,
                           const CandidateSets& sets);

/// Fixed point of B^pi_p. Off-support entries of the result are NaN.
QTable top_p_policy_evaluation(const TokenMdp& mdp, const Policy& policy, const CandidateSets& sets,
                               const SolveOptions& options = {}, SolveStats* stats = nullptr);

/// Q-bar*_p and pi*_p of the top-p MDP (restricted logsumexp backups). Off-support Q entries are NaN.
SoftOptimum top_p_soft_value_iteration(const TokenMdp& mdp, const CandidateSets& sets,
                                       const SolveOptions& options = {}, SolveStats* stats = nullptr);

/// max_s (sum_{a in A*_p(s)} |diff(s,a)|^q)^(1/q) for q in {1, 2, inf}.
double supported_norm(const QTable& diff, const CandidateSets& sets, double q);

inline constexpr double kInfNorm = std::numeric_limits<double>::infinity();

/// Supported norm of lhs - rhs, reading supported entries only.
double supported_distance(const QTable& lhs, const QTable& rhs, const CandidateSets& sets,
                          double q = kInfNorm);

/// kappa(p) = -gamma / (1 - gamma) * log p.
double kappa(double p, double gamma);

/// ||B q1 - B q2|| / ||q1 - q2|| in the supported sup-norm; NaN when q1 == q2 on the support.
double contraction_ratio(const TokenMdp& mdp, const Policy& policy, const QTable& q1, const QTable& q2,
                         const CandidateSets& sets);

struct ContractionAudit {
    double max_ratio = 0.0;
    int trials = 0;
    int skipped = 0;
};

/// Random (pi, Q1, Q2) draws, one sub-seed per (seed, trial index).
ContractionAudit verify_contraction(const TokenMdp& mdp, const CandidateSets& sets, int n_trials,
                                    std::uint64_t seed);

struct BoundOptions {
    double tol = 1e-6;
    double solver_tol = 1e-10;
    /// Require the teacher to equal softmax(Q*) and assert the bounds.
    bool strict = true;
    CandidateMode mode = CandidateMode::state_dependent;
    int contraction_trials = 20;
    std::uint64_t seed = 0;
    /// Test hook: added to Q-bar*_p after solving (negative-control runs).
    double tamper_bias = 0.0;
};

struct BoundReport {
    std::uint64_t seed = 0;
    int vocab_size = 0;
    int horizon = 0;
    double gamma = 0.0;
    double p = 0.0;
    double min_realized_mass = 0.0;
    double kappa = 0.0;
    double kappa_realized = 0.0;
    double gap_proj = 0.0;
    double gap_opt = 0.0;
    double sandwich_violation = 0.0;
    double contraction_max_ratio = 0.0;
    double tol = 0.0;

    bool asserted = true;
    bool pass_sandwich = false;
    bool pass_gap_proj = false;
    bool pass_gap_opt = false;
    bool pass_realized = false;
    bool pass_contraction = false;

    /// All checks hold; report-only runs (asserted == false) always pass.
    bool pass() const;
    bool all_checks() const;
};

/**
 * Solve Q*, Q-bar^{proj_p pi*} and Q-bar*_p for the teacher's candidate sets
 * and check the sandwich ordering and both kappa gap bounds.
 */
BoundReport verify_bounds(const TokenMdp& mdp, const Policy& teacher, double p,
                          const BoundOptions& options = {});

} // namespace bdistill
