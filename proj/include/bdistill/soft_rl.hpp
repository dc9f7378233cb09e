#pragma once

#include "bdistill/mdp.hpp"

#include <optional>

namespace bdistill {

// Entropy-regularized evaluation and control on deterministic MDPs. Q tables
// span every state; the terminal row is identically zero and V(terminal) = 0.

struct SolveOptions {
    double tol = 1e-10;
    int max_iterations = 100'000;
    std::optional<QTable> init;
};

struct SolveStats {
    int iterations = 0;
    double residual = 0.0;
};

/// V^pi(s) = E_{a~pi}[Q(s,a) - log pi(a|s)], 0 log 0 := 0, V(terminal) = 0.
VTable policy_values(const TokenMdp& mdp, const Policy& policy, const QTable& q);

/// V^Q(s) = log sum_a exp Q(s,a), V(terminal) = 0.
VTable logsumexp_values(const TokenMdp& mdp, const QTable& q);

/// One application of B^pi_r: r(s,a) + gamma V^pi(next(s,a)).
QTable soft_bellman_apply(const TokenMdp& mdp, const Policy& policy, const QTable& q);

/// Fixed point Q^pi of B^pi_r, iterated until the sup-norm residual is at most tol.
QTable soft_policy_evaluation(const TokenMdp& mdp, const Policy& policy, const SolveOptions& options = {},
                              SolveStats* stats = nullptr);

struct SoftOptimum {
    QTable q;
    Policy policy;
};

/// Q* from Q(s,a) = r(s,a) + gamma logsumexp Q(s', .) and pi* = softmax(Q*) row-wise.
SoftOptimum soft_value_iteration(const TokenMdp& mdp, const SolveOptions& options = {},
                                 SolveStats* stats = nullptr);

/// Row-wise softmax of a Q table.
Policy policy_from_q(const QTable& q);

struct OccupancyMeasure {
    /// Discounted visitation rho(s,a); the terminal self-loop mass sits at (terminal, 0).
    QTable mass;
    VTable start_dist;

    double total() const { return mass.sum(); }
    /// State occupancy d(s) = sum_a rho(s,a).
    VTable state_mass() const { return mass.rowwise().sum(); }
};

/// Exact discounted occupancy; the terminal tail is closed form inflow / (1 - gamma).
OccupancyMeasure occupancy_measure(const TokenMdp& mdp, const Policy& policy, const VTable& start_dist);

/// r~(s,a) = r(s,a) - log pi(a|s) on entries with pi > 0, zero elsewhere and at the terminal.
QTable entropy_regularized_reward(const TokenMdp& mdp, const Policy& policy);

/// J(pi) = E_{s0 ~ start}[V^pi(s0)].
double expected_return(const TokenMdp& mdp, const Policy& policy, const VTable& start_dist,
                       double tol = 1e-12);

/// (T^pi Q)(s,a) = Q(s,a) - gamma V^pi(next(s,a)); recovers r from Q^pi.
QTable inverse_soft_bellman(const TokenMdp& mdp, const QTable& q, const Policy& policy);

/**
 * |E_mu[V(s) - gamma V(s')] - (1 - gamma) E_{s0}[V(s0)]| with mu = (1 - gamma) * occupancy.
 * Zero (up to rounding) for any V whenever `occupancy` is a valid occupancy for `start_dist`.
 */
double telescopic_residual(const TokenMdp& mdp, const VTable& v, const OccupancyMeasure& occupancy,
                           const VTable& start_dist);

} // namespace bdistill
