#include "bdistill/soft_rl.hpp"

#include "bdistill/errors.hpp"

#include <cmath>
#include <string>

namespace bdistill {

namespace {

void check_q_shape(const TokenMdp& mdp, const QTable& q)
{
    if (q.rows() != mdp.num_states() || q.cols() != mdp.vocab_size) {
        throw DomainError("Q table shape does not match the MDP");
    }
}

// Q <- r + gamma * V(next), terminal row zero.
QTable backup(const TokenMdp& mdp, const VTable& v)
{
    QTable out(mdp.num_states(), mdp.vocab_size);
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            out.row(s).setZero();
            continue;
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            out(s, a) = mdp.reward(s, a) + mdp.gamma * v[mdp.next(s, a)];
        }
    }
    return out;
}

template <typename Step>
QTable iterate_to_fixed_point(const TokenMdp& mdp, const SolveOptions& options, SolveStats* stats,
                              Step&& step, const char* what)
{
    if (!(options.tol > 0.0)) {
        throw DomainError("solver tolerance must be positive");
    }
    QTable q = options.init ? *options.init : QTable::Zero(mdp.num_states(), mdp.vocab_size);
    check_q_shape(mdp, q);
    if (mdp.has_terminal()) {
        q.row(mdp.terminal).setZero();
    }
    for (int it = 1; it <= options.max_iterations; ++it) {
        QTable updated = step(q);
        const double residual = (updated - q).cwiseAbs().maxCoeff();
        q = std::move(updated);
        if (!std::isfinite(residual)) {
            throw ConvergenceError(std::string(what) + ": non-finite residual");
        }
        if (residual <= options.tol) {
            if (stats) {
                *stats = {it, residual};
            }
            return q;
        }
    }
    throw ConvergenceError(std::string(what) + ": no convergence within " +
                           std::to_string(options.max_iterations) + " iterations");
}

} // namespace

VTable policy_values(const TokenMdp& mdp, const Policy& policy, const QTable& q)
{
    VTable v(mdp.num_states());
    for (int s = 0; s < mdp.num_states(); ++s) {
        v[s] = mdp.is_terminal(s) ? 0.0 : soft_expectation(policy.row(s), q.row(s));
    }
    return v;
}

VTable logsumexp_values(const TokenMdp& mdp, const QTable& q)
{
    VTable v(mdp.num_states());
    for (int s = 0; s < mdp.num_states(); ++s) {
        v[s] = mdp.is_terminal(s) ? 0.0 : logsumexp(q.row(s));
    }
    return v;
}

QTable soft_bellman_apply(const TokenMdp& mdp, const Policy& policy, const QTable& q)
{
    check_policy(mdp, policy);
    check_q_shape(mdp, q);
    return backup(mdp, policy_values(mdp, policy, q));
}

QTable soft_policy_evaluation(const TokenMdp& mdp, const Policy& policy, const SolveOptions& options,
                              SolveStats* stats)
{
    check_policy(mdp, policy);
    return iterate_to_fixed_point(
        mdp, options, stats, [&](const QTable& q) { return backup(mdp, policy_values(mdp, policy, q)); },
        "soft_policy_evaluation");
}

SoftOptimum soft_value_iteration(const TokenMdp& mdp, const SolveOptions& options, SolveStats* stats)
{
    QTable q = iterate_to_fixed_point(
        mdp, options, stats, [&](const QTable& x) { return backup(mdp, logsumexp_values(mdp, x)); },
        "soft_value_iteration");
    Policy pi = policy_from_q(q);
    return {std::move(q), std::move(pi)};
}

Policy policy_from_q(const QTable& q)
{
    Table<double> probs(q.rows(), q.cols());
    for (Eigen::Index s = 0; s < q.rows(); ++s) {
        probs.row(s) = softmax(q.row(s)).transpose();
    }
    return Policy{std::move(probs)};
}

OccupancyMeasure occupancy_measure(const TokenMdp& mdp, const Policy& policy, const VTable& start_dist)
{
    check_policy(mdp, policy);
    if (start_dist.size() != static_cast<Eigen::Index>(mdp.prompts.size())) {
        throw DomainError("start distribution must have one entry per prompt");
    }
    const int n = mdp.num_states();
    VTable source = VTable::Zero(n);
    for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
        source[mdp.prompts[i]] += start_dist[static_cast<Eigen::Index>(i)];
    }

    // d = source + gamma * P_pi^T d over non-terminal states; exact after depth+1
    // sweeps on a prefix forest, geometric convergence on cyclic test MDPs.
    VTable d = source;
    const double scale = 1.0 / (1.0 - mdp.gamma);
    for (int it = 0; it < 1'000'000; ++it) {
        VTable updated = source;
        for (int s = 0; s < n; ++s) {
            if (mdp.is_terminal(s) || d[s] == 0.0) {
                continue;
            }
            for (int a = 0; a < mdp.vocab_size; ++a) {
                const StateId t = mdp.next(s, a);
                if (!mdp.is_terminal(t)) {
                    updated[t] += mdp.gamma * d[s] * policy.probs(s, a);
                }
            }
        }
        const double change = (updated - d).cwiseAbs().maxCoeff();
        d = std::move(updated);
        if (change <= 1e-16 * scale) {
            break;
        }
    }

    OccupancyMeasure out{QTable::Zero(n, mdp.vocab_size), start_dist};
    double inflow = 0.0;
    for (int s = 0; s < n; ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            out.mass(s, a) = d[s] * policy.probs(s, a);
            if (mdp.is_terminal(mdp.next(s, a))) {
                inflow += out.mass(s, a);
            }
        }
    }
    if (mdp.has_terminal()) {
        out.mass(mdp.terminal, 0) = mdp.gamma * inflow / (1.0 - mdp.gamma);
    }
    return out;
}

QTable entropy_regularized_reward(const TokenMdp& mdp, const Policy& policy)
{
    QTable out = QTable::Zero(mdp.num_states(), mdp.vocab_size);
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            const double pi = policy.probs(s, a);
            if (pi > 0.0) {
                out(s, a) = mdp.reward(s, a) - std::log(pi);
            }
        }
    }
    return out;
}

double expected_return(const TokenMdp& mdp, const Policy& policy, const VTable& start_dist, double tol)
{
    SolveOptions options;
    options.tol = tol;
    const QTable q = soft_policy_evaluation(mdp, policy, options);
    const VTable v = policy_values(mdp, policy, q);
    double j = 0.0;
    for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
        j += start_dist[static_cast<Eigen::Index>(i)] * v[mdp.prompts[i]];
    }
    return j;
}

QTable inverse_soft_bellman(const TokenMdp& mdp, const QTable& q, const Policy& policy)
{
    check_q_shape(mdp, q);
    const VTable v = policy_values(mdp, policy, q);
    QTable out = QTable::Zero(mdp.num_states(), mdp.vocab_size);
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            out(s, a) = q(s, a) - mdp.gamma * v[mdp.next(s, a)];
        }
    }
    return out;
}

double telescopic_residual(const TokenMdp& mdp, const VTable& v, const OccupancyMeasure& occupancy,
                           const VTable& start_dist)
{
    auto value = [&](StateId s) { return mdp.is_terminal(s) ? 0.0 : v[s]; };
    double lhs = 0.0;
    for (int s = 0; s < mdp.num_states(); ++s) {
        for (int a = 0; a < mdp.vocab_size; ++a) {
            const double w = occupancy.mass(s, a);
            if (w != 0.0) {
                lhs += w * (value(s) - mdp.gamma * value(mdp.next(s, a)));
            }
        }
    }
    lhs *= 1.0 - mdp.gamma;
    double rhs = 0.0;
    for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
        rhs += start_dist[static_cast<Eigen::Index>(i)] * value(mdp.prompts[i]);
    }
    rhs *= 1.0 - mdp.gamma;
    return std::abs(lhs - rhs);
}

} // namespace bdistill
