#include "bdistill/top_p.hpp"

#include "bdistill/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace bdistill {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<ActionId> sorted_by_mass(const Eigen::Ref<const Eigen::RowVectorXd>& row)
{
    std::vector<ActionId> order(static_cast<std::size_t>(row.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](ActionId a, ActionId b) { return row[a] > row[b]; });
    return order;
}

void fill_membership(CandidateSets& sets, int n_actions)
{
    sets.member = Table<std::uint8_t>::Zero(sets.num_states(), n_actions);
    for (int s = 0; s < sets.num_states(); ++s) {
        for (ActionId a : sets.at(s)) {
            sets.member(s, a) = 1;
        }
    }
}

void check_sets(const TokenMdp& mdp, const CandidateSets& sets)
{
    if (sets.num_states() != mdp.num_states() || sets.member.cols() != mdp.vocab_size) {
        throw DomainError("candidate sets do not match the MDP");
    }
}

QTable nan_off_support(QTable q, const CandidateSets& sets)
{
    for (int s = 0; s < sets.num_states(); ++s) {
        for (Eigen::Index a = 0; a < q.cols(); ++a) {
            if (!sets.contains(s, static_cast<ActionId>(a))) {
                q(s, a) = kNaN;
            }
        }
    }
    return q;
}

// Supported backup r(s,a) + gamma V(next(s,a)); off-support entries keep `base`.
QTable supported_backup(const TokenMdp& mdp, const VTable& v, const CandidateSets& sets, QTable base)
{
    for (int s = 0; s < mdp.num_states(); ++s) {
        for (ActionId a : sets.at(s)) {
            base(s, a) = mdp.reward(s, a) + mdp.gamma * v[mdp.next(s, a)];
        }
    }
    return base;
}

template <typename Step>
QTable iterate_supported(const TokenMdp& mdp, const CandidateSets& sets, const SolveOptions& options,
                         SolveStats* stats, Step&& step, const char* what)
{
    if (!(options.tol > 0.0)) {
        throw DomainError("solver tolerance must be positive");
    }
    QTable q = options.init ? *options.init : QTable::Zero(mdp.num_states(), mdp.vocab_size);
    q = nan_off_support(std::move(q), sets);
    for (int it = 1; it <= options.max_iterations; ++it) {
        QTable updated = step(q);
        const double residual = supported_distance(updated, q, sets);
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

double CandidateSets::min_realized_mass() const
{
    double m = 1.0;
    for (int s = 0; s < num_states(); ++s) {
        if (!at(s).empty()) {
            m = std::min(m, realized_mass[s]);
        }
    }
    return m;
}

std::int64_t CandidateSets::support_size() const
{
    std::int64_t n = 0;
    for (const auto& set : actions) {
        n += static_cast<std::int64_t>(set.size());
    }
    return n;
}

CandidateSets build_candidate_sets(const TokenMdp& mdp, const Policy& teacher, double p, CandidateMode mode)
{
    if (!(p > 0.0 && p <= 1.0)) {
        throw DomainError("top-p mass must lie in (0, 1], got " + std::to_string(p));
    }
    check_policy(mdp, teacher);

    const int n = mdp.num_states();
    CandidateSets sets;
    sets.nominal_p = p;
    sets.mode = mode;
    sets.actions.resize(static_cast<std::size_t>(n));
    sets.realized_mass = VTable::Zero(n);

    for (int s = 0; s < n; ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        const auto row = teacher.row(s);
        std::vector<ActionId> order = sorted_by_mass(row);
        if (p < 1.0) {
            double cumulative = 0.0;
            std::size_t keep = 0;
            while (keep < order.size()) {
                cumulative += row[order[keep++]];
                if (cumulative >= p - kMassSlack) {
                    break;
                }
            }
            order.resize(keep);
        }
        sets.actions[static_cast<std::size_t>(s)] = std::move(order);
    }

    if (mode == CandidateMode::state_union) {
        std::vector<std::uint8_t> in_union(static_cast<std::size_t>(mdp.vocab_size), 0);
        for (const auto& set : sets.actions) {
            for (ActionId a : set) {
                in_union[static_cast<std::size_t>(a)] = 1;
            }
        }
        for (int s = 0; s < n; ++s) {
            if (mdp.is_terminal(s)) {
                continue;
            }
            std::vector<ActionId> ordered;
            for (ActionId a : sorted_by_mass(teacher.row(s))) {
                if (in_union[static_cast<std::size_t>(a)]) {
                    ordered.push_back(a);
                }
            }
            sets.actions[static_cast<std::size_t>(s)] = std::move(ordered);
        }
    }

    for (int s = 0; s < n; ++s) {
        double mass = 0.0;
        for (ActionId a : sets.at(s)) {
            mass += teacher.probs(s, a);
        }
        sets.realized_mass[s] = mass;
    }
    fill_membership(sets, mdp.vocab_size);
    return sets;
}

CandidateSets full_candidate_sets(const TokenMdp& mdp)
{
    return build_candidate_sets(mdp, uniform_policy(mdp), 1.0);
}

Policy project_policy(const Policy& policy, const CandidateSets& sets)
{
    if (policy.num_states() != sets.num_states()) {
        throw DomainError("policy and candidate sets disagree on the state count");
    }
    Policy out{policy.probs};
    for (int s = 0; s < sets.num_states(); ++s) {
        const auto& set = sets.at(s);
        if (set.empty()) {
            continue;
        }
        double mass = 0.0;
        for (ActionId a : set) {
            mass += policy.probs(s, a);
        }
        if (!(mass > 0.0)) {
            throw DegenerateSupportError("policy puts no mass on the candidate set of state " +
                                         std::to_string(s));
        }
        out.probs.row(s).setZero();
        for (ActionId a : set) {
            out.probs(s, a) = policy.probs(s, a) / mass;
        }
    }
    return out;
}

VTable projected_policy_values(const TokenMdp& mdp, const Policy& projected, const QTable& qbar,
                               const CandidateSets& sets)
{
    VTable v = VTable::Zero(mdp.num_states());
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        double acc = 0.0;
        for (ActionId a : sets.at(s)) {
            const double w = projected.probs(s, a);
            if (w > 0.0) {
                acc += w * qbar(s, a) - xlogx(w);
            }
        }
        v[s] = acc;
    }
    return v;
}

VTable restricted_logsumexp_values(const TokenMdp& mdp, const QTable& q, const CandidateSets& sets)
{
    VTable v = VTable::Zero(mdp.num_states());
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (!mdp.is_terminal(s)) {
            v[s] = logsumexp(q.row(s)(sets.at(s)));
        }
    }
    return v;
}

QTable top_p_bellman_apply(const TokenMdp& mdp, const Policy& policy, const QTable& qbar,
                           const CandidateSets& sets)
{
    check_sets(mdp, sets);
    const Policy projected = project_policy(policy, sets);
    return supported_backup(mdp, projected_policy_values(mdp, projected, qbar, sets), sets, qbar);
}

QTable top_p_policy_evaluation(const TokenMdp& mdp, const Policy& policy, const CandidateSets& sets,
                               const SolveOptions& options, SolveStats* stats)
{
    check_sets(mdp, sets);
    const Policy projected = project_policy(policy, sets);
    return iterate_supported(
        mdp, sets, options, stats,
        [&](const QTable& q) {
            return supported_backup(mdp, projected_policy_values(mdp, projected, q, sets), sets, q);
        },
        "top_p_policy_evaluation");
}

SoftOptimum top_p_soft_value_iteration(const TokenMdp& mdp, const CandidateSets& sets,
                                       const SolveOptions& options, SolveStats* stats)
{
    check_sets(mdp, sets);
    QTable q = iterate_supported(
        mdp, sets, options, stats,
        [&](const QTable& x) {
            return supported_backup(mdp, restricted_logsumexp_values(mdp, x, sets), sets, x);
        },
        "top_p_soft_value_iteration");

    Policy pi{Table<double>::Zero(mdp.num_states(), mdp.vocab_size)};
    for (int s = 0; s < mdp.num_states(); ++s) {
        const auto& set = sets.at(s);
        if (set.empty()) {
            pi.probs.row(s).setConstant(1.0 / mdp.vocab_size);
            continue;
        }
        const VTable local = softmax(q.row(s)(set));
        for (std::size_t i = 0; i < set.size(); ++i) {
            pi.probs(s, set[i]) = local[static_cast<Eigen::Index>(i)];
        }
    }
    return {std::move(q), std::move(pi)};
}

double supported_norm(const QTable& diff, const CandidateSets& sets, double q)
{
    const bool inf = std::isinf(q);
    if (!(inf || q == 1.0 || q == 2.0)) {
        throw DomainError("supported norm order must be 1, 2 or infinity");
    }
    double out = 0.0;
    for (int s = 0; s < sets.num_states(); ++s) {
        double acc = 0.0;
        for (ActionId a : sets.at(s)) {
            const double x = std::abs(diff(s, a));
            if (inf) {
                acc = std::max(acc, x);
            } else if (q == 1.0) {
                acc += x;
            } else {
                acc += x * x;
            }
        }
        if (q == 2.0) {
            acc = std::sqrt(acc);
        }
        if (std::isnan(acc)) {
            return acc;
        }
        out = std::max(out, acc);
    }
    return out;
}

double supported_distance(const QTable& lhs, const QTable& rhs, const CandidateSets& sets, double q)
{
    QTable diff = QTable::Zero(lhs.rows(), lhs.cols());
    for (int s = 0; s < sets.num_states(); ++s) {
        for (ActionId a : sets.at(s)) {
            diff(s, a) = lhs(s, a) - rhs(s, a);
        }
    }
    return supported_norm(diff, sets, q);
}

double kappa(double p, double gamma)
{
    if (!(p > 0.0 && p <= 1.0)) {
        throw DomainError("kappa needs p in (0, 1]");
    }
    if (!(gamma >= 0.0 && gamma < 1.0)) {
        throw DomainError("kappa needs gamma in [0, 1)");
    }
    // log 1 = 0 would otherwise give -0.
    return p == 1.0 ? 0.0 : -gamma / (1.0 - gamma) * std::log(p);
}

double contraction_ratio(const TokenMdp& mdp, const Policy& policy, const QTable& q1, const QTable& q2,
                         const CandidateSets& sets)
{
    const double denom = supported_distance(q1, q2, sets);
    if (denom == 0.0) {
        return kNaN;
    }
    const double num = supported_distance(top_p_bellman_apply(mdp, policy, q1, sets),
                                          top_p_bellman_apply(mdp, policy, q2, sets), sets);
    return num / denom;
}

ContractionAudit verify_contraction(const TokenMdp& mdp, const CandidateSets& sets, int n_trials,
                                    std::uint64_t seed)
{
    if (n_trials < 1) {
        throw DomainError("n_trials must be at least 1");
    }
    check_sets(mdp, sets);
    ContractionAudit audit;
    const int n = mdp.num_states();
    const int V = mdp.vocab_size;
    for (int trial = 0; trial < n_trials; ++trial) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(trial)};
        std::mt19937_64 rng(seq);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto draw = [&](double scale) {
            QTable t(n, V);
            for (Eigen::Index i = 0; i < t.size(); ++i) {
                t.data()[i] = scale * normal(rng);
            }
            return t;
        };
        const Policy pi = policy_from_q(draw(2.0));
        const QTable q1 = draw(5.0);
        const QTable q2 = draw(5.0);
        const double ratio = contraction_ratio(mdp, pi, q1, q2, sets);
        if (std::isnan(ratio)) {
            ++audit.skipped;
            continue;
        }
        ++audit.trials;
        audit.max_ratio = std::max(audit.max_ratio, ratio);
    }
    return audit;
}

bool BoundReport::all_checks() const
{
    return pass_sandwich && pass_gap_proj && pass_gap_opt && pass_realized && pass_contraction;
}

bool BoundReport::pass() const
{
    return !asserted || all_checks();
}

BoundReport verify_bounds(const TokenMdp& mdp, const Policy& teacher, double p, const BoundOptions& options)
{
    SolveOptions solve;
    solve.tol = options.solver_tol;

    const SoftOptimum optimum = soft_value_iteration(mdp, solve);
    if (options.strict) {
        const double mismatch = (optimum.policy.probs - teacher.probs).cwiseAbs().maxCoeff();
        if (!(mismatch <= 1e-8)) {
            throw DomainError("teacher is not the soft-optimal policy of the MDP (max deviation " +
                              std::to_string(mismatch) + ")");
        }
    }

    const CandidateSets sets = build_candidate_sets(mdp, teacher, p, options.mode);
    const QTable q_proj = top_p_policy_evaluation(mdp, teacher, sets, solve);
    QTable q_opt = top_p_soft_value_iteration(mdp, sets, solve).q;
    if (options.tamper_bias != 0.0) {
        q_opt.array() += options.tamper_bias;
    }

    BoundReport report;
    report.seed = options.seed;
    report.vocab_size = mdp.vocab_size;
    report.horizon = mdp.horizon;
    report.gamma = mdp.gamma;
    report.p = p;
    report.tol = options.tol;
    report.asserted = options.strict;
    report.min_realized_mass = sets.min_realized_mass();
    report.kappa = kappa(p, mdp.gamma);
    report.kappa_realized = kappa(std::min(1.0, report.min_realized_mass), mdp.gamma);
    report.gap_proj = supported_distance(optimum.q, q_proj, sets);
    report.gap_opt = supported_distance(optimum.q, q_opt, sets);

    double violation = 0.0;
    for (int s = 0; s < mdp.num_states(); ++s) {
        for (ActionId a : sets.at(s)) {
            violation = std::max({violation, q_proj(s, a) - q_opt(s, a), q_opt(s, a) - optimum.q(s, a)});
        }
    }
    report.sandwich_violation = violation;

    report.contraction_max_ratio =
        options.contraction_trials > 0
            ? verify_contraction(mdp, sets, options.contraction_trials, options.seed).max_ratio
            : 0.0;

    report.pass_sandwich = report.sandwich_violation <= options.tol;
    report.pass_gap_proj = report.gap_proj <= report.kappa + options.tol;
    report.pass_gap_opt = report.gap_opt <= report.kappa + options.tol;
    report.pass_realized = report.gap_proj <= report.kappa_realized + options.tol &&
                           report.gap_opt <= report.kappa_realized + options.tol;
    report.pass_contraction = report.contraction_max_ratio <= mdp.gamma + 1e-9;
    return report;
}

} // namespace bdistill
