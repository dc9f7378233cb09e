#pragma once

#include "bdistill/errors.hpp"
#include "bdistill/metrics.hpp"
#include "bdistill/top_p.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace bdistill {

struct IqlConfig {
    double alpha = 0.1;
    double gamma = 0.99;
    double p = 0.8;
    double learning_rate = 1e-3;
    int batch_size = 64;
    int epochs = 100;
    double q_min = -10.0;
    std::uint64_t seed = 0;
    bool projected_sampling = true;
    bool exact_mode = false;
    /// Exact mode only: halve the step until the objective does not decrease.
    bool step_halving = true;
    /// Start from smoothed log action frequencies of the data instead of zeros.
    bool init_from_bc = false;
};

/// Throws DomainError on any field outside its domain.
void validate(const IqlConfig& config);

/// phi(x) = x - x^2 / (4 alpha): the chi^2 reward regularizer.
template <typename Scalar>
Scalar phi(Scalar x, Scalar alpha)
{
    return x - x * x / (Scalar(4) * alpha);
}

template <typename Scalar>
Scalar phi_derivative(Scalar x, Scalar alpha)
{
    return Scalar(1) - x / (Scalar(2) * alpha);
}

/**
 * Read-only Q table restricted to the candidate sets (the top-p mask).
 *
 * Off-support entries behave as -inf: they never contribute to logsumexp or
 * softmax, and reading one as a finite value raises MaskedAccessError.
 */
template <typename Scalar>
class MaskedQ {
public:
    MaskedQ(const Table<Scalar>& q, const CandidateSets& sets) : q_(q), sets_(sets)
    {
        if (q.rows() != sets.num_states() || q.cols() != sets.member.cols()) {
            throw DomainError("Q table and candidate sets disagree on shape");
        }
    }

    bool supported(StateId s, ActionId a) const { return sets_.contains(s, a); }

    Scalar operator()(StateId s, ActionId a) const
    {
        if (!supported(s, a)) {
            throw MaskedAccessError("masked Q entry read at an off-support action");
        }
        return q_(s, a);
    }

    /// Restricted logsumexp, i.e. V^{proj_p pi_Q}(s); -inf for an empty set.
    Scalar logsumexp(StateId s) const { return bdistill::logsumexp(q_.row(s)(sets_.at(s))); }

    /// Full-width softmax of the masked row (zeros off support).
    Vector<Scalar> softmax(StateId s) const
    {
        Vector<Scalar> out = Vector<Scalar>::Zero(q_.cols());
        const auto& set = sets_.at(s);
        const Vector<Scalar> local = bdistill::softmax(q_.row(s)(set));
        for (std::size_t i = 0; i < set.size(); ++i) {
            out[set[i]] = local[static_cast<Eigen::Index>(i)];
        }
        return out;
    }

    const CandidateSets& sets() const { return sets_; }

private:
    const Table<Scalar>& q_;
    const CandidateSets& sets_;
};

template <typename Scalar>
MaskedQ<Scalar> apply_mask(const Table<Scalar>& q, const CandidateSets& sets)
{
    return MaskedQ<Scalar>(q, sets);
}

/// V^{proj_p pi_Q}(s) = log sum_{a in A*_p(s)} exp Q(s,a); 0 at the terminal.
double projected_value(const TokenMdp& mdp, const QTable& q, const CandidateSets& sets, StateId s);

/// One observed step of a teacher trajectory; `step` is the index t within it.
struct SampledTransition {
    StateId state = 0;
    ActionId action = 0;
    StateId next = 0;
    int step = 0;
};

struct Transition {
    StateId state = 0;
    ActionId action = 0;
    StateId next = 0;
    double weight = 0.0;
};

/**
 * Weighted (s, a, s') expectation. Objectives are sum_i weight_i * f_i, so the
 * weights already carry the (1 - gamma) occupancy normalization.
 */
struct TransitionBatch {
    std::vector<Transition> items;

    double total_weight() const;
};

/// Exact expectation under (1 - gamma) * occupancy over non-terminal pairs.
TransitionBatch exact_batch(const TokenMdp& mdp, const OccupancyMeasure& occupancy);

/**
 * Unbiased estimate of the exact expectation from whole trajectories: each
 * transition at step t carries weight (1 - gamma) gamma^t / n_trajectories.
 */
TransitionBatch sampled_batch(std::span<const SampledTransition> samples, std::size_t n_trajectories,
                              double gamma);

/// Sub-batch of `full` with weights rescaled by |full| / |indices|.
TransitionBatch minibatch(const TransitionBatch& full, std::span<const std::size_t> indices);

template <typename Scalar>
struct BasicObjectiveBreakdown {
    Scalar total = 0;
    Scalar term_phi = 0;
    Scalar term_td = 0;
    std::size_t n_samples_used = 0;
    std::size_t n_samples_skipped = 0;
};

using ObjectiveBreakdown = BasicObjectiveBreakdown<double>;

/**
 * Projected IQL objective J*(Q) = E[phi(Q(s,a) - gamma V(s'))] - E[V(s) - gamma V(s')]
 * with V the restricted logsumexp. Samples whose action falls outside the
 * candidate set are skipped in the phi term and counted.
 */
template <typename Scalar>
BasicObjectiveBreakdown<Scalar> iql_objective(const Table<Scalar>& q, const TransitionBatch& data,
                                              const TokenMdp& mdp, const CandidateSets& sets,
                                              const IqlConfig& config);

/// dJ*/dQ on supported entries; exactly zero elsewhere.
template <typename Scalar>
Table<Scalar> iql_gradient(const Table<Scalar>& q, const TransitionBatch& data, const TokenMdp& mdp,
                           const CandidateSets& sets, const IqlConfig& config);

/**
 * Untelescoped form E[phi(Q(s,a) - gamma V(s'))] - (1 - gamma) E_{s0}[V(s0)],
 * kept as a cross-check of the telescoped objective on exact batches.
 */
double iql_objective_untelescoped(const QTable& q, const TransitionBatch& data, const TokenMdp& mdp,
                                  const CandidateSets& sets, const VTable& start_dist,
                                  const IqlConfig& config);

struct GradientCheck {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t entries_checked = 0;
};

/**
 * Central differences of `objective` at `q` over `entries` (all supported
 * entries when empty) against `analytic`. Relative error uses the denominator
 * max(|analytic|, |numeric|, 1e-8).
 */
using ExtendedObjective = std::function<long double(const Table<long double>&)>;

GradientCheck central_difference_check(const ExtendedObjective& objective, const QTable& q,
                                       const QTable& analytic,
                                       std::span<const std::pair<StateId, ActionId>> entries, double epsilon);

/// Finite-difference audit of iql_gradient; samples max_entries supported entries when the support is larger.
GradientCheck finite_diff_check(const QTable& q, const TransitionBatch& data, const TokenMdp& mdp,
                                const CandidateSets& sets, const IqlConfig& config, double epsilon,
                                std::size_t max_entries = 2000, std::uint64_t seed = 0);

/// Auxiliary objective added to J* with weight `weight`; returns its value and writes its gradient.
struct AuxiliaryObjective {
    std::function<double(const QTable& q, QTable* gradient)> evaluate;
    double weight = 0.0;
};

struct EpochEvaluation {
    double kl_to_proj_teacher = std::numeric_limits<double>::quiet_NaN();
    double return_gap = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHooks {
    /// Called for the initial table (epoch 0) and after every epoch.
    std::function<EpochEvaluation(int epoch, const QTable& q)> on_epoch;
    AuxiliaryObjective auxiliary;
};

struct TrainResult {
    QTable q;
    MetricsLog metrics;
};

/// Standard per-epoch columns of train_iql.
std::vector<std::string> train_metric_columns();

/// Initial table: zeros, or smoothed log action frequencies when config.init_from_bc.
QTable initial_q(const TokenMdp& mdp, const TransitionBatch& data, const CandidateSets& sets,
                 const IqlConfig& config);

/**
 * Gradient ascent on J* (+ auxiliary). Exact mode takes one full-batch step
 * per epoch, optionally with step halving; otherwise each epoch sweeps
 * shuffled minibatches. Supported entries are clamped to >= q_min after every step.
 */
TrainResult train_iql(const TokenMdp& mdp, const TransitionBatch& data, const CandidateSets& sets,
                      const IqlConfig& config, const TrainHooks& hooks = {});

} // namespace bdistill
