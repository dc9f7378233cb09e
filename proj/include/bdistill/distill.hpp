#pragma once

#include "bdistill/iql.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bdistill {

struct TrajectoryRecord {
    StateId prompt = 0;
    std::vector<ActionId> tokens;
    std::uint64_t seed = 0;
    bool projected = false;
};

struct TrajectoryDataset {
    std::vector<TrajectoryRecord> records;
    std::string teacher_id;
    std::uint64_t seed = 0;
    bool projected = false;
    int samples_per_prompt = 0;

    /// (s, a, s') view of the given records (all records when `subset` is empty).
    std::vector<SampledTransition> transitions(const TokenMdp& mdp,
                                               std::span<const std::size_t> subset = {}) const;
};

/**
 * Ancestral sampling of n_per_prompt sequences per prompt, from proj_p(teacher)
 * when `sets` is given. Record i of prompt k uses a sub-seed of (seed, k, i).
 */
TrajectoryDataset generate_teacher_dataset(const TokenMdp& mdp, const Policy& teacher, const CandidateSets* sets,
                                           int n_per_prompt, std::uint64_t seed,
                                           std::string teacher_id = "teacher");

/// Throws DomainError if some record leaves the MDP's transition graph.
void check_dataset(const TokenMdp& mdp, const TrajectoryDataset& data);

struct LmResult {
    double value = 0.0;
    QTable gradient;
};

/// J_PT = mean over (s, a) of log softmax(Q(s, .))[a] over the full action set, with its gradient.
LmResult lm_objective(const QTable& q, std::span<const std::pair<StateId, ActionId>> batch);

std::vector<std::pair<StateId, ActionId>> state_action_pairs(std::span<const SampledTransition> transitions);

struct EvalReport {
    double kl_forward = 0.0;
    double kl_reverse = 0.0;
    double return_gap = 0.0;
    double q_gap_supported = 0.0;
    double kl_forward_visited = 0.0;
    double q_gap_visited = 0.0;
};

/// Student policy: softmax of its Q over each candidate set (zero elsewhere).
Policy student_policy(const QTable& student_q, const CandidateSets& sets);

/// Teacher-occupancy-weighted KL(proj_p teacher || student) over the given state weights.
double weighted_kl(const Policy& lhs, const Policy& rhs, const VTable& state_weights);

/**
 * KLs weighted by the teacher's normalized state occupancy, the soft-return gap
 * J(teacher) - J(student) under the MDP reward, and ||Q^teacher - Q_student|| on the support.
 * The *_visited fields restrict to states proj_p(teacher) reaches (weighted by its occupancy):
 * the only states teacher data can inform.
 */
EvalReport evaluate_student(const TokenMdp& mdp, const Policy& teacher, const QTable& student_q,
                            const CandidateSets& sets);

struct DistillConfig {
    IqlConfig iql;
    int n_per_prompt = 8;
    double validation_fraction = 0.2;
    /// J_PT weight; defaults to 1 with pre-training data and 0 without.
    std::optional<double> lm_weight;
    CandidateMode mode = CandidateMode::state_dependent;
    /// Evaluate (and consider for checkpointing) every k-th epoch.
    int eval_every = 1;
};

struct DistillResult {
    QTable q;
    QTable final_q;
    int best_epoch = 0;
    double best_validation_kl = 0.0;
    double lm_weight = 0.0;
    MetricsLog metrics;
    EvalReport report;
    CandidateSets sets;
    std::optional<TrajectoryDataset> dataset;
};

/**
 * Bellman Distill: candidate sets from the teacher at p, teacher data (exact
 * occupancy in exact mode), projected IQL training with optional J_PT, and
 * checkpoint selection by minimal validation forward KL (earliest on ties).
 */
DistillResult bellman_distill(const TokenMdp& mdp, const Policy& teacher, const DistillConfig& config,
                              const std::vector<std::pair<StateId, ActionId>>* pt_data = nullptr);

struct AblationRow {
    double p = 0.0;
    double kappa = 0.0;
    double min_realized_mass = 0.0;
    std::int64_t support_size = 0;
    int best_epoch = 0;
    double final_objective = 0.0;
    EvalReport report;
};

std::vector<AblationRow> ablate_p(const TokenMdp& mdp, const Policy& teacher, std::span<const double> p_list,
                                  const DistillConfig& config);

} // namespace bdistill
