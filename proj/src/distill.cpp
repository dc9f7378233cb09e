#include "bdistill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace bdistill {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
    std::mt19937_64 rng(seq);
    return rng();
}

ActionId sample_action(const Eigen::Ref<const Eigen::RowVectorXd>& row, double u)
{
    double cumulative = 0.0;
    ActionId last_positive = 0;
    for (Eigen::Index a = 0; a < row.size(); ++a) {
        if (row[a] <= 0.0) {
            continue;
        }
        cumulative += row[a];
        last_positive = static_cast<ActionId>(a);
        if (u < cumulative) {
            return last_positive;
        }
    }
    return last_positive;
}

double row_kl(const Eigen::Ref<const Eigen::RowVectorXd>& p, const Eigen::Ref<const Eigen::RowVectorXd>& q)
{
    double kl = 0.0;
    for (Eigen::Index a = 0; a < p.size(); ++a) {
        if (p[a] > 0.0) {
            kl += p[a] * (std::log(p[a]) - std::log(q[a]));
        }
    }
    return std::max(kl, 0.0);
}

VTable teacher_state_weights(const TokenMdp& mdp, const Policy& teacher)
{
    const OccupancyMeasure occ = occupancy_measure(mdp, teacher, uniform_start(mdp));
    VTable w = occ.state_mass();
    if (mdp.has_terminal()) {
        w[mdp.terminal] = 0.0;
    }
    return w / w.sum();
}

// Discounted empirical visitation of the given records, normalized.
VTable empirical_state_weights(const TokenMdp& mdp, std::span<const SampledTransition> transitions)
{
    VTable w = VTable::Zero(mdp.num_states());
    for (const SampledTransition& t : transitions) {
        w[t.state] += std::pow(mdp.gamma, t.step);
    }
    return w / w.sum();
}

} // namespace

std::vector<SampledTransition> TrajectoryDataset::transitions(const TokenMdp& mdp,
                                                              std::span<const std::size_t> subset) const
{
    std::vector<SampledTransition> out;
    auto add = [&](const TrajectoryRecord& r) {
        StateId s = r.prompt;
        for (std::size_t t = 0; t < r.tokens.size(); ++t) {
            const StateId next = mdp.next(s, r.tokens[t]);
            out.push_back({s, r.tokens[t], next, static_cast<int>(t)});
            s = next;
        }
    };
    if (subset.empty()) {
        for (const TrajectoryRecord& r : records) {
            add(r);
        }
    } else {
        for (std::size_t i : subset) {
            add(records.at(i));
        }
    }
    return out;
}

TrajectoryDataset generate_teacher_dataset(const TokenMdp& mdp, const Policy& teacher, const CandidateSets* sets,
                                           int n_per_prompt, std::uint64_t seed, std::string teacher_id)
{
    if (n_per_prompt < 1) {
        throw DomainError("n_per_prompt must be at least 1");
    }
    check_policy(mdp, teacher);
    const Policy sampler = sets ? project_policy(teacher, *sets) : teacher;
    const int max_steps = mdp.horizon > 0 ? mdp.horizon : 1 << 16;

    TrajectoryDataset data;
    data.teacher_id = std::move(teacher_id);
    data.seed = seed;
    data.projected = sets != nullptr;
    data.samples_per_prompt = n_per_prompt;
    data.records.reserve(mdp.prompts.size() * static_cast<std::size_t>(n_per_prompt));

    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (std::size_t k = 0; k < mdp.prompts.size(); ++k) {
        for (int i = 0; i < n_per_prompt; ++i) {
            TrajectoryRecord record;
            record.prompt = mdp.prompts[k];
            record.seed = derive_seed(seed, k, static_cast<std::uint64_t>(i));
            record.projected = data.projected;
            std::mt19937_64 rng(record.seed);
            StateId s = record.prompt;
            for (int t = 0; t < max_steps && !mdp.is_terminal(s); ++t) {
                const ActionId a = sample_action(sampler.row(s), uniform(rng));
                record.tokens.push_back(a);
                s = mdp.next(s, a);
            }
            data.records.push_back(std::move(record));
        }
    }
    return data;
}

void check_dataset(const TokenMdp& mdp, const TrajectoryDataset& data)
{
    for (const TrajectoryRecord& r : data.records) {
        if (r.prompt < 0 || r.prompt >= mdp.num_states() || mdp.is_terminal(r.prompt)) {
            throw DomainError("record starts outside the MDP");
        }
        StateId s = r.prompt;
        for (ActionId a : r.tokens) {
            if (a < 0 || a >= mdp.vocab_size || mdp.is_terminal(s)) {
                throw DomainError("record continues past the terminal state or uses an unknown token");
            }
            s = mdp.next(s, a);
        }
    }
}

LmResult lm_objective(const QTable& q, std::span<const std::pair<StateId, ActionId>> batch)
{
    if (batch.empty()) {
        throw DomainError("language-modeling batch is empty");
    }
    LmResult out{0.0, QTable::Zero(q.rows(), q.cols())};
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& [s, a] : batch) {
        const double lse = logsumexp(q.row(s));
        out.value += scale * (q(s, a) - lse);
        out.gradient.row(s) -= scale * softmax(q.row(s)).transpose();
        out.gradient(s, a) += scale;
    }
    return out;
}

std::vector<std::pair<StateId, ActionId>> state_action_pairs(std::span<const SampledTransition> transitions)
{
    std::vector<std::pair<StateId, ActionId>> out;
    out.reserve(transitions.size());
    for (const SampledTransition& t : transitions) {
        out.emplace_back(t.state, t.action);
    }
    return out;
}

Policy student_policy(const QTable& student_q, const CandidateSets& sets)
{
    const MaskedQ<double> mq(student_q, sets);
    Policy pi{Table<double>::Zero(student_q.rows(), student_q.cols())};
    for (int s = 0; s < sets.num_states(); ++s) {
        if (sets.at(s).empty()) {
            pi.probs.row(s).setConstant(1.0 / static_cast<double>(student_q.cols()));
        } else {
            pi.probs.row(s) = mq.softmax(s).transpose();
        }
    }
    return pi;
}

double weighted_kl(const Policy& lhs, const Policy& rhs, const VTable& state_weights)
{
    double kl = 0.0;
    for (Eigen::Index s = 0; s < state_weights.size(); ++s) {
        if (state_weights[s] > 0.0) {
            kl += state_weights[s] * row_kl(lhs.row(static_cast<StateId>(s)), rhs.row(static_cast<StateId>(s)));
        }
    }
    return kl;
}

EvalReport evaluate_student(const TokenMdp& mdp, const Policy& teacher, const QTable& student_q,
                            const CandidateSets& sets)
{
    const Policy projected = project_policy(teacher, sets);
    const Policy student = student_policy(student_q, sets);
    const VTable weights = teacher_state_weights(mdp, teacher);
    const VTable visited = teacher_state_weights(mdp, projected);
    const VTable start = uniform_start(mdp);

    EvalReport report;
    report.kl_forward = weighted_kl(projected, student, weights);
    report.kl_reverse = weighted_kl(student, projected, weights);
    report.kl_forward_visited = weighted_kl(projected, student, visited);
    report.return_gap = expected_return(mdp, teacher, start) - expected_return(mdp, student, start);
    SolveOptions options;
    options.tol = 1e-12;
    const QTable teacher_q = soft_policy_evaluation(mdp, teacher, options);
    report.q_gap_supported = supported_distance(teacher_q, student_q, sets);
    // States proj_p(teacher) never visits carry no data; their entries keep their initial values.
    double gap = 0.0;
    for (StateId st = 0; st < mdp.num_states(); ++st) {
        if (visited[st] > 0.0) {
            for (ActionId a : sets.at(st)) {
                gap = std::max(gap, std::abs(teacher_q(st, a) - student_q(st, a)));
            }
        }
    }
    report.q_gap_visited = gap;
    return report;
}

DistillResult bellman_distill(const TokenMdp& mdp, const Policy& teacher, const DistillConfig& config,
                              const std::vector<std::pair<StateId, ActionId>>* pt_data)
{
    validate(config.iql);
    if (config.iql.gamma != mdp.gamma) {
        throw DomainError("learner gamma differs from the MDP discount");
    }
    if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
        throw DomainError("validation_fraction must lie in [0, 1)");
    }
    if (config.eval_every < 1) {
        throw DomainError("eval_every must be at least 1");
    }
    check_policy(mdp, teacher);

    DistillResult result;
    result.sets = build_candidate_sets(mdp, teacher, config.iql.p, config.mode);
    const CandidateSets& sets = result.sets;
    const Policy projected_teacher = project_policy(teacher, sets);

    TransitionBatch train;
    VTable validation_weights;
    std::vector<std::pair<StateId, ActionId>> held_out_pairs;
    if (config.iql.exact_mode) {
        const Policy& behavior = config.iql.projected_sampling ? projected_teacher : teacher;
        train = exact_batch(mdp, occupancy_measure(mdp, behavior, uniform_start(mdp)));
        validation_weights = teacher_state_weights(mdp, teacher);
    } else {
        TrajectoryDataset dataset =
            generate_teacher_dataset(mdp, teacher, config.iql.projected_sampling ? &sets : nullptr,
                                     config.n_per_prompt, config.iql.seed);
        std::vector<std::size_t> order(dataset.records.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 split_rng(derive_seed(config.iql.seed, 0x5eed, 1));
        std::shuffle(order.begin(), order.end(), split_rng);
        std::size_t n_val = static_cast<std::size_t>(
            std::ceil(config.validation_fraction * static_cast<double>(order.size())));
        if (n_val >= order.size()) {
            n_val = 0;
        }
        std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
        std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
        std::sort(val_idx.begin(), val_idx.end());
        std::sort(train_idx.begin(), train_idx.end());

        const std::vector<SampledTransition> train_t = dataset.transitions(mdp, train_idx);
        train = sampled_batch(train_t, train_idx.size(), mdp.gamma);
        const std::vector<SampledTransition> val_t =
            n_val > 0 ? dataset.transitions(mdp, val_idx) : train_t;
        validation_weights = empirical_state_weights(mdp, val_t);
        result.dataset = std::move(dataset);
    }

    result.lm_weight = config.lm_weight.value_or(pt_data ? 1.0 : 0.0);
    TrainHooks hooks;
    if (pt_data && result.lm_weight != 0.0) {
        hooks.auxiliary.weight = result.lm_weight;
        hooks.auxiliary.evaluate = [pt_data](const QTable& q, QTable* grad) {
            LmResult lm = lm_objective(q, *pt_data);
            if (grad) {
                *grad = std::move(lm.gradient);
            }
            return lm.value;
        };
    }

    bool have_best = false;
    result.best_validation_kl = std::numeric_limits<double>::infinity();
    hooks.on_epoch = [&](int epoch, const QTable& q) {
        if (epoch % config.eval_every != 0 && epoch != config.iql.epochs) {
            return EpochEvaluation{};
        }
        const Policy student = student_policy(q, sets);
        const double val_kl = weighted_kl(projected_teacher, student, validation_weights);
        if (!have_best || val_kl < result.best_validation_kl) {
            have_best = true;
            result.best_validation_kl = val_kl;
            result.best_epoch = epoch;
            result.q = q;
        }
        const EvalReport report = evaluate_student(mdp, teacher, q, sets);
        return EpochEvaluation{report.kl_forward, report.return_gap};
    };

    TrainResult trained = train_iql(mdp, train, sets, config.iql, hooks);
    result.final_q = std::move(trained.q);
    result.metrics = std::move(trained.metrics);
    result.report = evaluate_student(mdp, teacher, result.q, sets);
    return result;
}

std::vector<AblationRow> ablate_p(const TokenMdp& mdp, const Policy& teacher, std::span<const double> p_list,
                                  const DistillConfig& config)
{
    if (p_list.empty()) {
        throw DomainError("p_list must not be empty");
    }
    for (double p : p_list) {
        if (!(p > 0.0 && p <= 1.0)) {
            throw DomainError("ablation p values must lie in (0, 1]");
        }
    }
    std::vector<AblationRow> rows;
    for (double p : p_list) {
        DistillConfig run = config;
        run.iql.p = p;
        const DistillResult result = bellman_distill(mdp, teacher, run);
        AblationRow row;
        row.p = p;
        row.kappa = kappa(p, mdp.gamma);
        row.min_realized_mass = result.sets.min_realized_mass();
        row.support_size = result.sets.support_size();
        row.best_epoch = result.best_epoch;
        row.final_objective = result.metrics.at(result.metrics.size() - 1, "J_total");
        row.report = result.report;
        rows.push_back(row);
    }
    return rows;
}

} // namespace bdistill
