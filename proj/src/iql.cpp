#include "bdistill/iql.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace bdistill {

namespace {

template <typename Scalar>
std::vector<Scalar> masked_values(const TokenMdp& mdp, const MaskedQ<Scalar>& mq)
{
    std::vector<Scalar> v(static_cast<std::size_t>(mdp.num_states()), Scalar(0));
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (!mdp.is_terminal(s) && !mq.sets().at(s).empty()) {
            v[static_cast<std::size_t>(s)] = mq.logsumexp(s);
        }
    }
    return v;
}

std::vector<std::pair<StateId, ActionId>> supported_entries(const TokenMdp& mdp, const CandidateSets& sets)
{
    std::vector<std::pair<StateId, ActionId>> out;
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        for (ActionId a : sets.at(s)) {
            out.emplace_back(s, a);
        }
    }
    return out;
}

void clamp_supported(QTable& q, const CandidateSets& sets, double q_min)
{
    for (int s = 0; s < sets.num_states(); ++s) {
        for (ActionId a : sets.at(s)) {
            q(s, a) = std::max(q(s, a), q_min);
        }
    }
}

} // namespace

void validate(const IqlConfig& config)
{
    if (!(config.alpha > 0.0)) {
        throw DomainError("alpha must be positive");
    }
    if (!(config.gamma >= 0.0 && config.gamma < 1.0)) {
        throw DomainError("gamma must lie in [0, 1)");
    }
    if (!(config.p > 0.0 && config.p <= 1.0)) {
        throw DomainError("p must lie in (0, 1]");
    }
    if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
        throw DomainError("learning_rate must be non-negative and finite");
    }
    if (config.batch_size < 1 || config.epochs < 0) {
        throw DomainError("batch_size must be positive and epochs non-negative");
    }
    if (!std::isfinite(config.q_min)) {
        throw DomainError("q_min must be finite");
    }
}

double projected_value(const TokenMdp& mdp, const QTable& q, const CandidateSets& sets, StateId s)
{
    if (mdp.is_terminal(s)) {
        return 0.0;
    }
    return apply_mask(q, sets).logsumexp(s);
}

double TransitionBatch::total_weight() const
{
    double w = 0.0;
    for (const Transition& t : items) {
        w += t.weight;
    }
    return w;
}

TransitionBatch exact_batch(const TokenMdp& mdp, const OccupancyMeasure& occupancy)
{
    TransitionBatch batch;
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            const double mass = occupancy.mass(s, a);
            if (mass > 0.0) {
                batch.items.push_back({s, a, mdp.next(s, a), (1.0 - mdp.gamma) * mass});
            }
        }
    }
    return batch;
}

TransitionBatch sampled_batch(std::span<const SampledTransition> samples, std::size_t n_trajectories,
                              double gamma)
{
    if (n_trajectories == 0) {
        throw DomainError("sampled batch needs at least one trajectory");
    }
    TransitionBatch batch;
    batch.items.reserve(samples.size());
    const double scale = (1.0 - gamma) / static_cast<double>(n_trajectories);
    for (const SampledTransition& t : samples) {
        batch.items.push_back({t.state, t.action, t.next, scale * std::pow(gamma, t.step)});
    }
    return batch;
}

TransitionBatch minibatch(const TransitionBatch& full, std::span<const std::size_t> indices)
{
    TransitionBatch out;
    out.items.reserve(indices.size());
    const double scale = static_cast<double>(full.items.size()) / static_cast<double>(indices.size());
    for (std::size_t i : indices) {
        Transition t = full.items.at(i);
        t.weight *= scale;
        out.items.push_back(t);
    }
    return out;
}

template <typename Scalar>
BasicObjectiveBreakdown<Scalar> iql_objective(const Table<Scalar>& q, const TransitionBatch& data,
                                              const TokenMdp& mdp, const CandidateSets& sets,
                                              const IqlConfig& config)
{
    if (data.items.empty()) {
        throw DomainError("empty batch");
    }
    const MaskedQ<Scalar> mq(q, sets);
    const std::vector<Scalar> v = masked_values(mdp, mq);
    const Scalar gamma = config.gamma;
    const Scalar alpha = config.alpha;

    BasicObjectiveBreakdown<Scalar> out;
    for (const Transition& t : data.items) {
        const Scalar w = t.weight;
        const Scalar v_next = v[static_cast<std::size_t>(t.next)];
        out.term_td += w * (v[static_cast<std::size_t>(t.state)] - gamma * v_next);
        if (mq.supported(t.state, t.action)) {
            out.term_phi += w * phi(mq(t.state, t.action) - gamma * v_next, alpha);
            ++out.n_samples_used;
        } else {
            ++out.n_samples_skipped;
        }
    }
    if (out.n_samples_used == 0) {
        throw DomainError("empty effective batch: every sampled action lies outside the candidate sets");
    }
    out.total = out.term_phi - out.term_td;
    return out;
}

template <typename Scalar>
Table<Scalar> iql_gradient(const Table<Scalar>& q, const TransitionBatch& data, const TokenMdp& mdp,
                           const CandidateSets& sets, const IqlConfig& config)
{
    const MaskedQ<Scalar> mq(q, sets);
    const std::vector<Scalar> v = masked_values(mdp, mq);
    const Scalar gamma = config.gamma;
    const Scalar alpha = config.alpha;

    // Direct dphi/dQ(s,a) terms plus per-state coefficients on dV(s)/dQ(s,.) = softmax over the set.
    Table<Scalar> grad = Table<Scalar>::Zero(q.rows(), q.cols());
    std::vector<Scalar> value_coeff(static_cast<std::size_t>(mdp.num_states()), Scalar(0));
    for (const Transition& t : data.items) {
        const Scalar w = t.weight;
        Scalar next_coeff = gamma * w;
        if (mq.supported(t.state, t.action)) {
            const Scalar d = w * phi_derivative(mq(t.state, t.action) - gamma * v[static_cast<std::size_t>(t.next)], alpha);
            grad(t.state, t.action) += d;
            next_coeff -= gamma * d;
        }
        value_coeff[static_cast<std::size_t>(t.state)] -= w;
        value_coeff[static_cast<std::size_t>(t.next)] += next_coeff;
    }
    for (int s = 0; s < mdp.num_states(); ++s) {
        const Scalar c = value_coeff[static_cast<std::size_t>(s)];
        if (mdp.is_terminal(s) || c == Scalar(0) || sets.at(s).empty()) {
            continue;
        }
        grad.row(s) += c * mq.softmax(s).transpose();
    }
    return grad;
}

template BasicObjectiveBreakdown<double> iql_objective(const Table<double>&, const TransitionBatch&,
                                                       const TokenMdp&, const CandidateSets&, const IqlConfig&);
template BasicObjectiveBreakdown<long double> iql_objective(const Table<long double>&, const TransitionBatch&,
                                                            const TokenMdp&, const CandidateSets&,
                                                            const IqlConfig&);
template Table<double> iql_gradient(const Table<double>&, const TransitionBatch&, const TokenMdp&,
                                    const CandidateSets&, const IqlConfig&);
template Table<long double> iql_gradient(const Table<long double>&, const TransitionBatch&, const TokenMdp&,
                                         const CandidateSets&, const IqlConfig&);

double iql_objective_untelescoped(const QTable& q, const TransitionBatch& data, const TokenMdp& mdp,
                                  const CandidateSets& sets, const VTable& start_dist, const IqlConfig& config)
{
    const ObjectiveBreakdown parts = iql_objective(q, data, mdp, sets, config);
    double initial = 0.0;
    for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
        initial += start_dist[static_cast<Eigen::Index>(i)] * projected_value(mdp, q, sets, mdp.prompts[i]);
    }
    return parts.term_phi - (1.0 - config.gamma) * initial;
}

GradientCheck central_difference_check(const ExtendedObjective& objective, const QTable& q,
                                       const QTable& analytic,
                                       std::span<const std::pair<StateId, ActionId>> entries, double epsilon)
{
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
        throw DomainError("finite-difference epsilon must lie in [1e-7, 1e-3]");
    }
    GradientCheck check;
    Table<long double> probe = q.cast<long double>();
    const long double eps = epsilon;
    for (const auto& [s, a] : entries) {
        const long double base = probe(s, a);
        probe(s, a) = base + eps;
        const long double up = objective(probe);
        probe(s, a) = base - eps;
        const long double down = objective(probe);
        probe(s, a) = base;
        const double numeric = static_cast<double>((up - down) / (2 * eps));
        const double exact = analytic(s, a);
        const double err = std::abs(numeric - exact);
        const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
        check.max_absolute_error = std::max(check.max_absolute_error, err);
        check.max_relative_error = std::max(check.max_relative_error, err / denom);
        ++check.entries_checked;
    }
    return check;
}

GradientCheck finite_diff_check(const QTable& q, const TransitionBatch& data, const TokenMdp& mdp,
                                const CandidateSets& sets, const IqlConfig& config, double epsilon,
                                std::size_t max_entries, std::uint64_t seed)
{
    std::vector<std::pair<StateId, ActionId>> entries = supported_entries(mdp, sets);
    if (entries.size() > max_entries) {
        std::mt19937_64 rng(seed);
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(max_entries);
    }
    const QTable analytic = iql_gradient(q, data, mdp, sets, config);
    const ExtendedObjective objective = [&](const Table<long double>& x) {
        return iql_objective(x, data, mdp, sets, config).total;
    };
    return central_difference_check(objective, q, analytic, entries, epsilon);
}

std::vector<std::string> train_metric_columns()
{
    return {"epoch",        "J_total",  "term_phi",           "term_td",    "grad_norm",
            "n_skipped",    "kl_to_proj_teacher", "return_gap", "j_pt", "learning_rate"};
}

QTable initial_q(const TokenMdp& mdp, const TransitionBatch& data, const CandidateSets& sets,
                 const IqlConfig& config)
{
    QTable q = QTable::Zero(mdp.num_states(), mdp.vocab_size);
    if (!config.init_from_bc) {
        return q;
    }
    QTable counts = QTable::Zero(mdp.num_states(), mdp.vocab_size);
    for (const Transition& t : data.items) {
        counts(t.state, t.action) += t.weight;
    }
    for (int s = 0; s < mdp.num_states(); ++s) {
        const auto& set = sets.at(s);
        if (set.empty()) {
            continue;
        }
        double total = 0.0;
        for (ActionId a : set) {
            total += counts(s, a);
        }
        const double delta = total > 0.0 ? 1e-3 * total : 1.0;
        for (ActionId a : set) {
            q(s, a) = std::max(config.q_min, std::log((counts(s, a) + delta) / (total + delta * set.size())));
        }
    }
    return q;
}

TrainResult train_iql(const TokenMdp& mdp, const TransitionBatch& data, const CandidateSets& sets,
                      const IqlConfig& config, const TrainHooks& hooks)
{
    validate(config);
    if (data.items.empty()) {
        throw DomainError("training data is empty");
    }

    const double aux_weight = hooks.auxiliary.evaluate ? hooks.auxiliary.weight : 0.0;
    auto aux_value = [&](const QTable& q, QTable* grad) {
        return aux_weight != 0.0 ? hooks.auxiliary.evaluate(q, grad) : 0.0;
    };
    auto combined = [&](const QTable& q) {
        return iql_objective(q, data, mdp, sets, config).total + aux_weight * aux_value(q, nullptr);
    };
    auto full_gradient = [&](const TransitionBatch& batch, const QTable& q) {
        QTable g = iql_gradient(q, batch, mdp, sets, config);
        if (aux_weight != 0.0) {
            QTable aux = QTable::Zero(q.rows(), q.cols());
            aux_value(q, &aux);
            g += aux_weight * aux;
        }
        return g;
    };

    TrainResult result{initial_q(mdp, data, sets, config), MetricsLog(train_metric_columns())};
    QTable& q = result.q;

    auto record = [&](int epoch, double grad_norm, double lr) {
        const ObjectiveBreakdown j = iql_objective(q, data, mdp, sets, config);
        if (!std::isfinite(j.total)) {
            std::ostringstream msg;
            msg << "non-finite objective at epoch " << epoch << " (learning rate " << lr
                << ", max |Q| = " << q.cwiseAbs().maxCoeff() << ", term_phi = " << j.term_phi
                << ", term_td = " << j.term_td << ")";
            throw NumericalError(msg.str());
        }
        const EpochEvaluation eval = hooks.on_epoch ? hooks.on_epoch(epoch, q) : EpochEvaluation{};
        const double j_pt = aux_weight != 0.0 ? aux_value(q, nullptr) : 0.0;
        result.metrics.append({static_cast<double>(epoch), j.total, j.term_phi, j.term_td, grad_norm,
                               static_cast<double>(j.n_samples_skipped), eval.kl_to_proj_teacher,
                               eval.return_gap, j_pt, lr});
    };

    record(0, full_gradient(data, q).norm(), 0.0);

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(data.items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        double grad_norm = 0.0;
        double used_lr = config.learning_rate;
        if (config.exact_mode) {
            const QTable g = full_gradient(data, q);
            grad_norm = g.norm();
            const double current = combined(q);
            double lr = config.learning_rate;
            bool accepted = false;
            for (int halving = 0; halving <= 60; ++halving, lr *= 0.5) {
                QTable candidate = q + lr * g;
                clamp_supported(candidate, sets, config.q_min);
                const double value = combined(candidate);
                if (!config.step_halving || value >= current) {
                    q = std::move(candidate);
                    accepted = true;
                    break;
                }
            }
            used_lr = accepted ? lr : 0.0;
        } else {
            std::shuffle(order.begin(), order.end(), rng);
            const std::size_t bs = static_cast<std::size_t>(config.batch_size);
            std::size_t steps = 0;
            for (std::size_t start = 0; start < order.size(); start += bs) {
                const std::size_t stop = std::min(order.size(), start + bs);
                const TransitionBatch mb =
                    minibatch(data, std::span<const std::size_t>(order.data() + start, stop - start));
                const QTable g = full_gradient(mb, q);
                grad_norm += g.norm();
                ++steps;
                q += config.learning_rate * g;
                clamp_supported(q, sets, config.q_min);
            }
            grad_norm /= static_cast<double>(std::max<std::size_t>(steps, 1));
        }
        record(epoch, grad_norm, used_lr);
    }
    return result;
}

} // namespace bdistill
