#include "bdistill/errors.hpp"
#include "bdistill/iql.hpp"

#include "oracles.hpp"

#include <doctest.h>

using namespace bdistill;

namespace {

struct Instance {
    TokenMdp mdp;
    Policy teacher;
    CandidateSets sets;
    Policy projected;
    TransitionBatch exact;
};

Instance make_instance(std::uint64_t seed, double p, int V = 5, int H = 3, double gamma = 0.9)
{
    TokenMdp mdp = oracle::random_mdp(V, H, gamma, seed);
    Policy teacher = soft_value_iteration(mdp).policy;
    CandidateSets sets = build_candidate_sets(mdp, teacher, p);
    Policy projected = project_policy(teacher, sets);
    TransitionBatch exact = exact_batch(mdp, occupancy_measure(mdp, projected, uniform_start(mdp)));
    return {std::move(mdp), std::move(teacher), std::move(sets), std::move(projected), std::move(exact)};
}

IqlConfig config_for(double alpha, double gamma, double p)
{
    IqlConfig c;
    c.alpha = alpha;
    c.gamma = gamma;
    c.p = p;
    return c;
}

// Restricted logsumexp written out directly.
double oracle_value(const TokenMdp& mdp, const QTable& q, const CandidateSets& sets, StateId s)
{
    if (mdp.is_terminal(s)) {
        return 0.0;
    }
    double z = 0.0;
    for (int a = 0; a < mdp.vocab_size; ++a) {
        if (sets.contains(s, a)) {
            z += std::exp(q(s, a));
        }
    }
    return std::log(z);
}

// phi(Q(s,a) - gamma V(s')) - (V(s) - gamma V(s')) for one in-support transition.
double oracle_integrand(const TokenMdp& mdp, const QTable& q, const CandidateSets& sets, double alpha, StateId s,
                        ActionId a, StateId t)
{
    const double vs = oracle_value(mdp, q, sets, s);
    const double vt = oracle_value(mdp, q, sets, t);
    const double x = q(s, a) - mdp.gamma * vt;
    return x - x * x / (4.0 * alpha) - (vs - mdp.gamma * vt);
}

std::vector<SampledTransition> rollout(const TokenMdp& mdp, const Policy& pi, StateId start, std::mt19937_64& rng)
{
    std::vector<SampledTransition> out;
    StateId s = start;
    for (int step = 0; !mdp.is_terminal(s); ++step) {
        const int a = oracle::sample_action(pi, s, rng);
        out.push_back({s, a, mdp.next(s, a), step});
        s = mdp.next(s, a);
    }
    return out;
}

} // namespace

TEST_CASE("phi examples")
{
    CHECK(phi(0.0, 0.1) == 0.0);
    CHECK(phi(0.2, 0.1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(phi(1.0, 0.1) == doctest::Approx(-1.5).epsilon(1e-15));
    // Maximized at 2 alpha, where the derivative vanishes.
    CHECK(phi_derivative(0.2, 0.1) == 0.0);
    CHECK(phi(0.2, 0.1) > phi(0.19, 0.1));
    CHECK(phi(0.2, 0.1) > phi(0.21, 0.1));
    for (double x : {-10.0, -1.0, 0.5, 10.0}) {
        CHECK(std::abs(phi(x, 1e12) - x) <= 1e-9);
    }
}

TEST_CASE("config validation")
{
    CHECK_NOTHROW(validate(IqlConfig{}));
    IqlConfig c;
    c.alpha = 0.0;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = IqlConfig{};
    c.gamma = 1.0;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = IqlConfig{};
    c.p = 0.0;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = IqlConfig{};
    c.learning_rate = -1.0;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = IqlConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(validate(c), DomainError);
}

TEST_CASE("masked view")
{
    const TokenMdp mdp = make_mdp(3, 1, 0.9, {0}, IndexTable::Constant(2, 3, 1), QTable::Zero(2, 3), 1);
    const Policy teacher{(QTable(2, 3) << 0.4, 0.1, 0.5, 1.0 / 3, 1.0 / 3, 1.0 / 3).finished()};
    const CandidateSets sets = build_candidate_sets(mdp, teacher, 0.9);
    REQUIRE(sets.at(0) == std::vector<ActionId>{2, 0});
    const QTable q{{1.0, 2.0, 3.0}, {0.0, 0.0, 0.0}};
    const MaskedQ<double> view = apply_mask(q, sets);

    const VTable sm = view.softmax(0);
    CHECK(sm[0] == doctest::Approx(0.1192).epsilon(1e-4));
    CHECK(sm[1] == 0.0);
    CHECK(sm[2] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(sm[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + std::exp(3.0))).epsilon(1e-15));
    CHECK(view(0, 2) == 3.0);
    CHECK_THROWS_AS(view(0, 1), MaskedAccessError);

    const CandidateSets single = build_candidate_sets(mdp, Policy{(QTable(2, 3) << 0, 0, 1, 0, 0, 1).finished()}, 0.5);
    CHECK(apply_mask(q, single).logsumexp(0) == 3.0);

    const CandidateSets full = full_candidate_sets(mdp);
    const MaskedQ<double> raw = apply_mask(q, full);
    for (int a = 0; a < 3; ++a) {
        CHECK(raw(0, a) == q(0, a));
    }
    CHECK_THROWS_AS(apply_mask(QTable(QTable::Zero(3, 3)), full), DomainError);
}

TEST_CASE("projected value")
{
    const TokenMdp mdp = make_mdp(3, 1, 0.9, {0}, IndexTable::Constant(2, 3, 1), QTable::Zero(2, 3), 1);
    const Policy teacher{(QTable(2, 3) << 0.45, 0.45, 0.1, 1.0 / 3, 1.0 / 3, 1.0 / 3).finished()};
    const CandidateSets two = build_candidate_sets(mdp, teacher, 0.8);
    REQUIRE(two.at(0).size() == 2);
    CHECK(projected_value(mdp, QTable::Zero(2, 3), two, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(projected_value(mdp, QTable::Constant(2, 3, 7.0), two, 1) == 0.0);

    const CandidateSets one = build_candidate_sets(mdp, teacher, 0.4);
    REQUIRE(one.at(0).size() == 1);
    const QTable q = oracle::random_table(2, 3, 4);
    CHECK(projected_value(mdp, q, one, 0) == q(0, one.at(0)[0]));

    // Expectation form E_{proj pi_Q}[Q - log proj pi_Q] against the restricted logsumexp.
    const Instance inst = make_instance(2, 0.7, 6);
    const QTable r = oracle::random_table(inst.mdp.num_states(), 6, 5, 3.0);
    for (StateId s = 0; s < inst.mdp.terminal; ++s) {
        const VTable pi = apply_mask(r, inst.sets).softmax(s);
        double expectation = 0.0;
        for (ActionId a : inst.sets.at(s)) {
            expectation += pi[a] * (r(s, a) - std::log(pi[a]));
        }
        CHECK(std::abs(projected_value(inst.mdp, r, inst.sets, s) - expectation) <= 1e-12);
    }
}

TEST_CASE("shift covariance of the masked row")
{
    const Instance inst = make_instance(3, 0.6, 6);
    const QTable q = oracle::random_table(inst.mdp.num_states(), 6, 8);
    const StateId s = inst.mdp.prompts[0];
    QTable shifted = q;
    for (ActionId a : inst.sets.at(s)) {
        shifted(s, a) += 4.25;
    }
    CHECK(projected_value(inst.mdp, shifted, inst.sets, s) ==
          doctest::Approx(projected_value(inst.mdp, q, inst.sets, s) + 4.25).epsilon(1e-14));
    const VTable before = apply_mask(q, inst.sets).softmax(s);
    const VTable after = apply_mask(shifted, inst.sets).softmax(s);
    CHECK((before - after).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("objective on a single transition")
{
    // V=2, H=2: root 0 -> child 1 under action 0; both non-terminal.
    IndexTable next(4, 2);
    next << 1, 2, 3, 3, 3, 3, 3, 3;
    const TokenMdp mdp = make_mdp(2, 2, 0.9, {0}, next, QTable::Zero(4, 2), 3);
    const CandidateSets full = full_candidate_sets(mdp);
    TransitionBatch one{{{0, 0, 1, 1.0}}};
    const IqlConfig c = config_for(0.1, 0.9, 1.0);
    const ObjectiveBreakdown j = iql_objective(QTable(QTable::Zero(4, 2)), one, mdp, full, c);
    CHECK(j.term_phi == doctest::Approx(phi(-0.9 * std::log(2.0), 0.1)).epsilon(1e-15));
    CHECK(j.term_td == doctest::Approx(0.1 * std::log(2.0)).epsilon(1e-14));
    CHECK(std::abs(j.total - (j.term_phi - j.term_td)) <= 1e-12);
    CHECK(j.n_samples_used == 1);
    CHECK(j.n_samples_skipped == 0);

    CHECK_THROWS_AS(iql_objective(QTable(QTable::Zero(4, 2)), TransitionBatch{}, mdp, full, c), DomainError);
}

TEST_CASE("objective matches a direct sum over the batch")
{
    const Instance inst = make_instance(5, 0.8, 6);
    const IqlConfig c = config_for(0.5, 0.9, 0.8);
    const QTable q = oracle::random_table(inst.mdp.num_states(), 6, 11);
    double expected = 0.0;
    for (const Transition& t : inst.exact.items) {
        expected += t.weight * oracle_integrand(inst.mdp, q, inst.sets, c.alpha, t.state, t.action, t.next);
    }
    const ObjectiveBreakdown j = iql_objective(q, inst.exact, inst.mdp, inst.sets, c);
    CHECK(j.total == doctest::Approx(expected).epsilon(1e-12));
    // Non-terminal pairs carry 1 - gamma^H of the normalized occupancy; the rest sits at the terminal.
    CHECK(inst.exact.total_weight() == doctest::Approx(1.0 - std::pow(0.9, 3)).epsilon(1e-12));
}

TEST_CASE("telescoped and untelescoped forms agree on exact batches")
{
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Instance inst = make_instance(seed, 0.7, 5);
        const IqlConfig c = config_for(0.1, 0.9, 0.7);
        const QTable q = oracle::random_table(inst.mdp.num_states(), 5, seed + 40, 2.0);
        const double telescoped = iql_objective(q, inst.exact, inst.mdp, inst.sets, c).total;
        const double direct =
            iql_objective_untelescoped(q, inst.exact, inst.mdp, inst.sets, uniform_start(inst.mdp), c);
        CHECK(std::abs(telescoped - direct) <= 1e-8);

        double start_value = 0.0;
        for (StateId s0 : inst.mdp.prompts) {
            start_value += oracle_value(inst.mdp, q, inst.sets, s0) / static_cast<double>(inst.mdp.prompts.size());
        }
        CHECK(iql_objective(q, inst.exact, inst.mdp, inst.sets, c).term_td ==
              doctest::Approx(0.1 * start_value).epsilon(1e-10));
    }
}

TEST_CASE("unregularized full-set limit")
{
    const TokenMdp mdp = oracle::random_mdp(4, 3, 0.9, 6);
    const Policy teacher = soft_value_iteration(mdp).policy;
    const CandidateSets full = full_candidate_sets(mdp);
    const TransitionBatch data = exact_batch(mdp, occupancy_measure(mdp, teacher, uniform_start(mdp)));
    const QTable q = oracle::random_table(mdp.num_states(), 4, 7);
    // E[Q(s,a) - gamma V(s')] - E[V(s) - gamma V(s')] = E[Q(s,a) - V(s)].
    double expected = 0.0;
    for (const Transition& t : data.items) {
        expected += t.weight * (q(t.state, t.action) - oracle_value(mdp, q, full, t.state));
    }
    const IqlConfig c = config_for(1e12, 0.9, 1.0);
    CHECK(std::abs(iql_objective(q, data, mdp, full, c).total - expected) <= 1e-6);
}

TEST_CASE("sampled objective is an unbiased estimate of the exact one")
{
    const Instance inst = make_instance(7, 0.8, 4);
    const IqlConfig c = config_for(0.1, 0.9, 0.8);
    const QTable q = oracle::random_table(inst.mdp.num_states(), 4, 3);
    const double exact = iql_objective(q, inst.exact, inst.mdp, inst.sets, c).total;

    constexpr int n = 1'000'000;
    std::mt19937_64 rng(99);
    std::vector<SampledTransition> samples;
    samples.reserve(3 * n);
    int which = 0;
    const auto est = oracle::monte_carlo(n, [&] {
        const StateId start = inst.mdp.prompts[static_cast<std::size_t>(which++) % inst.mdp.prompts.size()];
        const auto traj = rollout(inst.mdp, inst.projected, start, rng);
        double g = 0.0;
        for (const SampledTransition& t : traj) {
            g += (1.0 - c.gamma) * std::pow(c.gamma, t.step) *
                 oracle_integrand(inst.mdp, q, inst.sets, c.alpha, t.state, t.action, t.next);
            samples.push_back(t);
        }
        return g;
    });
    CHECK(std::abs(est.mean - exact) <= 3.0 * est.stderr_);

    const TransitionBatch sampled = sampled_batch(samples, n, c.gamma);
    const ObjectiveBreakdown j = iql_objective(q, sampled, inst.mdp, inst.sets, c);
    CHECK(j.total == doctest::Approx(est.mean).epsilon(1e-9));
    CHECK(j.n_samples_skipped == 0);
    CHECK_THROWS_AS(sampled_batch(samples, 0, c.gamma), DomainError);
}

TEST_CASE("off-support samples are skipped, not read")
{
    const Instance inst = make_instance(8, 0.5, 5);
    const IqlConfig c = config_for(0.1, 0.9, 0.5);
    // Data from the unprojected teacher includes off-support actions.
    const TransitionBatch data =
        exact_batch(inst.mdp, occupancy_measure(inst.mdp, inst.teacher, uniform_start(inst.mdp)));
    QTable q = oracle::random_table(inst.mdp.num_states(), 5, 9);
    const ObjectiveBreakdown j = iql_objective(q, data, inst.mdp, inst.sets, c);
    CHECK(j.n_samples_skipped > 0);
    CHECK(j.n_samples_used + j.n_samples_skipped == data.items.size());

    const QTable g = iql_gradient(q, data, inst.mdp, inst.sets, c);
    // Off-support entries carry no information: poison them and nothing changes.
    QTable poisoned = q;
    for (StateId s = 0; s < inst.mdp.num_states(); ++s) {
        for (int a = 0; a < 5; ++a) {
            if (!inst.sets.contains(s, a)) {
                CHECK(g(s, a) == 0.0);
                poisoned(s, a) = std::numeric_limits<double>::quiet_NaN();
            }
        }
    }
    const ObjectiveBreakdown jp = iql_objective(poisoned, data, inst.mdp, inst.sets, c);
    CHECK(jp.total == j.total);
    const QTable gp = iql_gradient(poisoned, data, inst.mdp, inst.sets, c);
    CHECK(gp == g);

    TransitionBatch off;
    for (const Transition& t : data.items) {
        if (!inst.sets.contains(t.state, t.action)) {
            off.items.push_back(t);
        }
    }
    REQUIRE_FALSE(off.items.empty());
    CHECK_THROWS_AS(iql_objective(q, off, inst.mdp, inst.sets, c), DomainError);
}

TEST_CASE("gamma = 0 gradient collapses to the chain rule")
{
    const TokenMdp mdp = make_mdp(3, 1, 0.0, {0}, IndexTable::Constant(2, 3, 1), QTable::Zero(2, 3), 1);
    const CandidateSets full = full_candidate_sets(mdp);
    const QTable q{{0.3, -0.2, 0.7}, {0.0, 0.0, 0.0}};
    const IqlConfig c = config_for(0.1, 0.0, 1.0);
    const QTable g = iql_gradient(q, TransitionBatch{{{0, 2, 1, 1.0}}}, mdp, full, c);
    const VTable pi = apply_mask(q, full).softmax(0);
    CHECK(g(0, 2) == doctest::Approx(phi_derivative(0.7, 0.1) - pi[2]).epsilon(1e-14));
    CHECK(g(0, 0) == doctest::Approx(-pi[0]).epsilon(1e-14));
    CHECK(g(0, 1) == doctest::Approx(-pi[1]).epsilon(1e-14));
    CHECK(g.row(1).isZero());
}

TEST_CASE("analytic gradient matches central differences")
{
    std::mt19937_64 rng(17);
    int configs = 0;
    for (double alpha : {0.1, 1.0, 10.0}) {
        for (double gamma : {0.0, 0.9, 0.99}) {
            for (double p : {0.5, 0.9}) {
                const Instance inst = make_instance(rng() % 1000, p, 4, 3, gamma);
                const IqlConfig c = config_for(alpha, gamma, p);
                const QTable q = oracle::random_table(inst.mdp.num_states(), 4, rng() % 1000, 2.0);
                const GradientCheck check = finite_diff_check(q, inst.exact, inst.mdp, inst.sets, c, 1e-5);
                CHECK(check.max_relative_error <= 1e-5);
                CHECK(check.entries_checked == static_cast<std::size_t>(inst.sets.support_size()));
                ++configs;
            }
        }
    }
    CHECK(configs == 18);
}

TEST_CASE("finite-difference harness on a quadratic")
{
    const QTable q = oracle::random_table(3, 2, 1);
    const QTable analytic = 2.0 * q.array() - 1.0;
    const ExtendedObjective f = [](const Table<long double>& x) {
        return (x.array() * x.array() - x.array()).sum();
    };
    const std::vector<std::pair<StateId, ActionId>> all{{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}, {2, 1}};
    const GradientCheck check = central_difference_check(f, q, analytic, all, 1e-5);
    CHECK(check.max_relative_error <= 1e-7);
    CHECK(check.entries_checked == 6);

    const Instance inst = make_instance(1, 0.8, 4);
    CHECK_THROWS_AS(finite_diff_check(q, inst.exact, inst.mdp, inst.sets, IqlConfig{}, 1e-2), DomainError);
}

TEST_CASE("training with a zero learning rate leaves Q unchanged")
{
    const Instance inst = make_instance(4, 0.8, 4);
    IqlConfig c = config_for(0.1, 0.9, 0.8);
    c.learning_rate = 0.0;
    c.epochs = 5;
    c.exact_mode = true;
    const TrainResult r = train_iql(inst.mdp, inst.exact, inst.sets, c);
    CHECK(r.q.isZero());
    const auto j = r.metrics.column("J_total");
    REQUIRE(j.size() == 6);
    for (double x : j) {
        CHECK(x == j.front());
    }
    CHECK(r.metrics.columns() == train_metric_columns());
}

TEST_CASE("exact training is monotone and reaches a stationary point")
{
    const Instance inst = make_instance(6, 0.8, 4);
    IqlConfig c = config_for(0.1, 0.9, 0.8);
    c.learning_rate = 0.5;
    c.epochs = 3000;
    c.exact_mode = true;
    const TrainResult r = train_iql(inst.mdp, inst.exact, inst.sets, c);
    const auto j = r.metrics.column("J_total");
    for (std::size_t i = 1; i < j.size(); ++i) {
        CHECK(j[i] >= j[i - 1] - 1e-9);
    }
    CHECK(j.back() > j.front());

    const GradientCheck check = finite_diff_check(r.q, inst.exact, inst.mdp, inst.sets, c, 1e-5);
    CHECK(check.max_absolute_error <= 1e-6);
    CHECK(r.metrics.column("grad_norm").back() < r.metrics.column("grad_norm").front());
}

TEST_CASE("sampled training is seeded and respects the Q floor")
{
    const Instance inst = make_instance(10, 0.8, 4);
    std::mt19937_64 rng(5);
    std::vector<SampledTransition> samples;
    for (int i = 0; i < 200; ++i) {
        const auto traj = rollout(inst.mdp, inst.projected, inst.mdp.prompts[0], rng);
        samples.insert(samples.end(), traj.begin(), traj.end());
    }
    const TransitionBatch data = sampled_batch(samples, 200, 0.9);
    IqlConfig c = config_for(0.1, 0.9, 0.8);
    c.learning_rate = 5.0;
    c.batch_size = 16;
    c.epochs = 20;
    c.q_min = -0.5;
    c.seed = 3;
    const TrainResult a = train_iql(inst.mdp, data, inst.sets, c);
    const TrainResult b = train_iql(inst.mdp, data, inst.sets, c);
    CHECK(a.q == b.q);
    double lowest = std::numeric_limits<double>::infinity();
    for (StateId s = 0; s < inst.mdp.num_states(); ++s) {
        for (ActionId act : inst.sets.at(s)) {
            lowest = std::min(lowest, a.q(s, act));
        }
    }
    CHECK(lowest >= -0.5);
    CHECK(lowest == -0.5);

    c.seed = 4;
    CHECK(train_iql(inst.mdp, data, inst.sets, c).q != a.q);
}

TEST_CASE("divergent training aborts with a numerical error")
{
    const Instance inst = make_instance(11, 0.8, 4);
    IqlConfig c = config_for(0.1, 0.9, 0.8);
    c.learning_rate = 1e300;
    c.epochs = 3;
    CHECK_THROWS_AS(train_iql(inst.mdp, inst.exact, inst.sets, c), NumericalError);
    CHECK_THROWS_AS(train_iql(inst.mdp, TransitionBatch{}, inst.sets, IqlConfig{}), DomainError);
}

TEST_CASE("behavior-cloning initialization favors frequent actions")
{
    const Instance inst = make_instance(12, 0.8, 4);
    IqlConfig c = config_for(0.1, 0.9, 0.8);
    c.init_from_bc = true;
    const QTable q0 = initial_q(inst.mdp, inst.exact, inst.sets, c);
    for (StateId s0 : inst.mdp.prompts) {
        int best_q = inst.sets.at(s0)[0];
        for (ActionId a : inst.sets.at(s0)) {
            if (q0(s0, a) > q0(s0, best_q)) {
                best_q = a;
            }
        }
        CHECK(best_q == inst.sets.at(s0)[0]);
    }
    c.init_from_bc = false;
    CHECK(initial_q(inst.mdp, inst.exact, inst.sets, c).isZero());
}
