#include "bdistill/errors.hpp"
#include "bdistill/top_p.hpp"

#include "oracles.hpp"

#include <doctest.h>

using namespace bdistill;

namespace {

// One state, V actions, every action loops back: a single teacher row to filter.
TokenMdp one_row(int V, double gamma = 0.9)
{
    return make_mdp(V, 1, gamma, {0}, IndexTable::Zero(1, V), QTable::Zero(1, V), -1);
}

Policy row_policy(std::initializer_list<double> probs)
{
    Policy pi{QTable(1, static_cast<Eigen::Index>(probs.size()))};
    Eigen::Index i = 0;
    for (double x : probs) {
        pi.probs(0, i++) = x;
    }
    return pi;
}

TokenMdp teacher_instance(std::uint64_t seed, Policy& teacher, int V = 8, int H = 3, double gamma = 0.9)
{
    TokenMdp mdp = oracle::random_mdp(V, H, gamma, seed);
    teacher = soft_value_iteration(mdp).policy;
    return mdp;
}

} // namespace

TEST_CASE("candidate sets are the smallest descending prefix reaching p")
{
    const TokenMdp mdp = one_row(4);
    const Policy pi = row_policy({0.5, 0.3, 0.15, 0.05});

    const CandidateSets p8 = build_candidate_sets(mdp, pi, 0.8);
    CHECK(p8.at(0) == std::vector<ActionId>{0, 1});
    CHECK(p8.realized_mass[0] == doctest::Approx(0.8).epsilon(1e-15));

    const CandidateSets p9 = build_candidate_sets(mdp, pi, 0.9);
    CHECK(p9.at(0) == std::vector<ActionId>{0, 1, 2});
    CHECK(p9.realized_mass[0] == doctest::Approx(0.95).epsilon(1e-15));

    const CandidateSets p1 = build_candidate_sets(mdp, pi, 1.0);
    CHECK(p1.at(0).size() == 4);
    CHECK(p1.realized_mass[0] == doctest::Approx(1.0).epsilon(1e-15));

    CHECK_THROWS_AS(build_candidate_sets(mdp, pi, 0.0), DomainError);
    CHECK_THROWS_AS(build_candidate_sets(mdp, pi, -0.2), DomainError);
    CHECK_THROWS_AS(build_candidate_sets(mdp, pi, 1.1), DomainError);
}

TEST_CASE("candidate order breaks ties by ascending action index")
{
    const TokenMdp mdp = one_row(4);
    const CandidateSets sets = build_candidate_sets(mdp, row_policy({0.2, 0.3, 0.2, 0.3}), 0.7);
    CHECK(sets.at(0) == std::vector<ActionId>{1, 3, 0});
    CHECK(sets.contains(0, 0));
    CHECK_FALSE(sets.contains(0, 2));
}

TEST_CASE("candidate set invariants on random teachers")
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const TokenMdp mdp = oracle::random_mdp(6, 3, 0.9, seed, 2);
        const Policy pi = oracle::random_policy(mdp, seed + 50, 1.5);
        for (double p : {0.3, 0.5, 0.8, 0.95}) {
            const CandidateSets sets = build_candidate_sets(mdp, pi, p);
            for (StateId s = 0; s < mdp.num_states(); ++s) {
                if (mdp.is_terminal(s)) {
                    CHECK(sets.at(s).empty());
                    continue;
                }
                const auto& set = sets.at(s);
                REQUIRE_FALSE(set.empty());
                double mass = 0.0;
                for (std::size_t i = 0; i < set.size(); ++i) {
                    mass += pi.probs(s, set[i]);
                    if (i > 0) {
                        CHECK(pi.probs(s, set[i - 1]) >= pi.probs(s, set[i]));
                    }
                }
                CHECK(mass == doctest::Approx(sets.realized_mass[s]).epsilon(1e-14));
                CHECK(sets.realized_mass[s] >= p - kMassSlack);
                CHECK(sets.realized_mass[s] <= 1.0 + 1e-12);
                // Minimality: dropping the last action falls short of p.
                CHECK(mass - pi.probs(s, set.back()) < p - kMassSlack);
                // Every excluded action is no more probable than the last included one.
                for (int a = 0; a < mdp.vocab_size; ++a) {
                    if (!sets.contains(s, a)) {
                        CHECK(pi.probs(s, a) <= pi.probs(s, set.back()));
                    }
                }
            }
            CHECK(sets.min_realized_mass() >= p - kMassSlack);
        }
    }
}

TEST_CASE("candidate sets nest as p grows")
{
    const TokenMdp mdp = oracle::random_mdp(6, 3, 0.9, 4);
    const Policy pi = oracle::random_policy(mdp, 8, 2.0);
    const std::vector<double> ps{0.1, 0.4, 0.6, 0.8, 0.9, 0.99, 1.0};
    for (std::size_t i = 0; i + 1 < ps.size(); ++i) {
        const CandidateSets small = build_candidate_sets(mdp, pi, ps[i]);
        const CandidateSets large = build_candidate_sets(mdp, pi, ps[i + 1]);
        for (StateId s = 0; s < mdp.num_states(); ++s) {
            for (int a = 0; a < mdp.vocab_size; ++a) {
                if (small.contains(s, a)) {
                    CHECK(large.contains(s, a));
                }
            }
        }
        CHECK(small.support_size() <= large.support_size());
    }
}

TEST_CASE("union mode shares one action set")
{
    const TokenMdp mdp = oracle::random_mdp(6, 2, 0.9, 2);
    const Policy pi = oracle::random_policy(mdp, 3, 2.0);
    const CandidateSets per_state = build_candidate_sets(mdp, pi, 0.6);
    const CandidateSets shared = build_candidate_sets(mdp, pi, 0.6, CandidateMode::state_union);
    std::vector<char> in_union(mdp.vocab_size, 0);
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        for (ActionId a : per_state.at(s)) {
            in_union[a] = 1;
        }
    }
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            CHECK(shared.contains(s, a) == (in_union[a] != 0));
        }
        CHECK(shared.realized_mass[s] >= per_state.realized_mass[s] - 1e-12);
    }
}

TEST_CASE("projection examples")
{
    const TokenMdp three = one_row(3);
    const Policy pi = row_policy({0.5, 0.3, 0.2});
    const CandidateSets first_two = build_candidate_sets(three, pi, 0.8);
    const Policy proj = project_policy(pi, first_two);
    CHECK(proj.probs(0, 0) == doctest::Approx(0.625).epsilon(1e-15));
    CHECK(proj.probs(0, 1) == doctest::Approx(0.375).epsilon(1e-15));
    CHECK(proj.probs(0, 2) == 0.0);

    CHECK(project_policy(pi, full_candidate_sets(three)).probs == pi.probs);

    // Uniform policy over V=4 projected on {1, 3}: sets taken from a teacher that prefers them.
    const TokenMdp four = one_row(4);
    const CandidateSets odd = build_candidate_sets(four, row_policy({0.1, 0.4, 0.1, 0.4}), 0.8);
    REQUIRE(odd.at(0) == std::vector<ActionId>{1, 3});
    const Policy uniform = project_policy(uniform_policy(four), odd);
    CHECK(uniform.probs(0, 0) == 0.0);
    CHECK(uniform.probs(0, 1) == 0.5);
    CHECK(uniform.probs(0, 2) == 0.0);
    CHECK(uniform.probs(0, 3) == 0.5);

    CHECK_THROWS_AS(project_policy(row_policy({0.0, 0.0, 1.0}), first_two), DegenerateSupportError);
}

TEST_CASE("projection is idempotent and normalized")
{
    const TokenMdp mdp = oracle::random_mdp(5, 3, 0.9, 6);
    const Policy teacher = oracle::random_policy(mdp, 7, 2.0);
    const Policy other = oracle::random_policy(mdp, 8);
    for (double p : {0.3, 0.7, 1.0}) {
        const CandidateSets sets = build_candidate_sets(mdp, teacher, p);
        const Policy once = project_policy(other, sets);
        const Policy twice = project_policy(once, sets);
        CHECK((once.probs - twice.probs).cwiseAbs().maxCoeff() <= 1e-15);
        for (StateId s = 0; s < mdp.num_states(); ++s) {
            if (mdp.is_terminal(s)) {
                continue;
            }
            CHECK(once.row(s).sum() == doctest::Approx(1.0).epsilon(1e-12));
            for (int a = 0; a < mdp.vocab_size; ++a) {
                if (!sets.contains(s, a)) {
                    CHECK(once.probs(s, a) == 0.0);
                }
            }
        }
    }
}

TEST_CASE("supported norms")
{
    const TokenMdp mdp = make_mdp(2, 1, 0.5, {0, 1}, IndexTable::Constant(3, 2, 2), QTable::Zero(3, 2), 2);
    const CandidateSets full = full_candidate_sets(mdp);
    QTable diff(3, 2);
    diff << 1, -2, 3, 0, 0, 0;
    CHECK(supported_norm(diff, full, 1.0) == 3.0);
    CHECK(supported_norm(diff, full, kInfNorm) == 3.0);
    CHECK(supported_norm(diff, full, 2.0) == doctest::Approx(3.0).epsilon(1e-15));
    for (double q : {1.0, 2.0, kInfNorm}) {
        CHECK(supported_norm(QTable::Zero(3, 2), full, q) == 0.0);
    }
    CHECK_THROWS_AS(supported_norm(diff, full, 3.0), DomainError);

    // Off-support entries never count, even when they are NaN.
    QTable lhs = QTable::Zero(3, 2);
    QTable rhs = QTable::Zero(3, 2);
    const Policy skewed{(QTable(3, 2) << 0.9, 0.1, 0.2, 0.8, 0.5, 0.5).finished()};
    const CandidateSets first = build_candidate_sets(mdp, skewed, 0.5);
    lhs(0, 1) = std::numeric_limits<double>::quiet_NaN();
    lhs(1, 0) = 100.0;
    rhs(0, 0) = 0.25;
    CHECK(supported_distance(lhs, rhs, first) == 0.25);
}

TEST_CASE("kappa values")
{
    CHECK(kappa(1.0, 0.9) == 0.0);
    CHECK_FALSE(std::signbit(kappa(1.0, 0.9)));
    CHECK(kappa(0.8, 0.99) == doctest::Approx(22.09121).epsilon(1e-6));
    CHECK(std::abs(kappa(0.8, 0.99) - 99.0 * -std::log(0.8)) <= 1e-12);
    CHECK(kappa(0.5, 0.9) == doctest::Approx(6.23832).epsilon(1e-6));
    CHECK(kappa(0.3, 0.0) == 0.0);
    double previous = kappa(0.05, 0.9);
    for (double p = 0.1; p <= 1.0; p += 0.05) {
        CHECK(kappa(p, 0.9) < previous);
        previous = kappa(p, 0.9);
    }
    CHECK_THROWS_AS(kappa(0.0, 0.9), DomainError);
    CHECK_THROWS_AS(kappa(1.5, 0.9), DomainError);
    CHECK_THROWS_AS(kappa(0.5, 1.0), DomainError);
    CHECK_THROWS_AS(kappa(0.5, -0.1), DomainError);
}

TEST_CASE("top-p backup differs by gamma under a constant shift")
{
    Policy teacher;
    const TokenMdp mdp = teacher_instance(3, teacher, 5, 3);
    const CandidateSets sets = build_candidate_sets(mdp, teacher, 0.7);
    const Policy pi = oracle::random_policy(mdp, 4);
    const QTable d = top_p_bellman_apply(mdp, pi, QTable::Ones(mdp.num_states(), 5), sets) -
                     top_p_bellman_apply(mdp, pi, QTable::Zero(mdp.num_states(), 5), sets);
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        for (ActionId a : sets.at(s)) {
            const double expected = mdp.is_terminal(mdp.next(s, a)) ? 0.0 : 0.9;
            CHECK(d(s, a) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("p = 1 reduces to the full soft operators")
{
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const TokenMdp mdp = oracle::random_mdp(5, 3, 0.9, seed);
        const CandidateSets full = full_candidate_sets(mdp);
        const Policy pi = oracle::random_policy(mdp, seed + 10);
        const QTable q = oracle::random_table(mdp.num_states(), 5, seed + 20);
        const QTable a = top_p_bellman_apply(mdp, pi, q, full);
        const QTable b = soft_bellman_apply(mdp, pi, q);
        CHECK((a - b).topRows(mdp.terminal).cwiseAbs().maxCoeff() <= 1e-12);

        const SoftOptimum restricted = top_p_soft_value_iteration(mdp, full);
        const SoftOptimum opt = soft_value_iteration(mdp);
        CHECK(supported_distance(restricted.q, opt.q, full) <= 1e-10);
        const Policy same = project_policy(opt.policy, build_candidate_sets(mdp, opt.policy, 1.0));
        CHECK((same.probs - opt.policy.probs).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("top-p evaluation and value iteration match restricted recursion")
{
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        Policy teacher;
        const TokenMdp mdp = teacher_instance(seed, teacher, 6, 3);
        const CandidateSets sets = build_candidate_sets(mdp, teacher, 0.7);
        const auto in_set = [&](StateId s, int a) { return sets.contains(s, a); };
        const Policy proj = project_policy(teacher, sets);

        const QTable eval = top_p_policy_evaluation(mdp, teacher, sets);
        const QTable eval_ref = oracle::backward_restricted_q(mdp, in_set, &proj);
        CHECK(supported_distance(eval, eval_ref, sets) <= 1e-8);

        const SoftOptimum opt = top_p_soft_value_iteration(mdp, sets);
        const QTable opt_ref = oracle::backward_restricted_q(mdp, in_set, nullptr);
        CHECK(supported_distance(opt.q, opt_ref, sets) <= 1e-8);

        for (StateId s = 0; s < mdp.terminal; ++s) {
            for (int a = 0; a < mdp.vocab_size; ++a) {
                if (!sets.contains(s, a)) {
                    CHECK(std::isnan(opt.q(s, a)));
                    CHECK(opt.policy.probs(s, a) == 0.0);
                }
            }
        }
    }
}

TEST_CASE("singleton sets follow the forced path")
{
    // Near-deterministic teacher: each state's first action carries almost all mass.
    const TokenMdp mdp = oracle::random_mdp(3, 3, 0.8, 5);
    Policy greedy{QTable::Constant(mdp.num_states(), 3, 1e-4)};
    greedy.probs.col(0).setConstant(1.0 - 2e-4);
    const CandidateSets sets = build_candidate_sets(mdp, greedy, 0.9);
    const SoftOptimum opt = top_p_soft_value_iteration(mdp, sets);
    StateId s = mdp.prompts[0];
    std::vector<StateId> path;
    while (!mdp.is_terminal(s)) {
        path.push_back(s);
        s = mdp.next(s, 0);
    }
    double value = 0.0;
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
        value = mdp.reward(*it, 0) + mdp.gamma * value;
        CHECK(opt.q(*it, 0) == doctest::Approx(value).epsilon(1e-12));
        CHECK(opt.policy.probs(*it, 0) == 1.0);
    }
}

TEST_CASE("top-p backup contracts with modulus gamma")
{
    const TokenMdp mdp = oracle::random_mdp(6, 3, 0.9, 12);
    const Policy teacher = oracle::random_policy(mdp, 13, 2.0);
    for (double p : {0.5, 0.8, 1.0}) {
        const CandidateSets sets = build_candidate_sets(mdp, teacher, p);
        const ContractionAudit audit = verify_contraction(mdp, sets, 200, 7);
        CHECK(audit.trials + audit.skipped == 200);
        CHECK(audit.max_ratio <= 0.9 + 1e-9);
        CHECK(audit.max_ratio > 0.5);

        const Policy pi = oracle::random_policy(mdp, 14);
        const QTable q = oracle::random_table(mdp.num_states(), 6, 15);
        CHECK(contraction_ratio(mdp, pi, q.array() + 3.0, q, sets) == doctest::Approx(0.9).epsilon(1e-12));
        CHECK(std::isnan(contraction_ratio(mdp, pi, q, q, sets)));
    }
    CHECK_THROWS_AS(verify_contraction(mdp, full_candidate_sets(mdp), 0, 1), DomainError);
}

TEST_CASE("sandwich and gap bounds against independent recursion")
{
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Policy teacher;
        const TokenMdp mdp = teacher_instance(seed, teacher);
        const QTable q_star = oracle::backward_optimal_q(mdp);
        for (double p : {0.5, 0.8, 0.95}) {
            const CandidateSets sets = build_candidate_sets(mdp, teacher, p);
            const auto in_set = [&](StateId s, int a) { return sets.contains(s, a); };
            const Policy proj = project_policy(teacher, sets);
            const QTable q_proj = oracle::backward_restricted_q(mdp, in_set, &proj);
            const QTable q_opt = oracle::backward_restricted_q(mdp, in_set, nullptr);
            for (StateId s = 0; s < mdp.num_states(); ++s) {
                for (ActionId a : sets.at(s)) {
                    CHECK(q_proj(s, a) <= q_opt(s, a) + 1e-9);
                    CHECK(q_opt(s, a) <= q_star(s, a) + 1e-9);
                }
            }
            const BoundReport report = verify_bounds(mdp, teacher, p);
            CHECK(report.pass());
            CHECK(report.gap_proj == doctest::Approx(supported_distance(q_star, q_proj, sets)).epsilon(1e-8));
            CHECK(report.gap_opt == doctest::Approx(supported_distance(q_star, q_opt, sets)).epsilon(1e-8));
            CHECK(report.gap_opt <= report.gap_proj + 1e-9);
            CHECK(report.gap_proj <= kappa(p, 0.9) + 1e-6);
            CHECK(report.gap_proj <= report.kappa_realized + 1e-6);
            CHECK(report.kappa == kappa(p, 0.9));
        }
    }
}

TEST_CASE("bound report at p = 1 and failure paths")
{
    Policy teacher;
    const TokenMdp mdp = teacher_instance(9, teacher);
    const BoundReport full = verify_bounds(mdp, teacher, 1.0);
    CHECK(full.pass());
    CHECK(full.kappa == 0.0);
    CHECK(full.gap_proj <= 1e-8);
    CHECK(full.gap_opt <= 1e-8);

    BoundOptions tampered;
    tampered.tamper_bias = 10.0 * kappa(0.8, 0.9);
    CHECK_FALSE(verify_bounds(mdp, teacher, 0.8, tampered).pass());

    const Policy random_teacher = oracle::random_policy(mdp, 10);
    CHECK_THROWS_AS(verify_bounds(mdp, random_teacher, 0.8), DomainError);
    BoundOptions report_only;
    report_only.strict = false;
    const BoundReport loose = verify_bounds(mdp, random_teacher, 0.8, report_only);
    CHECK_FALSE(loose.asserted);
    CHECK(loose.pass());
}
