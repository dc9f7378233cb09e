#include "bdistill/mdp.hpp"

#include "bdistill/errors.hpp"

#include <cmath>
#include <deque>
#include <random>
#include <string>

namespace bdistill {

std::int64_t TokenMdp::num_pairs() const
{
    const std::int64_t non_terminal = num_states() - (has_terminal() ? 1 : 0);
    return non_terminal * vocab_size + (has_terminal() ? 1 : 0);
}

TokenMdp make_mdp(int vocab_size, int horizon, double gamma, std::vector<StateId> prompts,
                  IndexTable next, QTable reward, StateId terminal)
{
    if (vocab_size < 1) {
        throw DomainError("vocab_size must be positive");
    }
    if (!(gamma >= 0.0 && gamma < 1.0)) {
        throw DomainError("gamma must lie in [0, 1), got " + std::to_string(gamma));
    }
    const int n = static_cast<int>(next.rows());
    if (next.cols() != vocab_size || reward.rows() != n || reward.cols() != vocab_size) {
        throw DomainError("next/reward tables do not match (states, vocab_size)");
    }
    if (terminal >= n || terminal < -1) {
        throw DomainError("terminal index out of range");
    }
    for (StateId s : prompts) {
        if (s < 0 || s >= n || s == terminal) {
            throw DomainError("prompt index out of range or terminal");
        }
    }
    for (int s = 0; s < n; ++s) {
        for (int a = 0; a < vocab_size; ++a) {
            if (next(s, a) < 0 || next(s, a) >= n) {
                throw DomainError("transition (" + std::to_string(s) + ", " + std::to_string(a) +
                                  ") has no valid successor");
            }
            if (!std::isfinite(reward(s, a))) {
                throw DomainError("non-finite reward entry");
            }
        }
    }
    if (terminal >= 0) {
        for (int a = 0; a < vocab_size; ++a) {
            if (next(terminal, a) != terminal || reward(terminal, a) != 0.0) {
                throw DomainError("terminal must self-loop with zero reward");
            }
        }
    }

    TokenMdp mdp;
    mdp.vocab_size = vocab_size;
    mdp.horizon = horizon;
    mdp.gamma = gamma;
    mdp.prompts = std::move(prompts);
    mdp.terminal = terminal;
    mdp.next = std::move(next);
    mdp.reward = std::move(reward);

    mdp.depth.assign(n, -1);
    std::deque<StateId> frontier;
    for (StateId s : mdp.prompts) {
        if (mdp.depth[s] < 0) {
            mdp.depth[s] = 0;
            frontier.push_back(s);
        }
    }
    while (!frontier.empty()) {
        const StateId s = frontier.front();
        frontier.pop_front();
        for (int a = 0; a < vocab_size; ++a) {
            const StateId t = mdp.next(s, a);
            if (t != terminal && mdp.depth[t] < 0) {
                mdp.depth[t] = mdp.depth[s] + 1;
                frontier.push_back(t);
            }
        }
    }
    return mdp;
}

void check_token_tree(const TokenMdp& mdp)
{
    const int n = mdp.num_states();
    std::vector<int> indegree(n, 0);
    for (int s = 0; s < n; ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        if (mdp.depth[s] < 0) {
            throw DomainError("state " + std::to_string(s) + " is unreachable from every prompt");
        }
        for (int a = 0; a < mdp.vocab_size; ++a) {
            const StateId t = mdp.next(s, a);
            if (mdp.is_terminal(t)) {
                continue;
            }
            if (mdp.depth[t] != mdp.depth[s] + 1) {
                throw DomainError("transition does not descend one level in the prefix tree");
            }
            ++indegree[t];
        }
    }
    for (int s = 0; s < n; ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        const bool is_root = mdp.depth[s] == 0;
        if (is_root ? indegree[s] != 0 : indegree[s] != 1) {
            throw DomainError("state " + std::to_string(s) + " does not have a unique parent");
        }
        if (mdp.horizon > 0 && mdp.depth[s] >= mdp.horizon) {
            throw DomainError("state deeper than the horizon");
        }
    }
}

std::int64_t prefix_forest_size(int vocab_size, int horizon, int n_prompts)
{
    std::int64_t level = 1;
    std::int64_t total = 0;
    for (int d = 0; d < horizon; ++d) {
        total += level;
        level *= vocab_size;
        if (total > (std::int64_t{1} << 40)) {
            return total;
        }
    }
    return total * n_prompts;
}

TokenMdp build_token_mdp(const MdpGenSpec& spec)
{
    if (spec.vocab_size < 2) {
        throw DomainError("vocab_size must be at least 2");
    }
    if (spec.horizon < 1) {
        throw DomainError("horizon must be at least 1");
    }
    if (spec.n_prompts < 1) {
        throw DomainError("n_prompts must be at least 1");
    }
    if (!(spec.sigma > 0.0)) {
        throw DomainError("reward scale must be positive");
    }

    const std::int64_t non_terminal = prefix_forest_size(spec.vocab_size, spec.horizon, spec.n_prompts);
    const std::int64_t entries = (non_terminal + 1) * spec.vocab_size;
    if (entries > spec.max_entries) {
        throw SizeLimitError("token MDP needs " + std::to_string(entries) +
                             " reward entries, cap is " + std::to_string(spec.max_entries));
    }

    const int n = static_cast<int>(non_terminal) + 1;
    const int V = spec.vocab_size;
    const StateId terminal = n - 1;
    IndexTable next(n, V);
    QTable reward = QTable::Zero(n, V);

    // Breadth-first numbering: all prompts, then depth 1 of every prompt, ...
    std::vector<StateId> level(spec.n_prompts);
    std::vector<StateId> prompts(spec.n_prompts);
    for (int i = 0; i < spec.n_prompts; ++i) {
        level[i] = prompts[i] = i;
    }
    StateId fresh = spec.n_prompts;
    for (int d = 0; d < spec.horizon; ++d) {
        std::vector<StateId> below;
        const bool last = d + 1 == spec.horizon;
        if (!last) {
            below.reserve(level.size() * V);
        }
        for (StateId s : level) {
            for (int a = 0; a < V; ++a) {
                if (last) {
                    next(s, a) = terminal;
                } else {
                    next(s, a) = fresh;
                    below.push_back(fresh++);
                }
            }
        }
        level = std::move(below);
    }
    next.row(terminal).setConstant(terminal);

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    std::normal_distribution<double> normal(0.0, spec.sigma);
    for (int s = 0; s < terminal; ++s) {
        for (int a = 0; a < V; ++a) {
            reward(s, a) = spec.reward_law == RewardLaw::uniform ? uniform(rng) : normal(rng);
        }
    }

    return make_mdp(V, spec.horizon, spec.gamma, std::move(prompts), std::move(next), std::move(reward),
                    terminal);
}

std::vector<std::pair<ActionId, StateId>> successors(const TokenMdp& mdp, StateId s)
{
    if (s < 0 || s >= mdp.num_states()) {
        throw DomainError("invalid state index " + std::to_string(s));
    }
    if (mdp.is_terminal(s)) {
        return {{0, s}};
    }
    std::vector<std::pair<ActionId, StateId>> out;
    out.reserve(mdp.vocab_size);
    for (int a = 0; a < mdp.vocab_size; ++a) {
        out.emplace_back(a, mdp.next(s, a));
    }
    return out;
}

Policy uniform_policy(const TokenMdp& mdp)
{
    return Policy{Table<double>::Constant(mdp.num_states(), mdp.vocab_size, 1.0 / mdp.vocab_size)};
}

void check_policy(const TokenMdp& mdp, const Policy& policy, double tol)
{
    if (policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.vocab_size) {
        throw DomainError("policy shape does not match the MDP");
    }
    for (int s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            continue;
        }
        const auto row = policy.row(s);
        if ((row.array() < 0.0).any() || !row.allFinite()) {
            throw DomainError("policy row " + std::to_string(s) + " has negative or non-finite entries");
        }
        if (std::abs(row.sum() - 1.0) > tol) {
            throw DomainError("policy row " + std::to_string(s) + " is not normalized");
        }
    }
}

VTable uniform_start(const TokenMdp& mdp)
{
    return VTable::Constant(static_cast<Eigen::Index>(mdp.prompts.size()), 1.0 / mdp.prompts.size());
}

} // namespace bdistill
