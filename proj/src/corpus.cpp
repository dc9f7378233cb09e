#include "bdistill/corpus.hpp"

#include "bdistill/errors.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

namespace bdistill {

ActionId NgramTeacher::token(char c) const
{
    const auto pos = symbols_.find(c);
    return pos == std::string::npos ? -1 : static_cast<ActionId>(pos);
}

std::string NgramTeacher::render(ActionId token) const
{
    if (token == eos()) {
        return "<eos>";
    }
    return std::string(1, symbols_.at(static_cast<std::size_t>(token)));
}

VTable NgramTeacher::conditional(std::string_view context) const
{
    const int V = vocab_size();
    if (static_cast<int>(context.size()) < order_) {
        throw DomainError("context shorter than the n-gram order");
    }
    const std::string_view key = context.substr(context.size() - static_cast<std::size_t>(order_));
    const auto it = counts_.find(key);
    if (it == counts_.end()) {
        return VTable::Constant(V, 1.0 / V);
    }
    const std::vector<double>& c = it->second;
    double total = 0.0;
    for (double x : c) {
        total += x;
    }
    VTable row(V);
    for (int w = 0; w < V; ++w) {
        row[w] = (c[static_cast<std::size_t>(w)] + delta_) / (total + delta_ * V);
    }
    return row;
}

NgramTeacher train_ngram(std::string_view text, int n, double delta, int vocab_cap)
{
    if (text.empty()) {
        throw DomainError("training text is empty");
    }
    if (n < 1) {
        throw DomainError("n-gram order must be at least 1");
    }
    if (!(delta > 0.0)) {
        throw DomainError("smoothing constant must be positive");
    }

    NgramTeacher model;
    model.order_ = n;
    model.delta_ = delta;
    std::string symbols(text);
    std::sort(symbols.begin(), symbols.end(),
              [](char a, char b) { return static_cast<unsigned char>(a) < static_cast<unsigned char>(b); });
    symbols.erase(std::unique(symbols.begin(), symbols.end()), symbols.end());
    model.symbols_ = std::move(symbols);
    if (model.vocab_size() > vocab_cap) {
        throw SizeLimitError("vocabulary of " + std::to_string(model.vocab_size()) + " tokens exceeds cap " +
                             std::to_string(vocab_cap));
    }

    const std::size_t V = static_cast<std::size_t>(model.vocab_size());
    for (std::size_t i = static_cast<std::size_t>(n); i <= text.size(); ++i) {
        const std::string_view ctx = text.substr(i - static_cast<std::size_t>(n), static_cast<std::size_t>(n));
        auto it = model.counts_.find(ctx);
        if (it == model.counts_.end()) {
            it = model.counts_.emplace(std::string(ctx), std::vector<double>(V, 0.0)).first;
        }
        const ActionId next = i < text.size() ? model.token(text[i]) : model.eos();
        it->second[static_cast<std::size_t>(next)] += 1.0;
    }
    return model;
}

NgramMdp ngram_to_mdp(const NgramTeacher& teacher, const std::vector<std::string>& prompts, int horizon,
                      double gamma, std::int64_t max_entries)
{
    if (prompts.empty()) {
        throw DomainError("at least one prompt is required");
    }
    if (horizon < 1) {
        throw DomainError("horizon must be at least 1");
    }
    for (const std::string& p : prompts) {
        if (static_cast<int>(p.size()) < teacher.order()) {
            throw DomainError("prompt shorter than the n-gram order: \"" + p + "\"");
        }
        for (char c : p) {
            if (teacher.token(c) < 0) {
                throw DomainError("prompt uses a character outside the teacher vocabulary");
            }
        }
    }

    const int V = teacher.vocab_size();
    // Each non-terminal node has V - 1 non-EOS children below depth horizon - 1.
    std::int64_t per_prompt = 0;
    std::int64_t level = 1;
    for (int d = 0; d < horizon; ++d) {
        per_prompt += level;
        level *= V - 1;
        if (per_prompt * static_cast<std::int64_t>(prompts.size()) * V > max_entries) {
            throw SizeLimitError("n-gram MDP exceeds the table-size cap");
        }
    }
    const std::int64_t non_terminal = per_prompt * static_cast<std::int64_t>(prompts.size());
    if ((non_terminal + 1) * V > max_entries) {
        throw SizeLimitError("n-gram MDP exceeds the table-size cap");
    }

    const int n = static_cast<int>(non_terminal) + 1;
    const StateId terminal = n - 1;
    IndexTable next(n, V);
    QTable reward = QTable::Zero(n, V);
    Policy pi{Table<double>::Constant(n, V, 1.0 / V)};
    std::vector<std::string> text(static_cast<std::size_t>(n));
    std::vector<int> depth(static_cast<std::size_t>(n), 0);

    std::vector<StateId> roots(prompts.size());
    StateId fresh = 0;
    std::deque<StateId> frontier;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        roots[i] = fresh;
        text[static_cast<std::size_t>(fresh)] = prompts[i];
        frontier.push_back(fresh++);
    }
    while (!frontier.empty()) {
        const StateId s = frontier.front();
        frontier.pop_front();
        const std::string& ctx = text[static_cast<std::size_t>(s)];
        const VTable row = teacher.conditional(ctx);
        pi.probs.row(s) = row.transpose();
        const bool last = depth[static_cast<std::size_t>(s)] + 1 >= horizon;
        for (int a = 0; a < V; ++a) {
            reward(s, a) = std::log(row[a]);
            if (last || a == teacher.eos()) {
                next(s, a) = terminal;
            } else {
                next(s, a) = fresh;
                text[static_cast<std::size_t>(fresh)] = ctx + teacher.render(a);
                depth[static_cast<std::size_t>(fresh)] = depth[static_cast<std::size_t>(s)] + 1;
                frontier.push_back(fresh++);
            }
        }
    }
    next.row(terminal).setConstant(terminal);
    text.back().clear();

    NgramMdp out{make_mdp(V, horizon, gamma, roots, std::move(next), std::move(reward), terminal), std::move(pi),
                 std::move(text)};
    return out;
}

double SparsityProfile::mass_at(int rank) const
{
    if (cumulative.size() == 0 || rank < 1) {
        return 0.0;
    }
    return cumulative[std::min<Eigen::Index>(rank, cumulative.size()) - 1];
}

SparsityProfile sparsity_profile(const Policy& teacher, const TokenMdp& mdp, int n_sequences, std::uint64_t seed)
{
    if (n_sequences < 1) {
        throw DomainError("n_sequences must be at least 1");
    }
    check_policy(mdp, teacher);
    const int V = mdp.vocab_size;
    VTable sum = VTable::Zero(V);
    int contexts = 0;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const int max_steps = mdp.horizon > 0 ? mdp.horizon : 1 << 16;

    std::vector<double> sorted(static_cast<std::size_t>(V));
    for (int i = 0; i < n_sequences; ++i) {
        StateId s = mdp.prompts[static_cast<std::size_t>(i) % mdp.prompts.size()];
        for (int t = 0; t < max_steps && !mdp.is_terminal(s); ++t) {
            const auto row = teacher.row(s);
            for (int a = 0; a < V; ++a) {
                sorted[static_cast<std::size_t>(a)] = row[a];
            }
            std::sort(sorted.begin(), sorted.end(), std::greater<>());
            for (int a = 0; a < V; ++a) {
                sum[a] += sorted[static_cast<std::size_t>(a)];
            }
            ++contexts;

            const double u = uniform(rng);
            double cumulative = 0.0;
            ActionId pick = V - 1;
            for (int a = 0; a < V; ++a) {
                cumulative += row[a];
                if (u < cumulative) {
                    pick = a;
                    break;
                }
            }
            s = mdp.next(s, pick);
        }
    }

    SparsityProfile profile;
    profile.n_contexts = contexts;
    profile.n_sequences = n_sequences;
    profile.mean_probs = contexts > 0 ? VTable(sum / contexts) : VTable(VTable::Zero(V));
    profile.cumulative.resize(V);
    double acc = 0.0;
    for (int a = 0; a < V; ++a) {
        acc += profile.mean_probs[a];
        profile.cumulative[a] = acc;
    }
    return profile;
}

std::string read_text_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::string bundled_corpus_path()
{
    return std::string(BDISTILL_DATA_DIR) + "/corpus.txt";
}

} // namespace bdistill
