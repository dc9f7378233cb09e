#include "bdistill/config.hpp"

#include "bdistill/errors.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

namespace bdistill {

using json = nlohmann::json;

namespace {

enum class Kind { integer, number, optional_number, boolean, text, number_list, text_list };

struct KeySpec {
    const char* key;
    Kind kind;
    json fallback;
};

const std::vector<KeySpec>& key_table()
{
    static const std::vector<KeySpec> table = {
        {"run.seed", Kind::integer, 0},
        {"run.out", Kind::text, ""},
        {"run.track", Kind::text, "synthetic"},

        {"mdp.vocab_size", Kind::integer, 8},
        {"mdp.horizon", Kind::integer, 3},
        {"mdp.n_prompts", Kind::integer, 1},
        {"mdp.reward_law", Kind::text, "normal"},
        {"mdp.sigma", Kind::number, 1.0},
        {"mdp.max_entries", Kind::integer, 2'000'000},

        {"iql.alpha", Kind::number, 0.1},
        {"iql.gamma", Kind::number, 0.99},
        {"iql.p", Kind::number, 0.8},
        {"iql.learning_rate", Kind::number, 0.5},
        {"iql.batch_size", Kind::integer, 64},
        {"iql.epochs", Kind::integer, 100},
        {"iql.q_min", Kind::number, -10.0},
        {"iql.projected_sampling", Kind::boolean, true},
        {"iql.exact_mode", Kind::boolean, false},
        {"iql.step_halving", Kind::boolean, true},
        {"iql.init_from_bc", Kind::boolean, false},

        {"distill.n_per_prompt", Kind::integer, 8},
        {"distill.validation_fraction", Kind::number, 0.2},
        {"distill.lm_weight", Kind::optional_number, nullptr},
        {"distill.candidate_mode", Kind::text, "state"},
        {"distill.eval_every", Kind::integer, 1},
        {"distill.use_pt_data", Kind::boolean, false},

        {"verify.instances", Kind::integer, 50},
        {"verify.p_list", Kind::number_list, json::array({0.5, 0.8, 0.95})},
        {"verify.contraction_trials", Kind::integer, 20},
        {"verify.tol", Kind::number, 1e-6},
        {"verify.solver_tol", Kind::number, 1e-10},
        {"verify.tamper_bias", Kind::number, 0.0},

        {"ablate.p_list", Kind::number_list, json::array({0.5, 0.8, 1.0})},

        {"corpus.path", Kind::text, ""},
        {"corpus.order", Kind::integer, 3},
        {"corpus.delta", Kind::number, 0.1},
        {"corpus.vocab_cap", Kind::integer, 256},
        {"corpus.horizon", Kind::integer, 3},
        {"corpus.prompts", Kind::text_list, json::array()},
        {"corpus.n_prompts", Kind::integer, 4},
        {"corpus.n_sequences", Kind::integer, 200},
    };
    return table;
}

const KeySpec& lookup(const std::string& key)
{
    for (const KeySpec& spec : key_table()) {
        if (key == spec.key) {
            return spec;
        }
    }
    throw DomainError("unknown configuration key \"" + key + "\"");
}

bool matches(Kind kind, const json& v)
{
    switch (kind) {
    case Kind::integer:
        return v.is_number_integer();
    case Kind::number:
        return v.is_number();
    case Kind::optional_number:
        return v.is_null() || v.is_number();
    case Kind::boolean:
        return v.is_boolean();
    case Kind::text:
        return v.is_string();
    case Kind::number_list:
        return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); });
    case Kind::text_list:
        return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_string(); });
    }
    return false;
}

// Integers written into a real-valued key are stored as doubles so that the
// echoed document parses back to the same value type.
json normalize(Kind kind, json v)
{
    if (kind == Kind::number || (kind == Kind::optional_number && !v.is_null())) {
        return json(v.get<double>());
    }
    if (kind == Kind::number_list) {
        json out = json::array();
        for (const json& x : v) {
            out.push_back(x.get<double>());
        }
        return out;
    }
    return v;
}

} // namespace

RunConfig::RunConfig() : values_(json::object())
{
    for (const KeySpec& spec : key_table()) {
        values_[spec.key] = normalize(spec.kind, spec.fallback);
    }
}

RunConfig RunConfig::from_json(const json& flat)
{
    RunConfig config;
    config.merge(flat);
    return config;
}

RunConfig RunConfig::from_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open config " + path);
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DomainError("config " + path + " is not valid JSON: " + e.what());
    }
    return from_json(doc);
}

void RunConfig::merge(const json& flat)
{
    if (!flat.is_object()) {
        throw DomainError("configuration must be a JSON object of section-prefixed keys");
    }
    for (const auto& [key, value] : flat.items()) {
        set(key, value);
    }
}

void RunConfig::set(const std::string& key, json value)
{
    const KeySpec& spec = lookup(key);
    if (!matches(spec.kind, value)) {
        throw DomainError("configuration key \"" + key + "\" has the wrong type: " + value.dump());
    }
    if (spec.kind == Kind::integer && key != "run.seed" && value.is_number_unsigned() &&
        value.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
        throw DomainError("configuration key \"" + key + "\" is out of range");
    }
    values_[key] = normalize(spec.kind, std::move(value));
}

double RunConfig::number(const std::string& key) const
{
    return values_.at(key).get<double>();
}

std::int64_t RunConfig::integer(const std::string& key) const
{
    return values_.at(key).get<std::int64_t>();
}

bool RunConfig::flag(const std::string& key) const
{
    return values_.at(key).get<bool>();
}

std::string RunConfig::text(const std::string& key) const
{
    return values_.at(key).get<std::string>();
}

std::vector<double> RunConfig::numbers(const std::string& key) const
{
    return values_.at(key).get<std::vector<double>>();
}

std::uint64_t RunConfig::seed() const
{
    const json& v = values_.at("run.seed");
    if (v.is_number_unsigned()) {
        return v.get<std::uint64_t>();
    }
    const auto s = v.get<std::int64_t>();
    if (s < 0) {
        throw DomainError("run.seed must be non-negative");
    }
    return static_cast<std::uint64_t>(s);
}

namespace {

int to_int(std::int64_t x, const char* key)
{
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
        throw DomainError(std::string(key) + " does not fit in an int");
    }
    return static_cast<int>(x);
}

} // namespace

MdpGenSpec RunConfig::mdp_spec() const
{
    MdpGenSpec spec;
    spec.vocab_size = to_int(integer("mdp.vocab_size"), "mdp.vocab_size");
    spec.horizon = to_int(integer("mdp.horizon"), "mdp.horizon");
    spec.n_prompts = to_int(integer("mdp.n_prompts"), "mdp.n_prompts");
    const std::string law = text("mdp.reward_law");
    if (law == "normal") {
        spec.reward_law = RewardLaw::normal;
    } else if (law == "uniform") {
        spec.reward_law = RewardLaw::uniform;
    } else {
        throw DomainError("mdp.reward_law must be \"normal\" or \"uniform\"");
    }
    spec.sigma = number("mdp.sigma");
    spec.gamma = number("iql.gamma");
    spec.seed = seed();
    spec.max_entries = integer("mdp.max_entries");
    return spec;
}

IqlConfig RunConfig::iql() const
{
    IqlConfig c;
    c.alpha = number("iql.alpha");
    c.gamma = number("iql.gamma");
    c.p = number("iql.p");
    c.learning_rate = number("iql.learning_rate");
    c.batch_size = to_int(integer("iql.batch_size"), "iql.batch_size");
    c.epochs = to_int(integer("iql.epochs"), "iql.epochs");
    c.q_min = number("iql.q_min");
    c.seed = seed();
    c.projected_sampling = flag("iql.projected_sampling");
    c.exact_mode = flag("iql.exact_mode");
    c.step_halving = flag("iql.step_halving");
    c.init_from_bc = flag("iql.init_from_bc");
    validate(c);
    return c;
}

DistillConfig RunConfig::distill() const
{
    DistillConfig c;
    c.iql = iql();
    c.n_per_prompt = to_int(integer("distill.n_per_prompt"), "distill.n_per_prompt");
    c.validation_fraction = number("distill.validation_fraction");
    const json& w = values_.at("distill.lm_weight");
    if (!w.is_null()) {
        c.lm_weight = w.get<double>();
    }
    const std::string mode = text("distill.candidate_mode");
    if (mode == "state") {
        c.mode = CandidateMode::state_dependent;
    } else if (mode == "union") {
        c.mode = CandidateMode::state_union;
    } else {
        throw DomainError("distill.candidate_mode must be \"state\" or \"union\"");
    }
    c.eval_every = to_int(integer("distill.eval_every"), "distill.eval_every");
    return c;
}

BoundOptions RunConfig::bound_options() const
{
    BoundOptions o;
    o.tol = number("verify.tol");
    o.solver_tol = number("verify.solver_tol");
    o.contraction_trials = to_int(integer("verify.contraction_trials"), "verify.contraction_trials");
    o.seed = seed();
    o.tamper_bias = number("verify.tamper_bias");
    o.mode = distill().mode;
    return o;
}

std::vector<std::string> RunConfig::keys()
{
    std::vector<std::string> out;
    for (const KeySpec& spec : key_table()) {
        out.emplace_back(spec.key);
    }
    return out;
}

} // namespace bdistill
