// Command-line driver: bdistill <command> [--config PATH] [overrides...]

#include "bdistill/commands.hpp"
#include "bdistill/errors.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

struct Overrides {
    std::string config_path;
    std::optional<double> p, gamma, alpha, lr, q_min;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs, batch_size;
    std::optional<std::string> out;
    std::optional<bool> exact, projected_sampling;
    std::vector<std::string> sets;
};

void add_options(CLI::App* cmd, Overrides& o)
{
    cmd->add_option("--config", o.config_path, "flat JSON config (section-prefixed keys)")->check(CLI::ExistingFile);
    cmd->add_option("--p", o.p, "top-p mass (iql.p)");
    cmd->add_option("--gamma", o.gamma, "discount (iql.gamma)");
    cmd->add_option("--alpha", o.alpha, "chi^2 regularizer strength (iql.alpha)");
    cmd->add_option("--seed", o.seed, "global seed (run.seed)");
    cmd->add_option("--epochs", o.epochs, "training epochs (iql.epochs)");
    cmd->add_option("--lr", o.lr, "learning rate (iql.learning_rate)");
    cmd->add_option("--batch-size", o.batch_size, "minibatch size (iql.batch_size)");
    cmd->add_option("--q-min", o.q_min, "Q floor (iql.q_min)");
    cmd->add_option("--out", o.out, "output directory (default $BDISTILL_OUT/<command>)");
    cmd->add_option("--exact", o.exact, "exact occupancy instead of sampled data")->expected(0, 1)->default_str("true");
    cmd->add_option("--projected-sampling", o.projected_sampling, "sample data from the projected teacher")
        ->expected(0, 1)
        ->default_str("true");
    cmd->add_option("--set", o.sets, "any config key as KEY=JSON, e.g. --set verify.instances=5");
}

bdistill::RunConfig effective_config(const Overrides& o, const std::string& command)
{
    using nlohmann::json;
    bdistill::RunConfig config =
        o.config_path.empty() ? bdistill::RunConfig{} : bdistill::RunConfig::from_file(o.config_path);
    for (const std::string& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw bdistill::DomainError("--set expects KEY=JSON, got " + kv);
        }
        const std::string raw = kv.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        config.set(kv.substr(0, eq), value.is_discarded() ? json(raw) : value);
    }
    if (o.p) config.set("iql.p", *o.p);
    if (o.gamma) config.set("iql.gamma", *o.gamma);
    if (o.alpha) config.set("iql.alpha", *o.alpha);
    if (o.seed) config.set("run.seed", *o.seed);
    if (o.epochs) config.set("iql.epochs", *o.epochs);
    if (o.lr) config.set("iql.learning_rate", *o.lr);
    if (o.batch_size) config.set("iql.batch_size", *o.batch_size);
    if (o.q_min) config.set("iql.q_min", *o.q_min);
    if (o.exact) config.set("iql.exact_mode", *o.exact);
    if (o.projected_sampling) config.set("iql.projected_sampling", *o.projected_sampling);
    if (o.out) config.set("run.out", *o.out);
    config.set("run.out", bdistill::resolve_output_dir(config, command).string());
    return config;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Top-p Bellman distillation on tabular token MDPs"};
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"make-mdp", "generate a random token MDP and its soft-optimal teacher"},
        {"verify", "check contraction, sandwich and gap bounds over a seeded battery"},
        {"train", "projected IQL on teacher data"},
        {"distill", "Bellman Distill with validation checkpointing"},
        {"ablate", "Bellman Distill for every p in ablate.p_list"},
        {"sparsity", "rank profile of the corpus n-gram teacher"},
    };
    Overrides overrides;
    for (const auto& [name, help] : commands) {
        add_options(app.add_subcommand(name, help), overrides);
    }
    CLI11_PARSE(app, argc, argv);

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const bdistill::RunConfig config = effective_config(overrides, command);
        return bdistill::run_command(command, config, config.text("run.out"), std::cout);
    } catch (const std::exception& e) {
        std::cerr << "bdistill " << command << ": " << e.what() << "\n";
        return 2;
    }
}
