#include "bdistill/commands.hpp"

#include "bdistill/corpus.hpp"
#include "bdistill/errors.hpp"
#include "bdistill/io.hpp"
#include "bdistill/soft_rl.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

namespace bdistill {

namespace fs = std::filesystem;

namespace {

std::string corpus_text(const RunConfig& config)
{
    const std::string path = config.text("corpus.path");
    return read_text_file(path.empty() ? bundled_corpus_path() : path);
}

NgramMdp corpus_problem(const RunConfig& config, double gamma)
{
    const std::string text = corpus_text(config);
    const int order = static_cast<int>(config.integer("corpus.order"));
    const NgramTeacher teacher = train_ngram(text, order, config.number("corpus.delta"),
                                             static_cast<int>(config.integer("corpus.vocab_cap")));
    std::vector<std::string> prompts = config.values().at("corpus.prompts").get<std::vector<std::string>>();
    if (prompts.empty()) {
        prompts = corpus_prompts(text, order, static_cast<int>(config.integer("corpus.n_prompts")));
    }
    return ngram_to_mdp(teacher, prompts, static_cast<int>(config.integer("corpus.horizon")), gamma,
                        config.integer("mdp.max_entries"));
}

void prepare(const RunConfig& config, const fs::path& out)
{
    fs::create_directories(out);
    write_json_file((out / "config.json").string(), config.values());
}

void write_csv(const fs::path& path, const std::string& header, const std::vector<std::string>& rows)
{
    std::string text = header + "\n";
    for (const std::string& row : rows) {
        text += row + "\n";
    }
    write_text_file(path.string(), text);
}

} // namespace

std::vector<std::string> corpus_prompts(std::string_view text, int order, int n)
{
    if (n < 1) {
        throw DomainError("corpus.n_prompts must be at least 1");
    }
    if (order < 1 || static_cast<std::size_t>(order) > text.size()) {
        throw DomainError("corpus is shorter than the n-gram order");
    }
    const std::size_t span = text.size() - static_cast<std::size_t>(order) + 1;
    std::vector<std::string> prompts;
    for (int i = 0; i < n; ++i) {
        const std::size_t offset = span * static_cast<std::size_t>(i) / static_cast<std::size_t>(n);
        prompts.emplace_back(text.substr(offset, static_cast<std::size_t>(order)));
    }
    return prompts;
}

Problem make_problem(const RunConfig& config)
{
    const std::string track = config.text("run.track");
    if (track == "synthetic") {
        TokenMdp mdp = build_token_mdp(config.mdp_spec());
        Policy teacher = soft_value_iteration(mdp).policy;
        return Problem{std::move(mdp), std::move(teacher), "soft-optimal"};
    }
    if (track == "corpus") {
        NgramMdp built = corpus_problem(config, config.number("iql.gamma"));
        return Problem{std::move(built.mdp), std::move(built.teacher), "ngram"};
    }
    throw DomainError("run.track must be \"synthetic\" or \"corpus\"");
}

fs::path resolve_output_dir(const RunConfig& config, const std::string& command)
{
    const std::string configured = config.text("run.out");
    if (!configured.empty()) {
        return configured;
    }
    if (const char* root = std::getenv(kOutputRootVar); root != nullptr && *root != '\0') {
        return fs::path(root) / command;
    }
    return fs::path("runs") / command;
}

int cmd_make_mdp(const RunConfig& config, const fs::path& out, std::ostream& log)
{
    const TokenMdp mdp = build_token_mdp(config.mdp_spec());
    const SoftOptimum opt = soft_value_iteration(mdp);
    prepare(config, out);
    write_json_file((out / "mdp.json").string(), to_json(mdp));
    write_json_file((out / "teacher.json").string(), to_json(opt.policy));
    write_json_file((out / "qstar.json").string(), table_to_json(opt.q));
    log << "wrote MDP with " << mdp.num_states() << " states to " << out.string() << "\n";
    return 0;
}

int cmd_verify(const RunConfig& config, const fs::path& out, std::ostream& log)
{
    const int instances = static_cast<int>(config.integer("verify.instances"));
    if (instances < 1) {
        throw DomainError("verify.instances must be at least 1");
    }
    const std::vector<double> p_list = config.numbers("verify.p_list");
    MdpGenSpec spec = config.mdp_spec();
    BoundOptions options = config.bound_options();
    SolveOptions solve;
    solve.tol = options.solver_tol;

    std::vector<std::string> rows;
    nlohmann::json reports = nlohmann::json::array();
    int failures = 0;
    for (int i = 0; i < instances; ++i) {
        spec.seed = config.seed() + static_cast<std::uint64_t>(i);
        const TokenMdp mdp = build_token_mdp(spec);
        const Policy teacher = soft_value_iteration(mdp, solve).policy;
        options.seed = spec.seed;
        for (double p : p_list) {
            const BoundReport report = verify_bounds(mdp, teacher, p, options);
            rows.push_back(bound_csv_row(report));
            reports.push_back(to_json(report));
            if (!report.pass()) {
                ++failures;
                log << "FAIL seed=" << report.seed << " p=" << format_double(p)
                    << " gap_proj=" << format_double(report.gap_proj) << " gap_opt=" << format_double(report.gap_opt)
                    << " kappa=" << format_double(report.kappa)
                    << " sandwich_violation=" << format_double(report.sandwich_violation)
                    << " contraction=" << format_double(report.contraction_max_ratio) << "\n";
            }
        }
    }
    prepare(config, out);
    write_csv(out / "bounds.csv", bound_csv_header(), rows);
    write_json_file((out / "bounds.json").string(), reports);
    log << rows.size() - static_cast<std::size_t>(failures) << "/" << rows.size() << " bound reports passed\n";
    return failures == 0 ? 0 : 1;
}

int cmd_train(const RunConfig& config, const fs::path& out, std::ostream& log)
{
    const Problem problem = make_problem(config);
    const DistillConfig dc = config.distill();
    const IqlConfig& iql = dc.iql;
    const CandidateSets sets = build_candidate_sets(problem.mdp, problem.teacher, iql.p, dc.mode);
    const Policy data_policy = iql.projected_sampling ? project_policy(problem.teacher, sets) : problem.teacher;

    prepare(config, out);
    TransitionBatch batch;
    if (iql.exact_mode) {
        batch = exact_batch(problem.mdp, occupancy_measure(problem.mdp, data_policy, uniform_start(problem.mdp)));
    } else {
        const TrajectoryDataset data =
            generate_teacher_dataset(problem.mdp, problem.teacher, iql.projected_sampling ? &sets : nullptr,
                                     dc.n_per_prompt, iql.seed, problem.teacher_id);
        const auto samples = data.transitions(problem.mdp);
        batch = sampled_batch(samples, data.records.size(), iql.gamma);
        std::ofstream jsonl(out / "dataset.jsonl", std::ios::binary | std::ios::trunc);
        write_dataset_jsonl(jsonl, data);
    }

    TrainHooks hooks;
    hooks.on_epoch = [&](int, const QTable& q) {
        const EvalReport r = evaluate_student(problem.mdp, problem.teacher, q, sets);
        return EpochEvaluation{r.kl_forward, r.return_gap};
    };
    const TrainResult result = train_iql(problem.mdp, batch, sets, iql, hooks);
    result.metrics.write_csv((out / "metrics.csv").string());
    write_json_file((out / "q.json").string(), table_to_json(result.q));
    log << "trained " << iql.epochs << " epochs; final J = "
        << format_double(result.metrics.at(result.metrics.size() - 1, "J_total")) << "\n";
    return 0;
}

int cmd_distill(const RunConfig& config, const fs::path& out, std::ostream& log)
{
    const Problem problem = make_problem(config);
    const DistillConfig dc = config.distill();

    std::vector<std::pair<StateId, ActionId>> pt;
    if (config.flag("distill.use_pt_data")) {
        const TrajectoryDataset pt_data = generate_teacher_dataset(problem.mdp, problem.teacher, nullptr,
                                                                   dc.n_per_prompt, dc.iql.seed + 1, "pretraining");
        pt = state_action_pairs(pt_data.transitions(problem.mdp));
    }
    const DistillResult result = bellman_distill(problem.mdp, problem.teacher, dc, pt.empty() ? nullptr : &pt);

    prepare(config, out);
    result.metrics.write_csv((out / "metrics.csv").string());
    write_json_file((out / "q.json").string(), table_to_json(result.q));
    write_json_file((out / "q_final.json").string(), table_to_json(result.final_q));
    nlohmann::json eval = to_json(result.report);
    eval["best_epoch"] = result.best_epoch;
    eval["best_validation_kl"] = result.best_validation_kl;
    eval["lm_weight"] = result.lm_weight;
    eval["kappa"] = kappa(dc.iql.p, dc.iql.gamma);
    write_json_file((out / "eval.json").string(), eval);
    write_csv(out / "eval.csv", "best_epoch,kl_forward,kl_reverse,return_gap,q_gap_supported,kl_forward_visited,q_gap_visited,kappa",
              {std::to_string(result.best_epoch) + "," + format_double(result.report.kl_forward) + "," +
               format_double(result.report.kl_reverse) + "," + format_double(result.report.return_gap) + "," +
               format_double(result.report.q_gap_supported) + "," +
               format_double(result.report.kl_forward_visited) + "," + format_double(result.report.q_gap_visited) +
               "," + format_double(kappa(dc.iql.p, dc.iql.gamma))});
    if (result.dataset) {
        std::ofstream jsonl(out / "dataset.jsonl", std::ios::binary | std::ios::trunc);
        write_dataset_jsonl(jsonl, *result.dataset);
    }
    log << "best epoch " << result.best_epoch << ": KL(proj teacher || student) = "
        << format_double(result.report.kl_forward) << ", supported Q gap = "
        << format_double(result.report.q_gap_supported) << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& config, const fs::path& out, std::ostream& log)
{
    const Problem problem = make_problem(config);
    const std::vector<double> p_list = config.numbers("ablate.p_list");
    const std::vector<AblationRow> table = ablate_p(problem.mdp, problem.teacher, p_list, config.distill());
    std::vector<std::string> rows;
    for (const AblationRow& row : table) {
        rows.push_back(ablation_csv_row(row));
        log << "p=" << format_double(row.p) << " support=" << row.support_size
            << " KL=" << format_double(row.report.kl_forward) << "\n";
    }
    prepare(config, out);
    write_csv(out / "ablate.csv", ablation_csv_header(), rows);
    return 0;
}

int cmd_sparsity(const RunConfig& config, const fs::path& out, std::ostream& log)
{
    const NgramMdp built = corpus_problem(config, config.number("iql.gamma"));
    const int n_sequences = static_cast<int>(config.integer("corpus.n_sequences"));
    const SparsityProfile profile = sparsity_profile(built.teacher, built.mdp, n_sequences, config.seed());

    prepare(config, out);
    std::ostringstream csv;
    write_profile_csv(csv, profile);
    write_text_file((out / "profile.csv").string(), csv.str());
    const nlohmann::json summary{{"vocab_size", built.mdp.vocab_size},
                                 {"n_contexts", profile.n_contexts},
                                 {"n_sequences", profile.n_sequences},
                                 {"mass_top7", profile.mass_at(7)},
                                 {"mass_top50", profile.mass_at(50)}};
    write_json_file((out / "profile.json").string(), summary);
    log << "vocabulary " << built.mdp.vocab_size << ", " << profile.n_contexts << " contexts; top-7 mass "
        << format_double(profile.mass_at(7)) << ", top-50 mass " << format_double(profile.mass_at(50)) << "\n";
    return 0;
}

int run_command(const std::string& command, const RunConfig& config, const fs::path& out, std::ostream& log)
{
    if (command == "make-mdp") {
        return cmd_make_mdp(config, out, log);
    }
    if (command == "verify") {
        return cmd_verify(config, out, log);
    }
    if (command == "train") {
        return cmd_train(config, out, log);
    }
    if (command == "distill") {
        return cmd_distill(config, out, log);
    }
    if (command == "ablate") {
        return cmd_ablate(config, out, log);
    }
    if (command == "sparsity") {
        return cmd_sparsity(config, out, log);
    }
    throw DomainError("unknown command " + command);
}

} // namespace bdistill
