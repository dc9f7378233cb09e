#pragma once

#include "bdistill/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>

namespace bdistill {

/// Environment and teacher of a run: a random token MDP with its soft-optimal
/// policy ("synthetic" track) or an n-gram teacher over the corpus ("corpus" track).
struct Problem {
    TokenMdp mdp;
    Policy teacher;
    std::string teacher_id;
};

Problem make_problem(const RunConfig& config);

/// `n` prompts of length `order` taken at evenly spaced offsets of `text`.
std::vector<std::string> corpus_prompts(std::string_view text, int order, int n);

/// --out, then run.out, then $BDISTILL_OUT/<command>, then runs/<command>.
std::filesystem::path resolve_output_dir(const RunConfig& config, const std::string& command);

// Each command writes config.json (the effective flat configuration) next to
// its artifacts and returns the process exit status.

/// mdp.json, teacher.json, qstar.json.
int cmd_make_mdp(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);
/// bounds.csv and bounds.json over verify.instances seeds x verify.p_list; status 1 iff a check fails.
int cmd_verify(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);
/// Plain projected IQL on teacher data: metrics.csv, q.json, dataset.jsonl (sampled mode).
int cmd_train(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);
/// Bellman Distill with checkpoint selection: metrics.csv, q.json, q_final.json, eval.json, eval.csv.
int cmd_distill(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);
/// ablate.csv, one row per ablate.p_list entry.
int cmd_ablate(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);
/// profile.csv and profile.json for the corpus n-gram teacher.
int cmd_sparsity(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);

/// Dispatch by command name ("make-mdp", "verify", "train", "distill", "ablate", "sparsity").
int run_command(const std::string& command, const RunConfig& config, const std::filesystem::path& out,
                std::ostream& log);

} // namespace bdistill
