#pragma once

#include "bdistill/corpus.hpp"
#include "bdistill/distill.hpp"
#include "bdistill/top_p.hpp"

#include <json.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace bdistill {

using json = nlohmann::json;

// Structured-text documents. Doubles are written in shortest round-trip form,
// so reading a document back reproduces every value bit for bit. NaN entries
// (off-support values of top-p tables) are written as null.

json to_json(const TokenMdp& mdp);
TokenMdp mdp_from_json(const json& doc);

/// {"rows", "cols", "values": flat row-major}.
json table_to_json(const QTable& table);
QTable table_from_json(const json& doc);

json to_json(const Policy& policy);
Policy policy_from_json(const json& doc);

json to_json(const OccupancyMeasure& occupancy);
json to_json(const CandidateSets& sets);
json to_json(const BoundReport& report);
json to_json(const EvalReport& report);

/// Header of the bound-report CSV.
std::string bound_csv_header();
std::string bound_csv_row(const BoundReport& report);

/// One JSON object per line: {prompt_id, tokens, seed, projected}.
void write_dataset_jsonl(std::ostream& out, const TrajectoryDataset& data);
TrajectoryDataset read_dataset_jsonl(std::istream& in);

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

/// rank,mean_prob,cumulative with 1-based ranks.
void write_profile_csv(std::ostream& out, const SparsityProfile& profile);

void write_json_file(const std::string& path, const json& doc);
json read_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

} // namespace bdistill
