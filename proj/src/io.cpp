#include "bdistill/io.hpp"

#include "bdistill/errors.hpp"
#include "bdistill/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace bdistill {

// ---- metrics --------------------------------------------------------------

MetricsLog::MetricsLog(std::vector<std::string> columns) : columns_(std::move(columns)) {}

void MetricsLog::append(std::vector<double> row)
{
    if (row.size() != columns_.size()) {
        throw DomainError("metrics row has " + std::to_string(row.size()) + " values for " +
                          std::to_string(columns_.size()) + " columns");
    }
    if (!rows_.empty() && !columns_.empty() && columns_.front() == "epoch" && row.front() < rows_.back().front()) {
        throw DomainError("epoch index must not decrease");
    }
    rows_.push_back(std::move(row));
}

std::size_t MetricsLog::column_index(const std::string& name) const
{
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        if (columns_[i] == name) {
            return i;
        }
    }
    throw DomainError("unknown metrics column " + name);
}

double MetricsLog::at(std::size_t row, const std::string& column) const
{
    return rows_.at(row).at(column_index(column));
}

std::vector<double> MetricsLog::column(const std::string& name) const
{
    const std::size_t c = column_index(name);
    std::vector<double> out;
    out.reserve(rows_.size());
    for (const auto& r : rows_) {
        out.push_back(r[c]);
    }
    return out;
}

void MetricsLog::write_csv(std::ostream& out) const
{
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        out << (i ? "," : "") << columns_[i];
    }
    out << '\n';
    for (const auto& r : rows_) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out << (i ? "," : "") << format_double(r[i]);
        }
        out << '\n';
    }
}

void MetricsLog::write_csv(const std::string& path) const
{
    std::ostringstream buffer;
    write_csv(buffer);
    write_text_file(path, buffer.str());
}

std::string format_double(double x)
{
    if (std::isnan(x)) {
        return "nan";
    }
    if (std::isinf(x)) {
        return x > 0 ? "inf" : "-inf";
    }
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

// ---- documents ------------------------------------------------------------

namespace {

json flat_values(const QTable& t)
{
    json values = json::array();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        const double x = t.data()[i];
        values.push_back(std::isnan(x) ? json(nullptr) : json(x));
    }
    return values;
}

double read_double(const json& v)
{
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

} // namespace

json to_json(const TokenMdp& mdp)
{
    json next = json::array();
    for (Eigen::Index i = 0; i < mdp.next.size(); ++i) {
        next.push_back(mdp.next.data()[i]);
    }
    return json{{"vocab_size", mdp.vocab_size}, {"horizon", mdp.horizon},   {"gamma", mdp.gamma},
                {"prompts", mdp.prompts},       {"terminal", mdp.terminal}, {"num_states", mdp.num_states()},
                {"next", std::move(next)},      {"reward", flat_values(mdp.reward)}};
}

TokenMdp mdp_from_json(const json& doc)
{
    const int V = doc.at("vocab_size").get<int>();
    const auto& next_flat = doc.at("next");
    const auto& reward_flat = doc.at("reward");
    if (V < 1 || next_flat.size() % static_cast<std::size_t>(V) != 0 || reward_flat.size() != next_flat.size()) {
        throw DomainError("MDP document has inconsistent table sizes");
    }
    const int n = static_cast<int>(next_flat.size() / static_cast<std::size_t>(V));
    IndexTable next(n, V);
    QTable reward(n, V);
    for (int i = 0; i < n * V; ++i) {
        next.data()[i] = next_flat[static_cast<std::size_t>(i)].get<StateId>();
        reward.data()[i] = read_double(reward_flat[static_cast<std::size_t>(i)]);
    }
    return make_mdp(V, doc.at("horizon").get<int>(), doc.at("gamma").get<double>(),
                    doc.at("prompts").get<std::vector<StateId>>(), std::move(next), std::move(reward),
                    doc.value("terminal", -1));
}

json table_to_json(const QTable& table)
{
    return json{{"rows", table.rows()}, {"cols", table.cols()}, {"values", flat_values(table)}};
}

QTable table_from_json(const json& doc)
{
    const auto rows = doc.at("rows").get<Eigen::Index>();
    const auto cols = doc.at("cols").get<Eigen::Index>();
    const auto& values = doc.at("values");
    if (static_cast<Eigen::Index>(values.size()) != rows * cols) {
        throw DomainError("table document has the wrong number of values");
    }
    QTable t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        t.data()[i] = read_double(values[static_cast<std::size_t>(i)]);
    }
    return t;
}

json to_json(const Policy& policy)
{
    return table_to_json(policy.probs);
}

Policy policy_from_json(const json& doc)
{
    return Policy{table_from_json(doc)};
}

json to_json(const OccupancyMeasure& occupancy)
{
    json start = json::array();
    for (Eigen::Index i = 0; i < occupancy.start_dist.size(); ++i) {
        start.push_back(occupancy.start_dist[i]);
    }
    json doc = table_to_json(occupancy.mass);
    doc["start_dist"] = std::move(start);
    return doc;
}

json to_json(const CandidateSets& sets)
{
    json realized = json::array();
    for (Eigen::Index i = 0; i < sets.realized_mass.size(); ++i) {
        realized.push_back(sets.realized_mass[i]);
    }
    return json{{"nominal_p", sets.nominal_p},
                {"mode", sets.mode == CandidateMode::state_union ? "union" : "state"},
                {"actions", sets.actions},
                {"realized_mass", std::move(realized)}};
}

json to_json(const BoundReport& r)
{
    return json{{"seed", r.seed},
                {"vocab_size", r.vocab_size},
                {"horizon", r.horizon},
                {"gamma", r.gamma},
                {"p", r.p},
                {"min_realized_mass", r.min_realized_mass},
                {"kappa", r.kappa},
                {"kappa_realized", r.kappa_realized},
                {"gap_proj", r.gap_proj},
                {"gap_opt", r.gap_opt},
                {"sandwich_violation", r.sandwich_violation},
                {"contraction_max_ratio", r.contraction_max_ratio},
                {"tol", r.tol},
                {"asserted", r.asserted},
                {"pass_sandwich", r.pass_sandwich},
                {"pass_gap_proj", r.pass_gap_proj},
                {"pass_gap_opt", r.pass_gap_opt},
                {"pass_realized", r.pass_realized},
                {"pass_contraction", r.pass_contraction},
                {"pass", r.pass()}};
}

json to_json(const EvalReport& r)
{
    return json{{"kl_forward", r.kl_forward},
                {"kl_reverse", r.kl_reverse},
                {"return_gap", r.return_gap},
                {"q_gap_supported", r.q_gap_supported},
                {"kl_forward_visited", r.kl_forward_visited},
                {"q_gap_visited", r.q_gap_visited}};
}

std::string bound_csv_header()
{
    return "seed,V,H,gamma,p,min_realized_mass,kappa_nominal,kappa_realized,gap_proj,gap_opt,"
           "sandwich_violation,contraction_max_ratio,pass";
}

std::string bound_csv_row(const BoundReport& r)
{
    std::ostringstream out;
    out << r.seed << ',' << r.vocab_size << ',' << r.horizon << ',' << format_double(r.gamma) << ','
        << format_double(r.p) << ',' << format_double(r.min_realized_mass) << ',' << format_double(r.kappa) << ','
        << format_double(r.kappa_realized) << ',' << format_double(r.gap_proj) << ','
        << format_double(r.gap_opt) << ',' << format_double(r.sandwich_violation) << ','
        << format_double(r.contraction_max_ratio) << ',' << (r.pass() ? 1 : 0);
    return out.str();
}

void write_dataset_jsonl(std::ostream& out, const TrajectoryDataset& data)
{
    for (const TrajectoryRecord& r : data.records) {
        const json line{{"prompt_id", r.prompt}, {"tokens", r.tokens}, {"seed", r.seed}, {"projected", r.projected}};
        out << line.dump() << '\n';
    }
}

TrajectoryDataset read_dataset_jsonl(std::istream& in)
{
    TrajectoryDataset data;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json doc = json::parse(line);
        TrajectoryRecord r;
        r.prompt = doc.at("prompt_id").get<StateId>();
        r.tokens = doc.at("tokens").get<std::vector<ActionId>>();
        r.seed = doc.at("seed").get<std::uint64_t>();
        r.projected = doc.at("projected").get<bool>();
        data.projected = r.projected;
        data.records.push_back(std::move(r));
    }
    return data;
}

std::string ablation_csv_header()
{
    return "p,kappa,min_realized_mass,support_size,best_epoch,final_objective,kl_forward,kl_reverse,"
           "return_gap,q_gap_supported";
}

std::string ablation_csv_row(const AblationRow& row)
{
    std::ostringstream out;
    out << format_double(row.p) << ',' << format_double(row.kappa) << ',' << format_double(row.min_realized_mass)
        << ',' << row.support_size << ',' << row.best_epoch << ',' << format_double(row.final_objective) << ','
        << format_double(row.report.kl_forward) << ',' << format_double(row.report.kl_reverse) << ','
        << format_double(row.report.return_gap) << ',' << format_double(row.report.q_gap_supported);
    return out.str();
}

void write_profile_csv(std::ostream& out, const SparsityProfile& profile)
{
    out << "rank,mean_prob,cumulative\n";
    for (Eigen::Index i = 0; i < profile.mean_probs.size(); ++i) {
        out << (i + 1) << ',' << format_double(profile.mean_probs[i]) << ','
            << format_double(profile.cumulative[i]) << '\n';
    }
}

void write_text_file(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << text;
    if (!out) {
        throw std::runtime_error("write failed for " + path);
    }
}

void write_json_file(const std::string& path, const json& doc)
{
    write_text_file(path, doc.dump(1) + "\n");
}

json read_json_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    return json::parse(in);
}

} // namespace bdistill
