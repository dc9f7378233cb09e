#pragma once

#include "bdistill/distill.hpp"
#include "bdistill/mdp.hpp"
#include "bdistill/top_p.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace bdistill {

/**
 * Effective run configuration: a flat JSON object whose keys carry a section
 * prefix ("mdp.vocab_size", "iql.alpha", ...). Every key has a default, so the
 * echoed document always spells out the full configuration, and parsing that
 * echo yields an identical RunConfig.
 *
 * Sections: run, mdp, iql, distill, verify, ablate, corpus. The MDP discount
 * is iql.gamma; the trainer and the environment always share it.
 */
class RunConfig {
public:
    RunConfig();

    /// Defaults overlaid with `flat`; unknown keys and wrongly typed values throw DomainError.
    static RunConfig from_json(const nlohmann::json& flat);
    static RunConfig from_file(const std::string& path);

    void merge(const nlohmann::json& flat);
    void set(const std::string& key, nlohmann::json value);

    const nlohmann::json& values() const { return values_; }
    bool operator==(const RunConfig& other) const { return values_ == other.values_; }

    double number(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::string text(const std::string& key) const;
    std::vector<double> numbers(const std::string& key) const;

    std::uint64_t seed() const;

    MdpGenSpec mdp_spec() const;
    IqlConfig iql() const;
    DistillConfig distill() const;
    BoundOptions bound_options() const;

    static std::vector<std::string> keys();

private:
    nlohmann::json values_;
};

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootVar = "BDISTILL_OUT";

} // namespace bdistill
