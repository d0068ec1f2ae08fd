#pragma once

#include "prefopt/core.hpp"
#include "prefopt/prefmodel.hpp"

#include "json.hpp"

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace prefopt::io {

using json = nlohmann::json;

namespace detail {

inline ResponseSpace space_from(const json& j, const std::string& where)
{
    if (!j.contains("responses_per_prompt") || !j["responses_per_prompt"].is_array()) {
        throw UsageError(where + ": missing array field 'responses_per_prompt'");
    }
    std::vector<std::size_t> counts;
    for (const auto& c : j["responses_per_prompt"]) {
        if (!c.is_number_unsigned()) throw UsageError(where + ": 'responses_per_prompt' entries must be unsigned integers");
        counts.push_back(c.get<std::size_t>());
    }
    return ResponseSpace(std::move(counts));
}

inline Table table_from(const json& j, const char* field, const std::string& where)
{
    if (!j.contains(field) || !j[field].is_array()) {
        throw UsageError(where + ": missing array field '" + field + "'");
    }
    Table t;
    for (const auto& row : j[field]) {
        if (!row.is_array()) throw UsageError(where + ": field '" + field + "' must be a matrix");
        std::vector<double> r;
        for (const auto& v : row) {
            if (!v.is_number()) throw UsageError(where + ": field '" + field + "' has a non-numeric entry");
            r.push_back(v.get<double>());
        }
        t.push_back(std::move(r));
    }
    return t;
}

inline double number_from(const json& j, const char* field, const std::string& where)
{
    if (!j.contains(field) || !j[field].is_number()) {
        throw UsageError(where + ": missing numeric field '" + field + "'");
    }
    return j[field].get<double>();
}

inline std::size_t index_from(const json& j, const char* field, const std::string& where)
{
    if (!j.contains(field) || !j[field].is_number_unsigned()) {
        throw UsageError(where + ": missing index field '" + field + "'");
    }
    return j[field].get<std::size_t>();
}

} // namespace detail

inline std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot open '" + path + "' for writing");
    out << bytes;
    if (!out) throw UsageError("write to '" + path + "' failed");
}

inline json parse_json(const std::string& text, const std::string& where)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw UsageError(where + ": " + e.what());
    }
}

// Deterministic text form: sorted keys (nlohmann objects are ordered maps) and
// shortest round-trip doubles.
inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---- policy ---------------------------------------------------------------

inline json policy_to_json(const TabularPolicy& policy)
{
    json j;
    j["responses_per_prompt"] = policy.space().responses_per_prompt();
    j["logits"] = policy.logits();
    return j;
}

inline TabularPolicy policy_from_json(const json& j, const std::string& where = "policy")
{
    auto space = detail::space_from(j, where);
    auto logits = detail::table_from(j, "logits", where);
    try {
        return TabularPolicy(std::move(space), std::move(logits));
    } catch (const UsageError& e) {
        throw UsageError(where + ": " + e.what());
    }
}

inline void save_policy(const std::string& path, const TabularPolicy& policy, const std::string& config_hash = {})
{
    auto j = policy_to_json(policy);
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    write_file(path, dump(j));
}

inline TabularPolicy load_policy(const std::string& path)
{
    return policy_from_json(parse_json(read_file(path), path), path);
}

// ---- reward ---------------------------------------------------------------

inline json reward_to_json(const RewardTable& reward)
{
    json j;
    j["responses_per_prompt"] = reward.space().responses_per_prompt();
    j["rewards"] = reward.values();
    return j;
}

inline RewardTable reward_from_json(const json& j, const std::string& where = "reward")
{
    auto space = detail::space_from(j, where);
    auto values = detail::table_from(j, "rewards", where);
    try {
        return RewardTable(std::move(space), std::move(values));
    } catch (const UsageError& e) {
        throw UsageError(where + ": " + e.what());
    }
}

inline void save_reward(const std::string& path, const RewardTable& reward, const std::string& config_hash = {})
{
    auto j = reward_to_json(reward);
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    write_file(path, dump(j));
}

inline RewardTable load_reward(const std::string& path)
{
    return reward_from_json(parse_json(read_file(path), path), path);
}

// ---- dataset (JSON lines) -------------------------------------------------

inline std::string dataset_to_jsonl(const PreferenceDataset& ds, const std::string& config_hash = {})
{
    json header;
    header["responses_per_prompt"] = ds.space().responses_per_prompt();
    if (const auto& m = ds.ref_meta()) {
        header["ref_meta"] = {{"policy_hash", m->policy_hash},
                              {"gamma", m->gamma},
                              {"tau", m->tau},
                              {"beta", m->beta},
                              {"margin", to_string(m->margin)}};
    }
    if (!config_hash.empty()) header["config_hash"] = config_hash;
    std::string out = header.dump() + "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& p = ds.pairs()[i];
        json line = {{"prompt", p.prompt}, {"yw", p.yw}, {"yl", p.yl}, {"weight", p.weight}};
        if (ds.has_ref_stats()) {
            const auto& s = ds.ref_stats()[i];
            line["ref"] = {{"delta_ref", s.delta_ref},
                           {"pw", s.pw},
                           {"pl", s.pl},
                           {"gamma_ref", s.gamma_ref},
                           {"psi_cons", s.psi_cons}};
        }
        out += line.dump() + "\n";
    }
    return out;
}

inline PreferenceDataset dataset_from_jsonl(const std::string& text, const std::string& where = "dataset")
{
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::optional<ResponseSpace> space;
    std::optional<RefMeta> meta;
    std::vector<PreferencePair> pairs;
    std::vector<RefStats> stats;
    std::size_t with_ref = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string at = where + ":" + std::to_string(lineno);
        const json j = parse_json(line, at);
        if (!space) {
            space = detail::space_from(j, at);
            if (j.contains("ref_meta")) {
                const auto& m = j["ref_meta"];
                RefMeta r;
                if (!m.contains("policy_hash") || !m["policy_hash"].is_string()) {
                    throw UsageError(at + ": ref_meta needs string field 'policy_hash'");
                }
                r.policy_hash = m["policy_hash"].get<std::string>();
                r.gamma = detail::number_from(m, "gamma", at + " ref_meta");
                r.tau = detail::number_from(m, "tau", at + " ref_meta");
                r.beta = detail::number_from(m, "beta", at + " ref_meta");
                const std::string form = m.value("margin", std::string("adaptive"));
                if (form == "adaptive") {
                    r.margin = MarginForm::adaptive;
                } else if (form == "constant") {
                    r.margin = MarginForm::constant;
                } else {
                    throw UsageError(at + ": ref_meta field 'margin' must be 'adaptive' or 'constant'");
                }
                meta = r;
            }
            continue;
        }
        PreferencePair p;
        p.prompt = detail::index_from(j, "prompt", at);
        p.yw = detail::index_from(j, "yw", at);
        p.yl = detail::index_from(j, "yl", at);
        p.weight = j.contains("weight") ? detail::number_from(j, "weight", at) : 1.0;
        pairs.push_back(p);
        if (j.contains("ref")) {
            const auto& r = j["ref"];
            stats.push_back({detail::number_from(r, "delta_ref", at + " ref"), detail::number_from(r, "pw", at + " ref"),
                             detail::number_from(r, "pl", at + " ref"), detail::number_from(r, "gamma_ref", at + " ref"),
                             detail::number_from(r, "psi_cons", at + " ref")});
            ++with_ref;
        }
    }
    if (!space) throw UsageError(where + ": empty dataset file");
    try {
        if (with_ref == 0) {
            if (meta) throw UsageError("header declares ref_meta but no pair carries a ref block");
            return PreferenceDataset(std::move(*space), std::move(pairs));
        }
        if (with_ref != pairs.size()) throw UsageError("ref block present on some pairs but not all");
        return PreferenceDataset(std::move(*space), std::move(pairs), std::move(stats), std::move(meta));
    } catch (const UsageError& e) {
        throw UsageError(where + ": " + e.what());
    }
}

inline void save_dataset(const std::string& path, const PreferenceDataset& ds, const std::string& config_hash = {})
{
    write_file(path, dataset_to_jsonl(ds, config_hash));
}

inline PreferenceDataset load_dataset(const std::string& path) { return dataset_from_jsonl(read_file(path), path); }

} // namespace prefopt::io
