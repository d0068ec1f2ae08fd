#pragma once

#include "prefopt/core.hpp"
#include "prefopt/diagnostics.hpp"
#include "prefopt/io.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/oracles.hpp"
#include "prefopt/prefmodel.hpp"
#include "prefopt/rng.hpp"
#include "prefopt/solvers.hpp"
#include "prefopt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace prefopt::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, validation_error = 2, numeric_failure = 3 };

struct Context {
    json config;             // effective config, seed override applied
    std::string config_dir;  // relative input paths resolve against this
    std::string out_dir = ".";
    unsigned jobs = 1;
    std::string config_hash;

    std::string out(const std::string& name) const { return (fs::path(out_dir) / name).string(); }
};

// ---- config access with file/field context ---------------------------------

namespace detail {

inline const json& section(const json& cfg, const char* name)
{
    static const json empty = json::object();
    if (!cfg.contains(name)) return empty;
    if (!cfg[name].is_object()) throw UsageError("config: field '" + std::string(name) + "' must be an object");
    return cfg[name];
}

inline double num(const json& j, const char* field, const std::string& where, std::optional<double> dflt = {})
{
    if (!j.contains(field)) {
        if (dflt) return *dflt;
        throw UsageError("config: missing numeric field '" + where + "." + field + "'");
    }
    if (!j[field].is_number()) throw UsageError("config: field '" + where + "." + field + "' must be a number");
    return j[field].get<double>();
}

inline std::uint64_t count(const json& j, const char* field, const std::string& where, std::optional<std::uint64_t> dflt = {})
{
    if (!j.contains(field)) {
        if (dflt) return *dflt;
        throw UsageError("config: missing integer field '" + where + "." + field + "'");
    }
    if (!j[field].is_number_unsigned()) {
        throw UsageError("config: field '" + where + "." + field + "' must be a non-negative integer");
    }
    return j[field].get<std::uint64_t>();
}

inline std::string str(const json& j, const char* field, const std::string& where, std::optional<std::string> dflt = {})
{
    if (!j.contains(field)) {
        if (dflt) return *dflt;
        throw UsageError("config: missing string field '" + where + "." + field + "'");
    }
    if (!j[field].is_string()) throw UsageError("config: field '" + where + "." + field + "' must be a string");
    return j[field].get<std::string>();
}

inline std::uint64_t master_seed(const json& cfg) { return count(cfg, "seed", "", 0); }

// Per-stage seed: explicit value wins, otherwise derived from the master seed.
inline std::uint64_t stage_seed(const json& cfg, const json& sec, const std::string& where, std::uint64_t tag)
{
    if (sec.contains("seed")) return count(sec, "seed", where);
    return splitmix64(master_seed(cfg) ^ splitmix64(tag));
}

inline std::string resolve(const Context& ctx, const std::string& path)
{
    const fs::path p(path);
    if (p.is_absolute()) return p.string();
    return (fs::path(ctx.config_dir) / p).string();
}

inline std::string require_file(const std::string& path, const std::string& what)
{
    if (!fs::exists(path)) throw UsageError("input '" + what + "': file '" + path + "' does not exist");
    return path;
}

// Inputs default to the artifacts a previous 'generate' wrote into the out dir.
inline std::string input_path(const Context& ctx, const char* key, const std::string& default_name)
{
    const auto& in = section(ctx.config, "inputs");
    if (in.contains(key)) return require_file(resolve(ctx, str(in, key, "inputs")), key);
    return require_file(ctx.out(default_name), key);
}

inline double beta_of(const json& cfg) { return num(cfg, "beta", "", 1.0); }
inline double gamma_of(const json& cfg) { return num(cfg, "gamma", "", 0.0); }
inline double tau_of(const json& cfg) { return num(cfg, "tau", "", 1.0); }

inline MarginForm margin_of(const json& cfg)
{
    const auto s = str(cfg, "margin", "", std::string("adaptive"));
    if (s == "adaptive") return MarginForm::adaptive;
    if (s == "constant") return MarginForm::constant;
    throw UsageError("config: field 'margin' must be 'adaptive' or 'constant'");
}

inline ResponseSpace space_of(const json& cfg)
{
    const auto& s = section(cfg, "space");
    if (s.contains("responses_per_prompt")) return io::detail::space_from(s, "config: space");
    return ResponseSpace::uniform(count(s, "prompts", "space", 4), count(s, "responses", "space", 2));
}

inline json json_of(const ViolationReport& v, bool per_pair)
{
    json j = {{"fraction_violated", v.fraction_violated},
              {"fraction_delta_ref_negative", v.fraction_delta_ref_negative},
              {"num_violated", v.num_violated},
              {"num_pairs", v.pairs.size()},
              {"num_reward_contradicting", v.num_reward_contradicting},
              {"delta_ref_mean", v.delta_ref_mean},
              {"delta_ref_std", v.delta_ref_std},
              {"reward_term_mean", v.reward_term_mean}};
    if (per_pair) {
        json arr = json::array();
        for (const auto& p : v.pairs) {
            arr.push_back({{"delta_ref", p.delta_ref},
                           {"reward_term", p.reward_term},
                           {"delta_ref_negative", p.delta_ref_negative},
                           {"assumption_violated", p.assumption_violated},
                           {"reward_contradicting", p.reward_contradicting}});
        }
        j["pairs"] = arr;
    }
    return j;
}

// Run tasks on up to `jobs` threads; results land in index order, so output never
// depends on the thread count.
template <class T>
std::vector<T> run_parallel(unsigned jobs, std::size_t n, const std::function<T(std::size_t)>& task)
{
    std::vector<T> out(n);
    const std::size_t width = std::max<std::size_t>(1, jobs);
    for (std::size_t start = 0; start < n; start += width) {
        std::vector<std::future<T>> batch;
        for (std::size_t i = start; i < std::min(n, start + width); ++i) {
            batch.push_back(std::async(width == 1 ? std::launch::deferred : std::launch::async, task, i));
        }
        for (std::size_t i = 0; i < batch.size(); ++i) out[start + i] = batch[i].get();
    }
    return out;
}

} // namespace detail

// ---- synthetic construction ------------------------------------------------

inline RewardTable random_reward(const ResponseSpace& space, double lo, double hi, std::uint64_t seed)
{
    if (!(lo <= hi)) throw UsageError("reward: need low <= high");
    Rng rng(seed);
    Table t = space.zeros();
    for (auto& row : t)
        for (double& v : row) v = rng.uniform(lo, hi);
    return RewardTable(space, std::move(t));
}

inline TabularPolicy random_policy(const ResponseSpace& space, double scale, std::uint64_t seed)
{
    Rng rng(seed);
    Table t = space.zeros();
    for (auto& row : t)
        for (double& v : row) v = rng.uniform(-scale, scale);
    return TabularPolicy(space, std::move(t));
}

struct Corruption {
    TabularPolicy reference;
    std::vector<std::size_t> selected;  // pair indices pushed into violation
    std::size_t sweeps = 0;
};

// Raise the loser's logit on a seeded R-fraction of pairs until
// delta_ref <= -dr/beta - depth there. Selection is a prefix of one seeded
// permutation, so a larger R always corrupts a superset of pairs.
inline Corruption corrupt_reference(const TabularPolicy& base, const PreferenceDataset& dataset,
                                    const RewardTable& reward, double beta, double fraction, double depth,
                                    std::uint64_t seed)
{
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw UsageError("corruption: fraction must lie in [0, 1]");
    if (!(depth > 0.0)) throw UsageError("corruption: depth must be > 0");
    const std::size_t n = dataset.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));

    Corruption c;
    c.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
    Table logits = base.logits();
    for (c.sweeps = 0; c.sweeps < 100; ++c.sweeps) {
        bool changed = false;
        for (auto i : c.selected) {
            const auto& p = dataset.pairs()[i];
            const double target = -reward.diff(p.prompt, p.yw, p.yl) / beta - depth;
            const double d = logits[p.prompt][p.yw] - logits[p.prompt][p.yl];
            if (d > target) {
                logits[p.prompt][p.yl] += d - target;
                changed = true;
            }
        }
        if (!changed) break;
    }
    c.reference = take == 0 ? base : TabularPolicy(base.space(), std::move(logits));
    return c;
}

// ---- subcommands -----------------------------------------------------------

inline int cmd_generate(const Context& ctx)
{
    const auto& cfg = ctx.config;
    const auto space = detail::space_of(cfg);
    const double beta = detail::beta_of(cfg);
    json seeds;

    // reward
    const auto& rs = detail::section(cfg, "reward");
    RewardTable reward;
    if (detail::str(rs, "kind", "reward", std::string("random")) == "file") {
        reward = io::load_reward(detail::require_file(detail::resolve(ctx, detail::str(rs, "path", "reward")), "reward"));
    } else {
        const auto s = detail::stage_seed(cfg, rs, "reward", 1);
        seeds["reward"] = s;
        reward = random_reward(space, detail::num(rs, "low", "reward", -1.0), detail::num(rs, "high", "reward", 1.0), s);
    }
    if (!(reward.space() == space) && detail::section(cfg, "space").empty() == false) {
        throw UsageError("config: reward file shape differs from 'space'");
    }
    const auto& sp = reward.space();

    // base reference
    const auto& ps = detail::section(cfg, "reference");
    const auto kind = detail::str(ps, "kind", "reference", std::string("aligned"));
    TabularPolicy base;
    if (kind == "file") {
        base = io::load_policy(detail::require_file(detail::resolve(ctx, detail::str(ps, "path", "reference")), "reference"));
    } else if (kind == "random") {
        const auto s = detail::stage_seed(cfg, ps, "reference", 2);
        seeds["reference"] = s;
        base = random_policy(sp, detail::num(ps, "scale", "reference", 1.0), s);
    } else if (kind == "uniform") {
        base = TabularPolicy::uniform(sp);
    } else if (kind == "aligned") {
        // closed-form RLHF policy from uniform: every delta_ref agrees with the reward
        base = rlhf_closed_form(TabularPolicy::uniform(sp), reward, detail::num(ps, "beta", "reference", 1.0));
    } else {
        throw UsageError("config: reference.kind must be one of file, random, uniform, aligned");
    }
    if (!(base.space() == sp)) throw UsageError("config: reference shape differs from reward shape");

    // dataset
    const auto& ds = detail::section(cfg, "dataset");
    const auto label = detail::str(ds, "label", "dataset", std::string("bt_mode"));
    if (label != "bt_mode" && label != "bt_sample") throw UsageError("config: dataset.label must be bt_mode or bt_sample");
    const auto dseed = detail::stage_seed(cfg, ds, "dataset", 3);
    seeds["dataset"] = dseed;
    auto data = sample_dataset(reward, detail::count(ds, "pairs_per_prompt", "dataset", 1), dseed,
                               label == "bt_mode" ? LabelMode::bt_mode : LabelMode::bt_sample,
                               detail::count(ds, "observations_per_pair", "dataset", 1));

    // corruption
    const auto& cs = detail::section(ps, "corruption");
    const double fraction = detail::num(cs, "fraction", "reference.corruption", 0.0);
    TabularPolicy reference = base;
    std::size_t selected = 0;
    if (fraction > 0.0) {
        const auto cseed = detail::stage_seed(cfg, cs, "reference.corruption", 4);
        seeds["corruption"] = cseed;
        auto c = corrupt_reference(base, data, reward, beta, fraction, detail::num(cs, "depth", "reference.corruption", 2.0),
                                   cseed);
        reference = c.reference;
        selected = c.selected.size();
    }

    data = precompute_ref_stats(data, reference, detail::gamma_of(cfg), detail::tau_of(cfg), beta, detail::margin_of(cfg));
    const auto viol = violation_stats(data, reference, reward, beta);

    fs::create_directories(ctx.out_dir);
    io::save_reward(ctx.out("reward.json"), reward, ctx.config_hash);
    io::save_policy(ctx.out("base_reference.json"), base, ctx.config_hash);
    io::save_policy(ctx.out("reference.json"), reference, ctx.config_hash);
    io::save_dataset(ctx.out("dataset.jsonl"), data, ctx.config_hash);

    json files;
    for (const char* f : {"reward.json", "base_reference.json", "reference.json", "dataset.jsonl"}) {
        files[f] = sha256_hex(io::read_file(ctx.out(f)));
    }
    json manifest = {{"config_hash", ctx.config_hash},
                     {"seed", detail::master_seed(cfg)},
                     {"seeds", seeds.is_null() ? json::object() : seeds},
                     {"files", files},
                     {"reference_hash", reference.content_hash()},
                     {"num_pairs", data.size()},
                     {"beta", beta},
                     {"corruption_fraction", fraction},
                     {"corrupted_pairs", selected},
                     {"violation_fraction", viol.fraction_violated},
                     {"num_violated", viol.num_violated}};
    io::write_file(ctx.out("manifest.json"), io::dump(manifest));
    return ok;
}

namespace detail {

// Dataset whose ref_stats match (gamma, tau, beta) for this reference, recomputing
// from the hash-verified reference if the stored ones were built for other values.
inline PreferenceDataset dataset_for(const PreferenceDataset& ds, const TabularPolicy& ref, double gamma, double tau,
                                     double beta, MarginForm form)
{
    if (ds.has_ref_stats()) {
        const auto& m = ds.ref_meta();
        if (!m) throw UsageError("dataset: ref_stats carry no reference hash");
        if (m->policy_hash != ref.content_hash()) {
            throw UsageError("dataset: stale ref_stats (reference policy hash mismatch)");
        }
        if (m->gamma == gamma && m->tau == tau && m->beta == beta && m->margin == form) return ds;
    }
    return precompute_ref_stats(ds, ref, gamma, tau, beta, form);
}

struct LossEntry {
    std::string name;
    LossSpec spec;
};

inline LossEntry loss_entry(const json& e, const json& cfg, const PreferenceDataset& ds, const TabularPolicy& ref,
                            const RewardTable* reward)
{
    if (!e.is_object()) throw UsageError("config: entries of 'losses' must be objects");
    LossEntry le;
    le.spec.kind = loss_kind_from(str(e, "kind", "losses[]"));
    le.spec.beta = num(e, "beta", "losses[]", beta_of(cfg));
    le.spec.tau = num(e, "tau", "losses[]", tau_of(cfg));
    if (e.contains("gamma_star_multiple")) {
        if (!reward) throw UsageError("config: gamma_star_multiple needs a reward file");
        const auto stats = dataset_for(ds, ref, 0.0, le.spec.tau, le.spec.beta, MarginForm::adaptive);
        le.spec.gamma = num(e, "gamma_star_multiple", "losses[]") * gamma_star(stats, ref, *reward, le.spec.beta);
    } else if (e.contains("gamma_star_cons_multiple")) {
        const auto stats = dataset_for(ds, ref, 0.0, le.spec.tau, le.spec.beta, MarginForm::adaptive);
        le.spec.gamma = num(e, "gamma_star_cons_multiple", "losses[]") * gamma_star_cons(stats).value;
    } else {
        le.spec.gamma = num(e, "gamma", "losses[]", gamma_of(cfg));
    }
    std::string lower = to_string(le.spec.kind);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
    le.name = str(e, "name", "losses[]", lower);
    le.spec.validate();
    return le;
}

} // namespace detail

inline int cmd_train(const Context& ctx)
{
    const auto& cfg = ctx.config;
    const auto ref = io::load_policy(detail::input_path(ctx, "reference", "reference.json"));
    const auto ds = io::load_dataset(detail::input_path(ctx, "dataset", "dataset.jsonl"));
    if (ds.has_ref_stats() && ds.ref_meta() && ds.ref_meta()->policy_hash != ref.content_hash()) {
        throw UsageError("train: dataset ref_stats do not belong to the given reference (hash mismatch)");
    }
    std::optional<RewardTable> reward;
    {
        const auto& in = detail::section(cfg, "inputs");
        const std::string rp = in.contains("reward") ? detail::resolve(ctx, detail::str(in, "reward", "inputs"))
                                                     : ctx.out("reward.json");
        if (fs::exists(rp)) reward = io::load_reward(rp);
    }

    const auto& ts = detail::section(cfg, "train");
    std::vector<detail::LossEntry> entries;
    if (cfg.contains("losses")) {
        if (!cfg["losses"].is_array() || cfg["losses"].empty()) throw UsageError("config: 'losses' must be a non-empty array");
        for (const auto& e : cfg["losses"]) entries.push_back(detail::loss_entry(e, cfg, ds, ref, reward ? &*reward : nullptr));
    } else {
        entries.push_back(detail::loss_entry(json{{"kind", "DPO"}}, cfg, ds, ref, nullptr));
    }
    for (std::size_t i = 0; i < entries.size(); ++i)
        for (std::size_t j = i + 1; j < entries.size(); ++j)
            if (entries[i].name == entries[j].name) throw UsageError("config: duplicate loss name '" + entries[i].name + "'");

    TrainConfig base;
    base.learning_rate = detail::num(ts, "learning_rate", "train", 0.1);
    base.steps = detail::count(ts, "steps", "train", 1000);
    base.record_every = detail::count(ts, "record_every", "train", 1);
    if (ts.contains("minibatch")) {
        const auto& mb = ts["minibatch"];
        if (!mb.is_object()) throw UsageError("config: train.minibatch must be an object");
        base.minibatch = Minibatch{detail::count(mb, "size", "train.minibatch"),
                                   detail::stage_seed(cfg, mb, "train.minibatch", 5)};
    }
    if (ts.contains("loss_optimum")) base.loss_optimum = detail::num(ts, "loss_optimum", "train");

    struct Outcome {
        TrainResult result;
        TrainConfig config;
    };
    const MarginForm form = detail::margin_of(cfg);
    const auto outcomes = detail::run_parallel<Outcome>(ctx.jobs, entries.size(), [&](std::size_t i) {
        TrainConfig tc = base;
        tc.spec = entries[i].spec;
        const auto data = detail::dataset_for(ds, ref, tc.spec.gamma, tc.spec.tau, tc.spec.beta, form);
        return Outcome{train(tc, data, ref), tc};
    });

    fs::create_directories(ctx.out_dir);
    json report = {{"config_hash", ctx.config_hash}, {"runs", json::array()}};
    bool aborted = false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& o = outcomes[i];
        const auto& name = entries[i].name;
        io::save_policy(ctx.out("policy_" + name + ".json"), o.result.policy, ctx.config_hash);
        const auto csv = trajectory_csv(o.result.trajectory);
        io::write_file(ctx.out("trajectory_" + name + ".csv"), csv);
        const auto ph = trajectory_phase_summary(o.result.trajectory);
        const auto& last = o.result.trajectory.records.back();
        report["runs"].push_back({{"name", name},
                                  {"kind", to_string(o.config.spec.kind)},
                                  {"beta", o.config.spec.beta},
                                  {"gamma", o.config.spec.gamma},
                                  {"tau", o.config.spec.tau},
                                  {"learning_rate", o.config.learning_rate},
                                  {"steps_completed", o.result.steps_completed},
                                  {"aborted", o.result.aborted},
                                  {"message", o.result.message},
                                  {"final_loss", last.loss},
                                  {"final_pref_acc", last.pref_acc},
                                  {"peak_frac_in_U", ph.peak_frac_in_U},
                                  {"peak_step", ph.peak_step},
                                  {"final_frac_in_U", ph.final_frac_in_U},
                                  {"trajectory_sha256", sha256_hex(csv)}});
        aborted = aborted || o.result.aborted;
    }
    io::write_file(ctx.out("train_report.json"), io::dump(report));
    return aborted ? numeric_failure : ok;
}

inline SolverConfig solver_config_of(const json& cfg)
{
    const auto& s = detail::section(cfg, "solve");
    SolverConfig sc;
    sc.beta = detail::num(s, "beta", "solve", detail::beta_of(cfg));
    sc.gamma = detail::num(s, "gamma", "solve", detail::gamma_of(cfg));
    sc.tau = detail::num(s, "tau", "solve", detail::tau_of(cfg));
    sc.tol = detail::num(s, "tol", "solve", 1e-10);
    sc.max_iters = detail::count(s, "max_iters", "solve", 10000);
    const auto anchor = detail::str(s, "anchor", "solve", std::string("self"));
    if (anchor == "self") {
        sc.anchor = MarginAnchor::self;
    } else if (anchor == "reference") {
        sc.anchor = MarginAnchor::reference;
    } else {
        throw UsageError("config: solve.anchor must be 'self' or 'reference'");
    }
    sc.validate();
    return sc;
}

inline int cmd_solve(const Context& ctx)
{
    const auto ref = io::load_policy(detail::input_path(ctx, "reference", "reference.json"));
    const auto reward = io::load_reward(detail::input_path(ctx, "reward", "reward.json"));
    const auto ds = io::load_dataset(detail::input_path(ctx, "dataset", "dataset.jsonl"));
    if (ds.has_ref_stats() && ds.ref_meta() && ds.ref_meta()->policy_hash != ref.content_hash()) {
        throw UsageError("solve: dataset ref_stats do not belong to the given reference (hash mismatch)");
    }
    const auto sc = solver_config_of(ctx.config);
    const auto rep = constrained_rlhf_fixed_point(ref, reward, ds, sc);

    fs::create_directories(ctx.out_dir);
    io::save_policy(ctx.out("solved_policy.json"), rep.policy, ctx.config_hash);
    json j = {{"config_hash", ctx.config_hash},
              {"iterations", rep.iterations},
              {"residual", rep.residual},
              {"foc_residual", rep.foc_residual},
              {"status", to_string(rep.status)},
              {"regularity_ok", rep.regularity_ok},
              {"anchor", to_string(sc.anchor)},
              {"message", rep.message}};
    io::write_file(ctx.out("solve_report.json"), io::dump(j));
    return rep.ok() ? ok : numeric_failure;
}

inline int cmd_diagnose(const Context& ctx)
{
    const auto& cfg = ctx.config;
    const auto ref = io::load_policy(detail::input_path(ctx, "reference", "reference.json"));
    const auto reward = io::load_reward(detail::input_path(ctx, "reward", "reward.json"));
    const auto raw = io::load_dataset(detail::input_path(ctx, "dataset", "dataset.jsonl"));
    const double beta = detail::beta_of(cfg), gamma = detail::gamma_of(cfg), tau = detail::tau_of(cfg);
    const auto ds = detail::dataset_for(raw, ref, gamma, tau, beta, detail::margin_of(cfg));

    const auto viol = violation_stats(ds, ref, reward, beta);
    const auto gsc = gamma_star_cons(ds);
    auto sc = solver_config_of(cfg);
    const auto ac = cpo_approx_constants(ref, ds, reward, sc);
    const auto graph = comparison_graph(ds);
    const auto stat = empirical_stat_error(ds, reward);

    json j;
    j["config_hash"] = ctx.config_hash;
    j["reference_hash"] = ref.content_hash();
    j["violation"] = detail::json_of(viol, true);
    j["gamma_star"] = gamma_star(ds, ref, reward, beta);
    j["gamma_star_cons"] = {{"value", gsc.value}, {"raw", gsc.raw}, {"floored", gsc.floored}};
    j["cpo_approx_constants"] = {{"p_min", ac.p_min},
                                 {"R_max", ac.R_max},
                                 {"q0", ac.q0},
                                 {"R_tilde_max", ac.R_tilde_max},
                                 {"regularity_ok", ac.regularity_ok},
                                 {"gamma", sc.gamma}};
    json g = {{"all_connected", graph.all_connected}, {"diameter", graph.diameter}, {"prompts", json::array()}};
    for (const auto& p : graph.prompts) {
        g["prompts"].push_back(
            {{"prompt", p.prompt}, {"vertices", p.vertices}, {"connected", p.connected}, {"diameter", p.diameter}});
    }
    j["comparison_graph"] = g;
    j["stat_error"] = {{"value", stat.value},
                       {"low_confidence", stat.low_confidence},
                       {"distinct_pairs", stat.distinct_pairs},
                       {"min_observations", stat.min_observations}};
    try {
        j["L_sigma_inv"] = inverse_sensitivity(ds, reward, beta);
    } catch (const NumericError&) {
        j["L_sigma_inv"] = nullptr;
    }

    // kappa0 needs delta*; provenance is always stated
    const LossSpec ec{LossKind::ECPOC, beta, gamma, tau};
    const auto& dg = detail::section(cfg, "diagnose");
    json k = {{"value", nullptr}, {"provenance", "unavailable"}};
    std::optional<std::vector<double>> delta_star;
    bool small = ds.space().num_prompts() <= 2;
    for (auto c : ds.space().responses_per_prompt()) small = small && c <= 3;
    if (dg.contains("trained_policy")) {
        const auto pol = io::load_policy(detail::require_file(detail::resolve(ctx, detail::str(dg, "trained_policy", "diagnose")),
                                                              "diagnose.trained_policy"));
        delta_star = pair_deltas(pol, ds);
        k["provenance"] = "trained_policy";
    } else if (small) {
        oracle::Instance in{ref, reward, ds, beta, gamma, tau, 0.0};
        const auto res = oracle::grid_optimum(oracle::Objective::ecpoc_loss, in, 200,
                                              detail::count(dg, "refine_passes", "diagnose", 30));
        delta_star = pair_deltas(TabularPolicy(ds.space(), res.best_logits), ds);
        k["provenance"] = "grid_search";
        k["loss_optimum"] = res.best_objective;
    }
    if (delta_star) {
        try {
            k["value"] = kappa0(ds, *delta_star, ec);
        } catch (const NumericError& e) {
            k["provenance"] = std::string("degenerate: ") + e.what();
        }
    }
    j["kappa0"] = k;

    fs::create_directories(ctx.out_dir);
    io::write_file(ctx.out("diagnose.json"), io::dump(j));
    return ok;
}

namespace detail {

inline std::vector<double> linspace(const json& j, const char* field, double lo, double hi, std::size_t n)
{
    const auto& s = section(j, field);
    lo = num(s, "min", field, lo);
    hi = num(s, "max", field, hi);
    n = count(s, "count", field, n);
    if (n == 0) throw UsageError("config: limits grid count must be positive");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

} // namespace detail

inline int cmd_limits(const Context& ctx)
{
    const auto& ls = detail::section(ctx.config, "limits");
    std::vector<double> betas = {10.0, 100.0, 1000.0};
    if (ls.contains("betas")) {
        betas.clear();
        for (const auto& b : ls["betas"]) {
            if (!b.is_number() || !(b.get<double>() > 0.0)) throw UsageError("config: limits.betas must be positive numbers");
            betas.push_back(b.get<double>());
        }
        if (betas.empty()) throw UsageError("config: limits.betas must be non-empty");
    }
    const double gamma = detail::num(ls, "gamma", "limits", 0.5);
    const double tau = detail::num(ls, "tau", "limits", 1.0);
    const auto dts = detail::linspace(ls, "delta_theta", -3.0, 3.0, 10);
    const auto drs = detail::linspace(ls, "delta_ref", -3.0, 3.0, 10);
    const LossKind kinds[] = {LossKind::DPO, LossKind::CPO, LossKind::ECPOC};

    // one task per loss kind; rows are concatenated in a fixed order
    const auto chunks = detail::run_parallel<std::string>(ctx.jobs, 3, [&](std::size_t ki) {
        std::string rows;
        const LossKind kind = kinds[ki];
        for (double dt : dts) {
            for (double dr : drs) {
                for (double beta : betas) {
                    // CPO's hinge form carries the constant margin 2 gamma
                    RefStats rec = make_ref_record(dr, 0.5, 0.5, gamma, tau, beta);
                    rec.gamma_ref = 2.0 * gamma;
                    const LossSpec spec{kind, beta, gamma, tau};
                    const double scaled = pair_terms(spec, LogRatio(dt), rec).loss / beta;
                    const double hinge = hinge_limit(kind, LogRatio(dt), rec, gamma, beta, tau);
                    rows += std::string(to_string(kind)) + ',' + format_double(beta) + ',' + format_double(dt) + ',' +
                            format_double(dr) + ',' + format_double(scaled) + ',' + format_double(hinge) + ',' +
                            format_double(std::fabs(scaled - hinge)) + '\n';
                }
            }
        }
        return rows;
    });
    std::string csv = "kind,beta,delta_theta,delta_ref,scaled_loss,hinge,abs_error\n";
    for (const auto& c : chunks) csv += c;

    fs::create_directories(ctx.out_dir);
    io::write_file(ctx.out("limits.csv"), csv);
    json j = {{"config_hash", ctx.config_hash}, {"csv_sha256", sha256_hex(csv)}, {"betas", betas}, {"gamma", gamma}, {"tau", tau}};
    io::write_file(ctx.out("limits_report.json"), io::dump(j));
    return ok;
}

inline int cmd_bridge(const Context& ctx)
{
    const auto& b = detail::section(ctx.config, "bridge");
    std::optional<double> r0;
    if (b.contains("r0")) r0 = detail::num(b, "r0", "bridge");
    const auto c = bridge_certificate(detail::num(b, "eps_loss", "bridge"), detail::num(b, "kappa0", "bridge"),
                                      detail::num(b, "beta", "bridge", detail::beta_of(ctx.config)),
                                      detail::count(b, "N", "bridge"), detail::num(b, "eps_approx", "bridge", 0.0),
                                      detail::num(b, "eps_stat", "bridge", 0.0), detail::num(b, "L_sigma_inv", "bridge", 1.0),
                                      r0);
    json j = {{"config_hash", ctx.config_hash},
              {"eps_loss", c.eps_loss},
              {"kappa0", c.kappa0},
              {"beta", c.beta},
              {"N", c.N},
              {"eps_opt2", c.eps_opt2},
              {"eps_opt", c.eps_opt},
              {"eps_approx", c.eps_approx},
              {"eps_stat", c.eps_stat},
              {"L_sigma_inv", c.L_sigma_inv},
              {"combined_bound", c.combined_bound},
              {"r0", c.r0 ? json(*c.r0) : json(nullptr)},
              {"self_consistent", c.self_consistent ? json(*c.self_consistent) : json(nullptr)}};
    fs::create_directories(ctx.out_dir);
    io::write_file(ctx.out("bridge.json"), io::dump(j));
    return ok;
}

// Builds the context from a config path plus global overrides.
inline Context make_context(const std::string& config_path, const std::string& out_dir, unsigned jobs,
                            std::optional<std::uint64_t> seed)
{
    Context ctx;
    if (!config_path.empty()) {
        ctx.config = io::parse_json(io::read_file(config_path), config_path);
        if (!ctx.config.is_object()) throw UsageError(config_path + ": top level must be an object");
        ctx.config_dir = fs::path(config_path).parent_path().string();
    } else {
        ctx.config = json::object();
    }
    if (seed) ctx.config["seed"] = *seed;
    ctx.out_dir = out_dir.empty() ? "." : out_dir;
    ctx.jobs = jobs == 0 ? 1 : jobs;
    ctx.config_hash = sha256_hex(ctx.config.dump());
    return ctx;
}

inline int dispatch(const std::string& cmd, const Context& ctx)
{
    if (cmd == "generate") return cmd_generate(ctx);
    if (cmd == "train") return cmd_train(ctx);
    if (cmd == "solve") return cmd_solve(ctx);
    if (cmd == "diagnose") return cmd_diagnose(ctx);
    if (cmd == "limits") return cmd_limits(ctx);
    if (cmd == "bridge") return cmd_bridge(ctx);
    throw UsageError("unknown subcommand '" + cmd + "'");
}

} // namespace prefopt::cli
