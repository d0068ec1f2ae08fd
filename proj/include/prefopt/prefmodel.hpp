#pragma once

#include "prefopt/core.hpp"
#include "prefopt/numeric.hpp"
#include "prefopt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace prefopt {

class RewardTable {
public:
    RewardTable() = default;
    RewardTable(ResponseSpace space, Table rewards) : space_(std::move(space)), rewards_(std::move(rewards))
    {
        space_.check_table(rewards_, "rewards");
    }

    const ResponseSpace& space() const noexcept { return space_; }
    const Table& values() const noexcept { return rewards_; }
    double at(std::size_t prompt, std::size_t response) const
    {
        space_.check_response(prompt, response);
        return rewards_[prompt][response];
    }
    double diff(std::size_t prompt, std::size_t yw, std::size_t yl) const { return at(prompt, yw) - at(prompt, yl); }

    double max_abs() const noexcept
    {
        double m = 0.0;
        for (const auto& row : rewards_)
            for (double v : row) m = std::fmax(m, std::fabs(v));
        return m;
    }

    friend bool operator==(const RewardTable&, const RewardTable&) = default;

private:
    ResponseSpace space_;
    Table rewards_;
};

struct PreferencePair {
    std::size_t prompt = 0;
    std::size_t yw = 0;
    std::size_t yl = 1;
    double weight = 1.0;

    friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

// Per-pair reference quantities, fixed for the whole run.
struct RefStats {
    double delta_ref = 0.0;
    double pw = 0.5;
    double pl = 0.5;
    double gamma_ref = 0.0;  // CPO margin gamma (1/pw + 1/pl)
    double psi_cons = 0.0;   // E-CPOC margin beta * Phi_cons(delta_ref)

    friend bool operator==(const RefStats&, const RefStats&) = default;
};

enum class MarginForm { adaptive, constant };

inline const char* to_string(MarginForm f) { return f == MarginForm::adaptive ? "adaptive" : "constant"; }

struct RefMeta {
    std::string policy_hash;
    double gamma = 0.0;
    double tau = 1.0;
    double beta = 1.0;
    MarginForm margin = MarginForm::adaptive;

    friend bool operator==(const RefMeta&, const RefMeta&) = default;
};

class PreferenceDataset {
public:
    PreferenceDataset() = default;
    PreferenceDataset(ResponseSpace space, std::vector<PreferencePair> pairs)
        : space_(std::move(space)), pairs_(std::move(pairs))
    {
        validate_pairs();
    }
    PreferenceDataset(ResponseSpace space, std::vector<PreferencePair> pairs, std::vector<RefStats> stats,
                      std::optional<RefMeta> meta)
        : space_(std::move(space)), pairs_(std::move(pairs)), stats_(std::move(stats)), meta_(std::move(meta))
    {
        validate_pairs();
        if (stats_->size() != pairs_.size()) throw UsageError("dataset: ref_stats length differs from pair count");
        for (const auto& s : *stats_) {
            if (!std::isfinite(s.delta_ref) || !std::isfinite(s.gamma_ref) || !std::isfinite(s.psi_cons) ||
                !(s.pw > 0.0 && s.pw <= 1.0) || !(s.pl > 0.0 && s.pl <= 1.0)) {
                throw UsageError("dataset: malformed ref record");
            }
        }
    }

    const ResponseSpace& space() const noexcept { return space_; }
    const std::vector<PreferencePair>& pairs() const noexcept { return pairs_; }
    std::size_t size() const noexcept { return pairs_.size(); }
    bool has_ref_stats() const noexcept { return stats_.has_value(); }
    const std::vector<RefStats>& ref_stats() const
    {
        if (!stats_) throw UsageError("dataset: ref_stats not precomputed");
        return *stats_;
    }
    const std::optional<RefMeta>& ref_meta() const noexcept { return meta_; }

    double total_weight() const noexcept
    {
        CompensatedSum s;
        for (const auto& p : pairs_) s.add(p.weight);
        return s.value();
    }

    friend bool operator==(const PreferenceDataset&, const PreferenceDataset&) = default;

private:
    void validate_pairs() const
    {
        if (pairs_.empty()) throw UsageError("dataset: needs at least one pair");
        for (const auto& p : pairs_) {
            space_.check_response(p.prompt, p.yw);
            space_.check_response(p.prompt, p.yl);
            if (p.yw == p.yl) throw UsageError("dataset: pair with yw == yl");
            if (!(p.weight > 0.0) || !std::isfinite(p.weight)) throw UsageError("dataset: pair weight must be positive");
        }
    }

    ResponseSpace space_;
    std::vector<PreferencePair> pairs_;
    std::optional<std::vector<RefStats>> stats_;
    std::optional<RefMeta> meta_;
};

inline double bt_probability(double reward_diff) noexcept { return sigmoid(reward_diff); }

// (1/tau) softplus(tau (gamma - x)), split so the result never rounds below max(0, gamma - x)
inline double conservative_margin(double x, double gamma, double tau) noexcept
{
    const double a = gamma - x;
    return std::fmax(a, 0.0) + std::log1p(std::exp(-tau * std::fabs(a))) / tau;
}

inline RefStats make_ref_record(double delta_ref, double pw, double pl, double gamma, double tau, double beta)
{
    RefStats s;
    s.delta_ref = delta_ref;
    s.pw = pw;
    s.pl = pl;
    s.gamma_ref = gamma * (1.0 / pw + 1.0 / pl);
    s.psi_cons = beta * conservative_margin(delta_ref, gamma, tau);
    return s;
}

enum class LabelMode { bt_sample, bt_mode };

inline PreferenceDataset sample_dataset(const RewardTable& reward, std::size_t pairs_per_prompt, std::uint64_t seed,
                                        LabelMode mode, std::size_t observations_per_pair = 1)
{
    const auto& space = reward.space();
    if (pairs_per_prompt == 0) throw UsageError("sample_dataset: pairs_per_prompt must be positive");
    if (observations_per_pair == 0) throw UsageError("sample_dataset: observations_per_pair must be positive");
    Rng rng(seed);
    std::vector<PreferencePair> out;
    for (std::size_t x = 0; x < space.num_prompts(); ++x) {
        const std::size_t k = space.responses(x);
        std::vector<std::pair<std::size_t, std::size_t>> all;
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = a + 1; b < k; ++b) all.emplace_back(a, b);
        if (pairs_per_prompt > all.size()) {
            throw UsageError("sample_dataset: pairs_per_prompt " + std::to_string(pairs_per_prompt) +
                             " exceeds the " + std::to_string(all.size()) + " distinct pairs of prompt " +
                             std::to_string(x));
        }
        for (std::size_t i = 0; i < pairs_per_prompt; ++i) {
            const std::size_t j = i + rng.below(all.size() - i);
            std::swap(all[i], all[j]);
            const auto [a, b] = all[i];
            const double dr = reward.diff(x, a, b);
            for (std::size_t o = 0; o < observations_per_pair; ++o) {
                bool a_wins;
                if (mode == LabelMode::bt_sample) {
                    a_wins = rng.uniform01() < bt_probability(dr);
                } else {
                    a_wins = dr >= 0.0;  // tie goes to the lower index
                }
                out.push_back(a_wins ? PreferencePair{x, a, b, 1.0} : PreferencePair{x, b, a, 1.0});
            }
        }
    }
    return PreferenceDataset(space, std::move(out));
}

// Both orientations of each unordered pair, weighted by the BT probabilities.
// This is the population version of the preference distribution.
inline PreferenceDataset bt_population_dataset(const RewardTable& reward,
                                               const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>& unordered)
{
    std::vector<PreferencePair> out;
    for (const auto& [x, a, b] : unordered) {
        const double p = bt_probability(reward.diff(x, a, b));
        out.push_back({x, a, b, p});
        out.push_back({x, b, a, 1.0 - p});
    }
    return PreferenceDataset(reward.space(), std::move(out));
}

inline PreferenceDataset precompute_ref_stats(const PreferenceDataset& dataset, const TabularPolicy& ref, double gamma,
                                              double tau, double beta, MarginForm form = MarginForm::adaptive)
{
    if (!(ref.space() == dataset.space())) throw UsageError("precompute_ref_stats: reference space differs from dataset");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw UsageError("precompute_ref_stats: gamma must be >= 0");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw UsageError("precompute_ref_stats: tau must be > 0");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("precompute_ref_stats: beta must be > 0");

    std::vector<RefStats> stats;
    stats.reserve(dataset.size());
    for (const auto& p : dataset.pairs()) {
        stats.push_back(make_ref_record(log_prob_ratio(ref, p.prompt, p.yw, p.yl).value, policy_prob(ref, p.prompt, p.yw),
                                        policy_prob(ref, p.prompt, p.yl), gamma, tau, beta));
    }
    if (form == MarginForm::constant) {
        CompensatedSum s;
        for (const auto& r : stats) s.add(r.gamma_ref);
        const double mean = s.value() / static_cast<double>(stats.size());
        for (auto& r : stats) r.gamma_ref = mean;
    }
    RefMeta meta{ref.content_hash(), gamma, tau, beta, form};
    return PreferenceDataset(dataset.space(), dataset.pairs(), std::move(stats), std::move(meta));
}

inline PreferenceDataset strip_ref_stats(const PreferenceDataset& dataset)
{
    return PreferenceDataset(dataset.space(), dataset.pairs());
}

// Smallest reference probability among responses that appear in some pair.
inline double reference_floor(const PreferenceDataset& dataset, const TabularPolicy& ref)
{
    double m = 1.0;
    for (const auto& p : dataset.pairs()) {
        m = std::fmin(m, policy_prob(ref, p.prompt, p.yw));
        m = std::fmin(m, policy_prob(ref, p.prompt, p.yl));
    }
    return m;
}

struct StatErrorEstimate {
    double value = 0.0;
    bool low_confidence = false;
    std::size_t distinct_pairs = 0;
    std::size_t min_observations = 0;
};

inline StatErrorEstimate empirical_stat_error(const PreferenceDataset& dataset, const RewardTable& reward)
{
    if (!(reward.space() == dataset.space())) throw UsageError("empirical_stat_error: reward space differs from dataset");
    struct Tally {
        double lo_wins = 0.0;
        double total = 0.0;
        std::size_t count = 0;
    };
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, Tally> groups;
    for (const auto& p : dataset.pairs()) {
        const std::size_t lo = std::min(p.yw, p.yl);
        const std::size_t hi = std::max(p.yw, p.yl);
        auto& t = groups[{p.prompt, lo, hi}];
        if (p.yw == lo) t.lo_wins += p.weight;
        t.total += p.weight;
        ++t.count;
    }
    StatErrorEstimate est;
    est.distinct_pairs = groups.size();
    est.min_observations = SIZE_MAX;
    for (const auto& [key, t] : groups) {
        const auto [x, lo, hi] = key;
        const double freq = t.lo_wins / t.total;
        est.value = std::fmax(est.value, std::fabs(freq - bt_probability(reward.diff(x, lo, hi))));
        est.min_observations = std::min(est.min_observations, t.count);
    }
    est.low_confidence = est.min_observations < 2;
    return est;
}

} // namespace prefopt
