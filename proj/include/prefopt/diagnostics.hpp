#pragma once

#include "prefopt/core.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/numeric.hpp"
#include "prefopt/prefmodel.hpp"
#include "prefopt/solvers.hpp"

#include <cmath>
#include <deque>
#include <limits>
#include <optional>
#include <vector>

namespace prefopt {

enum class AssumptionStatus { holds, violated };

// Holds iff delta_ref > -dr/beta; equality counts as violated.
inline AssumptionStatus check_assumption(LogRatio delta_ref, double reward_diff, double beta)
{
    if (!(reward_diff > 0.0)) throw UsageError("check_assumption: reward_diff must be > 0 for a human-ordered pair");
    if (!(beta > 0.0)) throw UsageError("check_assumption: beta must be > 0");
    return delta_ref.value > -reward_diff / beta ? AssumptionStatus::holds : AssumptionStatus::violated;
}

inline bool in_undesirable_space(LogRatio delta_pi, LogRatio delta_ref)
{
    return delta_pi.value < 0.0 && delta_pi.value > delta_ref.value;
}

struct PairViolation {
    bool delta_ref_negative = false;
    bool assumption_violated = false;
    bool reward_contradicting = false;  // label disagrees with the reward ordering
    double delta_ref = 0.0;
    double reward_term = 0.0;  // dr / beta
};

struct ViolationReport {
    std::vector<PairViolation> pairs;
    double fraction_delta_ref_negative = 0.0;
    double fraction_violated = 0.0;
    std::size_t num_violated = 0;
    std::size_t num_reward_contradicting = 0;
    double delta_ref_mean = 0.0;
    double delta_ref_std = 0.0;
    double reward_term_mean = 0.0;
};

inline ViolationReport violation_stats(const PreferenceDataset& dataset, const TabularPolicy& ref,
                                       const RewardTable& reward, double beta)
{
    if (!(beta > 0.0)) throw UsageError("violation_stats: beta must be > 0");
    if (!(ref.space() == dataset.space()) || !(reward.space() == dataset.space())) {
        throw UsageError("violation_stats: reference, reward and dataset spaces differ");
    }
    ViolationReport rep;
    std::size_t neg = 0;
    CompensatedSum sd, sd2, sr;
    for (const auto& p : dataset.pairs()) {
        PairViolation v;
        v.delta_ref = log_prob_ratio(ref, p.prompt, p.yw, p.yl).value;
        const double dr = reward.diff(p.prompt, p.yw, p.yl);
        v.reward_term = dr / beta;
        v.delta_ref_negative = v.delta_ref < 0.0;
        v.reward_contradicting = !(dr > 0.0);
        v.assumption_violated = v.delta_ref <= -v.reward_term;
        neg += v.delta_ref_negative;
        rep.num_violated += v.assumption_violated;
        rep.num_reward_contradicting += v.reward_contradicting;
        sd.add(v.delta_ref);
        sr.add(v.reward_term);
        rep.pairs.push_back(v);
    }
    const double n = static_cast<double>(dataset.size());
    rep.fraction_delta_ref_negative = static_cast<double>(neg) / n;
    rep.fraction_violated = static_cast<double>(rep.num_violated) / n;
    rep.delta_ref_mean = sd.value() / n;
    rep.reward_term_mean = sr.value() / n;
    for (const auto& v : rep.pairs) sd2.add((v.delta_ref - rep.delta_ref_mean) * (v.delta_ref - rep.delta_ref_mean));
    rep.delta_ref_std = std::sqrt(sd2.value() / n);
    return rep;
}

inline void check_ref_hash(const PreferenceDataset& dataset, const TabularPolicy& ref, const char* who)
{
    if (!dataset.has_ref_stats()) throw UsageError(std::string(who) + ": dataset has no ref_stats");
    if (const auto& m = dataset.ref_meta(); m && m->policy_hash != ref.content_hash()) {
        throw UsageError(std::string(who) + ": stale ref_stats (reference policy hash mismatch)");
    }
}

// max_i beta max{0, -delta_ref - dr/beta} / (1/pw + 1/pl)
inline double gamma_star(const PreferenceDataset& dataset, const TabularPolicy& ref, const RewardTable& reward,
                         double beta)
{
    check_ref_hash(dataset, ref, "gamma_star");
    if (!(beta > 0.0)) throw UsageError("gamma_star: beta must be > 0");
    double g = 0.0;
    const auto& stats = dataset.ref_stats();
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& p = dataset.pairs()[i];
        const auto& s = stats[i];
        const double deficit = std::fmax(0.0, -s.delta_ref - reward.diff(p.prompt, p.yw, p.yl) / beta);
        g = std::fmax(g, beta * deficit / (1.0 / s.pw + 1.0 / s.pl));
    }
    return g;
}

struct GammaStarCons {
    double value = 0.0;  // floored at 0
    double raw = 0.0;    // max of -delta_ref, possibly negative
    bool floored = false;
};

inline GammaStarCons gamma_star_cons(const PreferenceDataset& dataset)
{
    const auto& stats = dataset.ref_stats();
    GammaStarCons g;
    g.raw = -std::numeric_limits<double>::infinity();
    for (const auto& s : stats) g.raw = std::fmax(g.raw, -s.delta_ref);
    g.floored = g.raw < 0.0;
    g.value = std::fmax(0.0, g.raw);
    return g;
}

inline double kappa0(const PreferenceDataset& dataset, const std::vector<double>& delta_star, const LossSpec& spec)
{
    check_ref_stats(spec, dataset);
    if (delta_star.size() != dataset.size()) throw UsageError("kappa0: need one delta* per pair");
    const auto& stats = dataset.ref_stats();
    double k = 0.25;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (!std::isfinite(delta_star[i])) throw NumericError("kappa0: non-finite delta* (degenerate preference)");
        const double g = pair_logit_arg(spec, LogRatio(delta_star[i]), stats[i]);
        if (!std::isfinite(g)) throw NumericError("kappa0: non-finite margin (degenerate preference)");
        k = std::fmin(k, logistic_curvature(g));
    }
    return k;
}

struct BridgeCertificate {
    double eps_loss = 0.0;
    double kappa0 = 0.25;
    double beta = 1.0;
    double eps_opt2 = 0.0;
    double eps_opt = 0.0;
    std::size_t N = 1;
    double eps_approx = 0.0;
    double eps_stat = 0.0;
    double L_sigma_inv = 1.0;
    double combined_bound = 0.0;
    std::optional<double> r0;
    std::optional<bool> self_consistent;  // eps_loss <= beta^2 kappa0 r0^2 / (2N)
};

inline BridgeCertificate bridge_certificate(double eps_loss, double kappa, double beta, std::size_t N, double eps_approx,
                                            double eps_stat, double L_sigma_inv, std::optional<double> r0 = {})
{
    if (!(kappa > 0.0)) throw NumericError("bridge_certificate: kappa0 must be > 0 (degenerate preferences)");
    if (kappa > 0.25) throw UsageError("bridge_certificate: kappa0 cannot exceed 0.25");
    if (!(eps_loss >= 0.0) || !(eps_approx >= 0.0) || !(eps_stat >= 0.0)) {
        throw UsageError("bridge_certificate: error terms must be >= 0");
    }
    if (!(beta > 0.0) || !(L_sigma_inv > 0.0) || N == 0) {
        throw UsageError("bridge_certificate: beta, L_sigma_inv and N must be positive");
    }
    BridgeCertificate c;
    c.eps_loss = eps_loss;
    c.kappa0 = kappa;
    c.beta = beta;
    c.N = N;
    c.eps_approx = eps_approx;
    c.eps_stat = eps_stat;
    c.L_sigma_inv = L_sigma_inv;
    c.eps_opt2 = std::sqrt(2.0 * eps_loss / (beta * beta * kappa));
    c.eps_opt = std::sqrt(static_cast<double>(N)) * c.eps_opt2;
    c.combined_bound = eps_approx + c.eps_opt + L_sigma_inv * eps_stat;
    if (r0) {
        if (!(*r0 > 0.0)) throw UsageError("bridge_certificate: r0 must be > 0");
        c.r0 = r0;
        c.self_consistent = eps_loss <= beta * beta * kappa * (*r0) * (*r0) / (2.0 * static_cast<double>(N));
    }
    return c;
}

// 1 / (beta min sigma(dr)(1 - sigma(dr))) over dataset pairs
inline double inverse_sensitivity(const PreferenceDataset& dataset, const RewardTable& reward, double beta)
{
    double m = 0.25;
    for (const auto& p : dataset.pairs()) m = std::fmin(m, logistic_curvature(reward.diff(p.prompt, p.yw, p.yl)));
    if (!(m > 0.0)) throw NumericError("inverse_sensitivity: degenerate preference probability");
    return 1.0 / (beta * m);
}

struct ApproxConstants {
    double p_min = 0.0;
    double R_max = 0.0;
    double q0 = 0.0;
    double R_tilde_max = 0.0;
    bool regularity_ok = true;
};

inline ApproxConstants cpo_approx_constants(const TabularPolicy& ref, const PreferenceDataset& dataset,
                                            const RewardTable& reward, const SolverConfig& cfg)
{
    cfg.validate();
    const auto reg = regularity_check(ref, dataset, reward, cfg.beta, cfg.gamma);
    ApproxConstants a;
    a.p_min = reg.p_min;
    a.R_max = reg.r_max;
    a.q0 = reg.q0;
    a.R_tilde_max = reg.r_max + cfg.gamma / reg.q0;
    a.regularity_ok = reg.ok;
    return a;
}

struct PromptGraph {
    std::size_t prompt = 0;
    std::size_t vertices = 0;  // responses that appear in some pair
    bool connected = true;
    std::size_t diameter = 0;
};

struct ComparisonGraphReport {
    std::vector<PromptGraph> prompts;
    bool all_connected = true;
    std::size_t diameter = 0;  // max over connected prompts
};

inline ComparisonGraphReport comparison_graph(const PreferenceDataset& dataset)
{
    const auto& space = dataset.space();
    std::vector<std::vector<std::vector<std::size_t>>> adj(space.num_prompts());
    for (std::size_t x = 0; x < space.num_prompts(); ++x) adj[x].resize(space.responses(x));
    for (const auto& p : dataset.pairs()) {
        adj[p.prompt][p.yw].push_back(p.yl);
        adj[p.prompt][p.yl].push_back(p.yw);
    }
    ComparisonGraphReport rep;
    for (std::size_t x = 0; x < space.num_prompts(); ++x) {
        PromptGraph g;
        g.prompt = x;
        std::vector<std::size_t> verts;
        for (std::size_t y = 0; y < adj[x].size(); ++y)
            if (!adj[x][y].empty()) verts.push_back(y);
        g.vertices = verts.size();
        if (verts.empty()) {
            rep.prompts.push_back(g);  // prompt without pairs imposes nothing
            continue;
        }
        for (auto src : verts) {
            std::vector<std::size_t> dist(adj[x].size(), SIZE_MAX);
            std::deque<std::size_t> q{src};
            dist[src] = 0;
            while (!q.empty()) {
                const auto u = q.front();
                q.pop_front();
                for (auto v : adj[x][u]) {
                    if (dist[v] == SIZE_MAX) {
                        dist[v] = dist[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            for (auto v : verts) {
                if (dist[v] == SIZE_MAX) {
                    g.connected = false;
                } else {
                    g.diameter = std::max(g.diameter, dist[v]);
                }
            }
        }
        rep.all_connected = rep.all_connected && g.connected;
        if (g.connected) rep.diameter = std::max(rep.diameter, g.diameter);
        rep.prompts.push_back(g);
    }
    return rep;
}

} // namespace prefopt
