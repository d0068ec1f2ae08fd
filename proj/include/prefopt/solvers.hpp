#pragma once

#include "prefopt/core.hpp"
#include "prefopt/numeric.hpp"
#include "prefopt/prefmodel.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace prefopt {

// Where the constraint term c(y)/pi(y) takes its probability.
//  self      - the policy being solved for (constrained RLHF first-order condition)
//  reference - pi_ref, the stationary approximation that defines CPO
enum class MarginAnchor { self, reference };

inline const char* to_string(MarginAnchor a) { return a == MarginAnchor::self ? "self" : "reference"; }

struct SolverConfig {
    double beta = 1.0;
    double gamma = 0.0;
    double tau = 1.0;
    double tol = 1e-10;
    std::size_t max_iters = 10000;
    double damping = 0.5;
    MarginAnchor anchor = MarginAnchor::self;

    void validate() const
    {
        if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("solver: beta must be > 0");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw UsageError("solver: gamma must be >= 0");
        if (!(tau > 0.0) || !std::isfinite(tau)) throw UsageError("solver: tau must be > 0");
        if (!(tol > 0.0)) throw UsageError("solver: tol must be > 0");
        if (max_iters == 0) throw UsageError("solver: max_iters must be positive");
        if (!(damping > 0.0 && damping <= 1.0)) throw UsageError("solver: damping must lie in (0, 1]");
    }
};

enum class SolveStatus { converged, max_iters, numeric_failure };

inline const char* to_string(SolveStatus s)
{
    switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::max_iters: return "max_iters";
    default: return "numeric_failure";
    }
}

struct FixedPointReport {
    TabularPolicy policy;
    std::size_t iterations = 0;
    double residual = 0.0;
    double foc_residual = 0.0;
    SolveStatus status = SolveStatus::converged;
    bool regularity_ok = true;
    std::string message;

    bool ok() const noexcept { return status == SolveStatus::converged; }
};

inline TabularPolicy rlhf_closed_form(const TabularPolicy& ref, const RewardTable& reward, double beta)
{
    if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("rlhf_closed_form: beta must be > 0");
    if (!(ref.space() == reward.space())) throw UsageError("rlhf_closed_form: reward space differs from reference");
    // pi_ref * exp(r / beta) up to normalization is a shift in logit space
    Table logits = ref.logits();
    for (std::size_t x = 0; x < logits.size(); ++x)
        for (std::size_t y = 0; y < logits[x].size(); ++y) logits[x][y] += reward.values()[x][y] / beta;
    return TabularPolicy(ref.space(), std::move(logits));
}

inline LogRatio rlhf_delta(LogRatio delta_ref, double reward_diff, double beta)
{
    return LogRatio(delta_ref.value + reward_diff / beta);
}

// c(x, y) = gamma * sum over pairs at x of (w / W_x)(1{y = yw} - 1{y = yl})
inline Table constraint_coefficients(const PreferenceDataset& dataset, double gamma)
{
    const auto& space = dataset.space();
    std::vector<double> prompt_weight(space.num_prompts(), 0.0);
    for (const auto& p : dataset.pairs()) prompt_weight[p.prompt] += p.weight;
    Table c = space.zeros();
    for (const auto& p : dataset.pairs()) {
        const double share = gamma * p.weight / prompt_weight[p.prompt];
        c[p.prompt][p.yw] += share;
        c[p.prompt][p.yl] -= share;
    }
    return c;
}

struct RegularityCheck {
    double p_min = 0.0;
    double r_max = 0.0;
    double q0 = 0.0;
    double gamma_limit = 0.0;  // beta q0 / (2e)
    bool ok = true;
};

inline RegularityCheck regularity_check(const TabularPolicy& ref, const PreferenceDataset& dataset,
                                        const RewardTable& reward, double beta, double gamma)
{
    RegularityCheck r;
    r.p_min = reference_floor(dataset, ref);
    r.r_max = reward.max_abs();
    r.q0 = r.p_min * std::exp(-2.0 * r.r_max / beta);
    r.gamma_limit = beta * r.q0 / (2.0 * std::numbers::e);
    r.ok = gamma <= r.gamma_limit;
    return r;
}

namespace detail {

// log T(pi) for one prompt
inline std::vector<double> fixed_point_map_log(const std::vector<double>& log_ref, const std::vector<double>& r,
                                               const std::vector<double>& c, const std::vector<double>& anchor,
                                               double beta)
{
    std::vector<double> u(log_ref.size());
    for (std::size_t y = 0; y < u.size(); ++y) u[y] = log_ref[y] + (r[y] + c[y] / anchor[y]) / beta;
    const double lz = log_sum_exp(u);
    for (double& v : u) v -= lz;
    return u;
}

} // namespace detail

inline FixedPointReport constrained_rlhf_fixed_point(const TabularPolicy& ref, const RewardTable& reward,
                                                     const PreferenceDataset& dataset, const SolverConfig& cfg)
{
    cfg.validate();
    if (!(ref.space() == reward.space()) || !(ref.space() == dataset.space())) {
        throw UsageError("constrained_rlhf_fixed_point: reference, reward and dataset spaces differ");
    }
    const auto& space = ref.space();
    const Table c = constraint_coefficients(dataset, cfg.gamma);
    const Table ref_probs = ref.prob_table();

    FixedPointReport rep;
    const auto reg = regularity_check(ref, dataset, reward, cfg.beta, cfg.gamma);
    rep.regularity_ok = reg.ok;
    if (!reg.ok) {
        rep.message = "gamma exceeds the moderate-strength bound beta*q0/(2e) = " + std::to_string(reg.gamma_limit);
    }

    Table pi = rlhf_closed_form(ref, reward, cfg.beta).prob_table();
    Table log_ref(space.num_prompts());
    for (std::size_t x = 0; x < space.num_prompts(); ++x) {
        log_ref[x].resize(space.responses(x));
        const double lz = log_sum_exp(ref.row(x));
        for (std::size_t y = 0; y < space.responses(x); ++y) log_ref[x][y] = ref.logits()[x][y] - lz;
    }

    auto fail = [&](const std::string& why) {
        rep.status = SolveStatus::numeric_failure;
        rep.message = why;
        return rep;
    };

    for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
        double res = 0.0;
        for (std::size_t x = 0; x < space.num_prompts(); ++x) {
            const auto& anchor = cfg.anchor == MarginAnchor::self ? pi[x] : ref_probs[x];
            const auto lt = detail::fixed_point_map_log(log_ref[x], reward.values()[x], c[x], anchor, cfg.beta);
            for (std::size_t y = 0; y < lt.size(); ++y) {
                const double next = (1.0 - cfg.damping) * pi[x][y] + cfg.damping * std::exp(lt[y]);
                if (!std::isfinite(next) || !(next > 0.0)) {
                    rep.iterations = it;
                    rep.residual = res;
                    rep.policy = ref;
                    return fail("fixed-point iterate left the open simplex at prompt " + std::to_string(x));
                }
                res = std::fmax(res, std::fabs(next - pi[x][y]));
                pi[x][y] = next;
            }
        }
        rep.iterations = it;
        rep.residual = res;
        if (res <= cfg.tol) break;
    }

    Table logits = space.zeros();
    double foc = 0.0;
    for (std::size_t x = 0; x < space.num_prompts(); ++x) {
        for (std::size_t y = 0; y < space.responses(x); ++y) logits[x][y] = std::log(pi[x][y]);
        // stationarity residual, with lambda(x) fixed by normalization
        const auto& anchor = cfg.anchor == MarginAnchor::self ? pi[x] : ref_probs[x];
        const auto lt = detail::fixed_point_map_log(log_ref[x], reward.values()[x], c[x], anchor, cfg.beta);
        const double lz = log_sum_exp(logits[x]);
        for (std::size_t y = 0; y < lt.size(); ++y) {
            foc = std::fmax(foc, std::fabs(cfg.beta * (logits[x][y] - lz - lt[y])));
        }
    }
    if (!std::isfinite(foc)) {
        rep.policy = ref;
        return fail("non-finite first-order residual");
    }
    rep.policy = TabularPolicy(space, std::move(logits));
    rep.foc_residual = foc;
    rep.status = rep.residual <= cfg.tol ? SolveStatus::converged : SolveStatus::max_iters;
    if (rep.status == SolveStatus::max_iters) {
        rep.message = "max_iters reached with residual " + std::to_string(rep.residual);
    }
    return rep;
}

// Phi(delta_ref, dr) = (1/tau) softplus(tau (gamma - delta_ref - dr/beta))
inline double phi(double delta_ref, double reward_diff, double gamma, double tau, double beta)
{
    return conservative_margin(delta_ref + reward_diff / beta, gamma, tau);
}

// Phi_cons(delta_ref) = Phi(delta_ref, 0)
inline double phi_cons(double delta_ref, double gamma, double tau) { return conservative_margin(delta_ref, gamma, tau); }

//  general      - Phi(delta_ref, dr): explicitly constrained RLHF optimum
//  conservative - Phi_cons(delta_ref): the E-CPOC optimum, bound valid for every dr > 0
enum class MarginMode { general, conservative };

inline LogRatio ec_rlhf_delta(LogRatio delta_ref, double reward_diff, const SolverConfig& cfg,
                              MarginMode mode = MarginMode::general)
{
    const double m = mode == MarginMode::general ? phi(delta_ref.value, reward_diff, cfg.gamma, cfg.tau, cfg.beta)
                                                 : phi_cons(delta_ref.value, cfg.gamma, cfg.tau);
    return LogRatio(delta_ref.value + reward_diff / cfg.beta + m);
}

// M* = beta max{0, gamma - delta_ref - dr/beta}
inline double effective_margin(LogRatio delta_ref, double reward_diff, double beta, double gamma)
{
    return beta * std::fmax(0.0, gamma - delta_ref.value - reward_diff / beta);
}

} // namespace prefopt
