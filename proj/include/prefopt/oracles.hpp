#pragma once

// Brute-force verifiers. Deliberately built on core and prefmodel types only: every
// objective below is written out again from its definition so that a bug in the
// production solvers or losses cannot leak into the reference values.

#include "prefopt/core.hpp"
#include "prefopt/prefmodel.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace prefopt::oracle {

enum class Objective { rlhf, constrained_rlhf, dpo_loss, cpo_loss, ecpoc_loss };

struct Instance {
    TabularPolicy ref;
    RewardTable reward;
    PreferenceDataset dataset;
    double beta = 1.0;
    double gamma = 0.0;
    double tau = 1.0;
    double min_prob = 0.0;  // grid points with any probability below this are skipped
};

struct GridSearchResult {
    Table best_probs;
    Table best_logits;
    double best_objective = 0.0;
    std::size_t grid_resolution = 0;
    bool maximized = false;
};

inline bool is_maximized(Objective o) { return o == Objective::rlhf || o == Objective::constrained_rlhf; }

namespace detail {

inline std::vector<double> ref_log_probs(const TabularPolicy& ref, std::size_t x)
{
    const auto row = ref.row(x);
    double m = row[0];
    for (double v : row) m = v > m ? v : m;
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double lz = m + std::log(z);
    std::vector<double> out;
    for (double v : row) out.push_back(v - lz);
    return out;
}

// log(1 + e^t) without overflow
inline double log1pexp(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

// Contribution of prompt x to the objective, natural orientation.
inline double prompt_value(Objective obj, const Instance& in, std::size_t x, const std::vector<double>& q)
{
    const auto lref = ref_log_probs(in.ref, x);
    const auto& r = in.reward.values()[x];
    const auto& pairs = in.dataset.pairs();
    const double prompts = static_cast<double>(in.ref.space().num_prompts());

    if (obj == Objective::rlhf || obj == Objective::constrained_rlhf) {
        // E_pi[r] - beta KL(pi || pi_ref)
        double v = 0.0;
        for (std::size_t y = 0; y < q.size(); ++y) v += q[y] * r[y] - in.beta * q[y] * (std::log(q[y]) - lref[y]);
        if (obj == Objective::constrained_rlhf) {
            // + gamma E_{pairs at x}[log q(yw) - log q(yl)]
            double wx = 0.0;
            for (const auto& p : pairs)
                if (p.prompt == x) wx += p.weight;
            for (const auto& p : pairs) {
                if (p.prompt != x) continue;
                v += in.gamma * (p.weight / wx) * (std::log(q[p.yw]) - std::log(q[p.yl]));
            }
        }
        return v / prompts;
    }

    double total = 0.0;
    for (const auto& p : pairs) total += p.weight;
    double v = 0.0;
    for (const auto& p : pairs) {
        if (p.prompt != x) continue;
        const double d = std::log(q[p.yw]) - std::log(q[p.yl]);
        const double dref = lref[p.yw] - lref[p.yl];
        double margin = 0.0;
        if (obj == Objective::cpo_loss) {
            margin = in.gamma * (std::exp(-lref[p.yw]) + std::exp(-lref[p.yl]));
        } else if (obj == Objective::ecpoc_loss) {
            margin = in.beta * log1pexp(in.tau * (in.gamma - dref)) / in.tau;
        }
        const double z = in.beta * (d - dref) - margin;
        v += (p.weight / total) * log1pexp(-z);  // -log sigmoid(z)
    }
    return v;
}

inline bool feasible(const std::vector<double>& q, double floor)
{
    for (double v : q)
        if (!(v > 0.0) || v < floor) return false;
    return true;
}

// free coordinates -> full simplex point
inline std::vector<double> complete(const std::vector<double>& free)
{
    std::vector<double> q(free);
    double s = 0.0;
    for (double v : free) s += v;
    q.push_back(1.0 - s);
    return q;
}

} // namespace detail

inline double evaluate(Objective obj, const Instance& in, const Table& probs)
{
    double v = 0.0;
    for (std::size_t x = 0; x < probs.size(); ++x) v += detail::prompt_value(obj, in, x, probs[x]);
    return v;
}

// Exhaustive simplex scan per prompt (the objectives separate across prompts), then
// refine_passes rounds of halving the cell around the incumbent. Ties keep the lowest
// lexicographic grid index.
inline GridSearchResult grid_optimum(Objective obj, const Instance& in, std::size_t resolution = 200,
                                     std::size_t refine_passes = 3)
{
    const auto& space = in.ref.space();
    if (space.num_prompts() > 2) throw UsageError("grid_optimum: budget allows at most 2 prompts");
    for (auto k : space.responses_per_prompt())
        if (k > 3) throw UsageError("grid_optimum: budget allows at most 3 responses per prompt");
    if (!(in.reward.space() == space) || !(in.dataset.space() == space)) {
        throw UsageError("grid_optimum: instance spaces differ");
    }
    if (resolution < 2) throw UsageError("grid_optimum: resolution must be >= 2");

    const double sign = is_maximized(obj) ? -1.0 : 1.0;  // scan minimizes sign * value
    GridSearchResult res;
    res.grid_resolution = resolution;
    res.maximized = is_maximized(obj);
    const double h0 = 1.0 / static_cast<double>(resolution);

    for (std::size_t x = 0; x < space.num_prompts(); ++x) {
        const std::size_t k = space.responses(x);
        double best = std::numeric_limits<double>::infinity();
        std::vector<double> best_free;
        auto consider = [&](const std::vector<double>& free) {
            const auto q = detail::complete(free);
            if (!detail::feasible(q, in.min_prob)) return;
            const double v = sign * detail::prompt_value(obj, in, x, q);
            if (v < best) {
                best = v;
                best_free = free;
            }
        };
        if (k == 2) {
            for (std::size_t i = 1; i < resolution; ++i) consider({static_cast<double>(i) * h0});
        } else {
            for (std::size_t i = 1; i < resolution; ++i)
                for (std::size_t j = 1; i + j < resolution; ++j)
                    consider({static_cast<double>(i) * h0, static_cast<double>(j) * h0});
        }
        if (best_free.empty()) throw UsageError("grid_optimum: no feasible grid point (min_prob too large?)");

        double h = h0;
        for (std::size_t pass = 0; pass < refine_passes; ++pass) {
            h *= 0.5;
            const auto center = best_free;
            if (k == 2) {
                for (int a = -2; a <= 2; ++a) consider({center[0] + a * h});
            } else {
                for (int a = -2; a <= 2; ++a)
                    for (int b = -2; b <= 2; ++b) consider({center[0] + a * h, center[1] + b * h});
            }
        }
        auto q = detail::complete(best_free);
        std::vector<double> l;
        for (double v : q) l.push_back(std::log(v));
        res.best_probs.push_back(q);
        res.best_logits.push_back(l);
    }
    res.best_objective = evaluate(obj, in, res.best_probs);
    return res;
}

inline Table finite_diff_gradient(const std::function<double(const TabularPolicy&)>& loss_eval,
                                  const TabularPolicy& theta, double h)
{
    if (!(h >= 1e-8 && h <= 1e-4)) throw UsageError("finite_diff_gradient: h must lie in [1e-8, 1e-4]");
    Table g = theta.space().zeros();
    Table work = theta.logits();
    for (std::size_t x = 0; x < work.size(); ++x) {
        for (std::size_t y = 0; y < work[x].size(); ++y) {
            const double orig = work[x][y];
            work[x][y] = orig + h;
            const double up = loss_eval(TabularPolicy(theta.space(), work));
            work[x][y] = orig - h;
            const double down = loss_eval(TabularPolicy(theta.space(), work));
            work[x][y] = orig;
            g[x][y] = (up - down) / (2.0 * h);
        }
    }
    return g;
}

} // namespace prefopt::oracle
