#pragma once

#include "prefopt/core.hpp"
#include "prefopt/diagnostics.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/rng.hpp"

#include <charconv>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace prefopt {

struct Minibatch {
    std::size_t size = 1;
    std::uint64_t seed = 0;
};

struct TrainConfig {
    LossSpec spec;
    double learning_rate = 0.1;
    std::size_t steps = 1000;
    std::optional<Minibatch> minibatch;  // empty = full batch
    std::optional<Table> init_logits;    // empty = start from the reference
    std::size_t record_every = 1;
    std::optional<double> loss_optimum;  // enables the loss_gap column
    std::optional<double> target_loss;   // stop once the full loss is at or below this

    void validate(std::size_t n_pairs) const
    {
        spec.validate();
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw UsageError("train: learning_rate must be > 0");
        if (steps == 0) throw UsageError("train: steps must be >= 1");
        if (record_every == 0) throw UsageError("train: record_every must be >= 1");
        if (minibatch && (minibatch->size == 0 || minibatch->size > n_pairs)) {
            throw UsageError("train: minibatch size must lie in [1, N]");
        }
    }
};

struct TrainRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double mean_delta_theta = 0.0;
    double frac_in_U = 0.0;
    double pref_acc = 0.0;
    double grad_norm = 0.0;
    std::optional<double> loss_gap;

    friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

struct TrainTrajectory {
    std::vector<TrainRecord> records;
    friend bool operator==(const TrainTrajectory&, const TrainTrajectory&) = default;
};

struct TrainResult {
    TabularPolicy policy;
    TrainTrajectory trajectory;
    std::size_t steps_completed = 0;
    bool aborted = false;
    std::string message;
};

// L <= (beta^2 / 4) lambda_max(sum_i omega_i d_i d_i^T) with d_i = e_yw - e_yl; Gershgorin bounds
// lambda_max by twice the largest normalized weight incident on one response.
inline double smoothness_bound(const LossSpec& spec, const PreferenceDataset& dataset)
{
    const auto& space = dataset.space();
    Table incident = space.zeros();
    const double total = dataset.total_weight();
    for (const auto& p : dataset.pairs()) {
        incident[p.prompt][p.yw] += p.weight / total;
        incident[p.prompt][p.yl] += p.weight / total;
    }
    double m = 0.0;
    for (const auto& row : incident)
        for (double v : row) m = std::fmax(m, v);
    return spec.beta * spec.beta / 4.0 * 2.0 * m;
}

namespace detail {

inline double frobenius(const Table& g)
{
    CompensatedSum s;
    for (const auto& row : g)
        for (double v : row) s.add(v * v);
    return std::sqrt(s.value());
}

inline bool all_finite(const Table& g)
{
    for (const auto& row : g)
        for (double v : row)
            if (!std::isfinite(v)) return false;
    return true;
}

inline TrainRecord measure(const TrainConfig& cfg, const TabularPolicy& theta, const PreferenceDataset& dataset,
                           std::size_t step)
{
    TrainRecord r;
    r.step = step;
    r.loss = dataset_loss(cfg.spec, theta, dataset);
    const auto deltas = pair_deltas(theta, dataset);
    const auto& stats = dataset.ref_stats();
    CompensatedSum mean;
    std::size_t in_u = 0, correct = 0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        mean.add(deltas[i]);
        in_u += in_undesirable_space(LogRatio(deltas[i]), LogRatio(stats[i].delta_ref));
        correct += deltas[i] > 0.0;
    }
    const double n = static_cast<double>(deltas.size());
    r.mean_delta_theta = mean.value() / n;
    r.frac_in_U = static_cast<double>(in_u) / n;
    r.pref_acc = static_cast<double>(correct) / n;
    r.grad_norm = frobenius(loss_gradient(cfg.spec, theta, dataset));
    if (cfg.loss_optimum) r.loss_gap = r.loss - *cfg.loss_optimum;
    return r;
}

inline Table batch_gradient(const TrainConfig& cfg, const TabularPolicy& theta, const PreferenceDataset& dataset,
                            std::size_t step)
{
    if (!cfg.minibatch) return loss_gradient(cfg.spec, theta, dataset);
    // with replacement, indices drawn from (seed, step, slot) alone
    const auto& mb = *cfg.minibatch;
    std::vector<std::size_t> idx(mb.size);
    double wsum = 0.0;
    for (std::size_t k = 0; k < mb.size; ++k) {
        idx[k] = counter_index(mb.seed, static_cast<std::uint64_t>(step) * mb.size + k, dataset.size());
        wsum += dataset.pairs()[idx[k]].weight;
    }
    const auto deltas = pair_deltas(theta, dataset);
    const auto& stats = dataset.ref_stats();
    std::vector<double> dl(dataset.size(), 0.0);
    for (auto i : idx) {
        const double w = sigmoid(-pair_logit_arg(cfg.spec, LogRatio(deltas[i]), stats[i]));
        dl[i] += -cfg.spec.beta * (dataset.pairs()[i].weight / wsum) * w;
    }
    return chain_to_logits(theta.space(), dataset, dl);
}

} // namespace detail

inline TrainResult train(const TrainConfig& cfg, const PreferenceDataset& dataset, const TabularPolicy& ref)
{
    cfg.validate(dataset.size());
    check_ref_stats(cfg.spec, dataset, ref);
    if (!(ref.space() == dataset.space())) throw UsageError("train: reference space differs from dataset");

    TrainResult res;
    TabularPolicy theta = cfg.init_logits ? TabularPolicy(ref.space(), *cfg.init_logits) : ref;
    auto first = detail::measure(cfg, theta, dataset, 0);
    if (!std::isfinite(first.loss) || !std::isfinite(first.grad_norm)) {
        throw NumericError("train: non-finite loss or gradient at the initial policy");
    }
    res.trajectory.records.push_back(first);
    bool reached = cfg.target_loss && first.loss <= *cfg.target_loss;

    Table logits = theta.logits();
    for (std::size_t step = 1; step <= cfg.steps && !reached; ++step) {
        const Table g = detail::batch_gradient(cfg, theta, dataset, step - 1);
        if (!detail::all_finite(g)) {
            res.aborted = true;
            res.message = "non-finite gradient at step " + std::to_string(step) + "; last good step " +
                          std::to_string(step - 1);
            break;
        }
        for (std::size_t x = 0; x < logits.size(); ++x)
            for (std::size_t y = 0; y < logits[x].size(); ++y) logits[x][y] -= cfg.learning_rate * g[x][y];
        if (!detail::all_finite(logits)) {
            res.aborted = true;
            res.message = "non-finite logits at step " + std::to_string(step) + "; last good step " +
                          std::to_string(step - 1);
            logits = theta.logits();
            break;
        }
        TabularPolicy next(ref.space(), logits);
        const bool want = step % cfg.record_every == 0 || step == cfg.steps || cfg.target_loss.has_value();
        if (want) {
            auto rec = detail::measure(cfg, next, dataset, step);
            if (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm)) {
                res.aborted = true;
                res.message = "non-finite loss at step " + std::to_string(step) + "; last good step " +
                              std::to_string(step - 1);
                logits = theta.logits();
                break;
            }
            reached = cfg.target_loss && rec.loss <= *cfg.target_loss;
            if (step % cfg.record_every == 0 || step == cfg.steps || reached) res.trajectory.records.push_back(rec);
        }
        theta = std::move(next);
        res.steps_completed = step;
    }
    res.policy = theta;
    return res;
}

struct PhaseSummary {
    double peak_frac_in_U = 0.0;
    std::size_t peak_step = 0;
    double final_frac_in_U = 0.0;
};

inline PhaseSummary trajectory_phase_summary(const TrainTrajectory& traj)
{
    if (traj.records.empty()) throw UsageError("trajectory_phase_summary: empty trajectory");
    PhaseSummary s;
    s.peak_step = traj.records.front().step;
    for (const auto& r : traj.records) {
        if (r.frac_in_U > s.peak_frac_in_U) {
            s.peak_frac_in_U = r.frac_in_U;
            s.peak_step = r.step;
        }
    }
    s.final_frac_in_U = traj.records.back().frac_in_U;
    return s;
}

// Shortest round-trip decimal, locale independent.
inline std::string format_double(double v)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string trajectory_csv(const TrainTrajectory& traj)
{
    std::string out = "step,loss,mean_delta_theta,frac_in_U,pref_acc,grad_norm,loss_gap\n";
    for (const auto& r : traj.records) {
        out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' + format_double(r.mean_delta_theta) + ',' +
               format_double(r.frac_in_U) + ',' + format_double(r.pref_acc) + ',' + format_double(r.grad_norm) + ',' +
               (r.loss_gap ? format_double(*r.loss_gap) : std::string()) + '\n';
    }
    return out;
}

} // namespace prefopt
