#pragma once

#include "prefopt/core.hpp"
#include "prefopt/numeric.hpp"
#include "prefopt/prefmodel.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace prefopt {

enum class LossKind { DPO, CPO, ECPOC };

inline const char* to_string(LossKind k)
{
    switch (k) {
    case LossKind::DPO: return "DPO";
    case LossKind::CPO: return "CPO";
    default: return "ECPOC";
    }
}

inline LossKind loss_kind_from(const std::string& s)
{
    if (s == "DPO" || s == "dpo") return LossKind::DPO;
    if (s == "CPO" || s == "cpo") return LossKind::CPO;
    if (s == "ECPOC" || s == "ecpoc") return LossKind::ECPOC;
    throw UsageError("unknown loss kind '" + s + "' (expected DPO, CPO or ECPOC)");
}

struct LossSpec {
    LossKind kind = LossKind::DPO;
    double beta = 1.0;
    double gamma = 0.0;  // ignored by DPO
    double tau = 1.0;    // used by ECPOC only

    void validate() const
    {
        if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("loss spec: beta must be > 0");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw UsageError("loss spec: gamma must be >= 0");
        if (!(tau > 0.0) || !std::isfinite(tau)) throw UsageError("loss spec: tau must be > 0");
    }
};

struct PairLossTerms {
    double logit_arg = 0.0;
    double loss = 0.0;    // softplus(-z) = -log sigma(z)
    double weight = 0.5;  // sigma(-z)
};

inline double pair_logit_arg(const LossSpec& spec, LogRatio delta_theta, const RefStats& ref)
{
    const double base = spec.beta * (delta_theta.value - ref.delta_ref);
    switch (spec.kind) {
    case LossKind::DPO: return base;
    case LossKind::CPO: return base - ref.gamma_ref;
    default: return base - ref.psi_cons;
    }
}

inline PairLossTerms pair_terms(const LossSpec& spec, LogRatio delta_theta, const RefStats& ref)
{
    PairLossTerms t;
    t.logit_arg = pair_logit_arg(spec, delta_theta, ref);
    t.loss = softplus(-t.logit_arg);
    t.weight = sigmoid(-t.logit_arg);
    return t;
}

// The stored margins must have been built for this spec.
inline void check_ref_stats(const LossSpec& spec, const PreferenceDataset& dataset)
{
    spec.validate();
    if (!dataset.has_ref_stats()) throw UsageError("loss: dataset has no ref_stats; run precompute_ref_stats first");
    const auto& meta = dataset.ref_meta();
    if (!meta) return;  // hand-built records carry no provenance to compare against
    if (spec.kind != LossKind::DPO && meta->gamma != spec.gamma) {
        throw UsageError("loss: ref_stats were computed for gamma " + std::to_string(meta->gamma) + ", spec has " +
                         std::to_string(spec.gamma));
    }
    if (spec.kind == LossKind::ECPOC && (meta->tau != spec.tau || meta->beta != spec.beta)) {
        throw UsageError("loss: E-CPOC margins were computed for a different (tau, beta)");
    }
}

inline void check_ref_stats(const LossSpec& spec, const PreferenceDataset& dataset, const TabularPolicy& ref)
{
    check_ref_stats(spec, dataset);
    const auto& meta = dataset.ref_meta();
    if (!meta) throw UsageError("loss: ref_stats carry no reference hash");
    if (meta->policy_hash != ref.content_hash()) {
        throw UsageError("loss: stale ref_stats (reference policy hash mismatch)");
    }
}

inline std::vector<double> pair_deltas(const TabularPolicy& theta, const PreferenceDataset& dataset)
{
    if (!(theta.space() == dataset.space())) throw UsageError("policy space differs from dataset space");
    std::vector<double> d;
    d.reserve(dataset.size());
    for (const auto& p : dataset.pairs()) d.push_back(log_prob_ratio(theta, p.prompt, p.yw, p.yl).value);
    return d;
}

inline double dataset_loss(const LossSpec& spec, const TabularPolicy& theta, const PreferenceDataset& dataset)
{
    check_ref_stats(spec, dataset);
    const auto deltas = pair_deltas(theta, dataset);
    const auto& stats = dataset.ref_stats();
    const double total = dataset.total_weight();
    CompensatedSum s;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        s.add(dataset.pairs()[i].weight / total * softplus(-pair_logit_arg(spec, LogRatio(deltas[i]), stats[i])));
    }
    return s.value();
}

// dL/d delta_i = -beta * omega_i * sigma(-z_i)
inline std::vector<double> delta_gradient(const LossSpec& spec, const std::vector<double>& deltas,
                                          const PreferenceDataset& dataset)
{
    check_ref_stats(spec, dataset);
    if (deltas.size() != dataset.size()) throw UsageError("delta_gradient: wrong number of deltas");
    const auto& stats = dataset.ref_stats();
    const double total = dataset.total_weight();
    std::vector<double> g(deltas.size());
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        const double w = sigmoid(-pair_logit_arg(spec, LogRatio(deltas[i]), stats[i]));
        g[i] = -spec.beta * (dataset.pairs()[i].weight / total) * w;
    }
    return g;
}

namespace detail {

// Chain rule into logits. d delta / d logit_j = 1{j=yw} - 1{j=yl}: the softmax terms of
// grad log pi(yw) and grad log pi(yl) cancel exactly.
inline Table chain_to_logits(const ResponseSpace& space, const PreferenceDataset& dataset,
                             const std::vector<double>& dloss_ddelta, const std::vector<std::size_t>* subset = nullptr)
{
    Table g = space.zeros();
    auto add = [&](std::size_t i) {
        const auto& p = dataset.pairs()[i];
        g[p.prompt][p.yw] += dloss_ddelta[i];
        g[p.prompt][p.yl] -= dloss_ddelta[i];
    };
    if (subset) {
        for (auto i : *subset) add(i);
    } else {
        for (std::size_t i = 0; i < dataset.size(); ++i) add(i);
    }
    return g;
}

} // namespace detail

inline Table loss_gradient(const LossSpec& spec, const TabularPolicy& theta, const PreferenceDataset& dataset)
{
    const auto deltas = pair_deltas(theta, dataset);
    return detail::chain_to_logits(theta.space(), dataset, delta_gradient(spec, deltas, dataset));
}

inline double hinge_limit(LossKind kind, LogRatio delta_theta, const RefStats& ref, double gamma, double beta, double tau)
{
    switch (kind) {
    case LossKind::DPO: return std::fmax(0.0, ref.delta_ref - delta_theta.value);
    case LossKind::CPO: return std::fmax(0.0, ref.delta_ref + 2.0 * gamma / beta - delta_theta.value);
    default:
        return std::fmax(0.0, ref.delta_ref + conservative_margin(ref.delta_ref, gamma, tau) - delta_theta.value);
    }
}

} // namespace prefopt
