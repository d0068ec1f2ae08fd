#include "catch_amalgamated.hpp"

#include "prefopt/losses.hpp"
#include "prefopt/oracles.hpp"
#include "prefopt/rng.hpp"

#include <bit>
#include <cmath>
#include <limits>

using namespace prefopt;
using Catch::Approx;

namespace {

TabularPolicy random_policy(const ResponseSpace& s, Rng& rng, double scale)
{
    Table t = s.zeros();
    for (auto& row : t)
        for (double& v : row) v = rng.uniform(-scale, scale);
    return TabularPolicy(s, t);
}

PreferenceDataset random_pairs(const ResponseSpace& s, Rng& rng, std::size_t n)
{
    std::vector<PreferencePair> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t x = rng.below(s.num_prompts());
        const std::size_t k = s.responses(x);
        const std::size_t w = rng.below(k);
        std::size_t l = rng.below(k - 1);
        if (l >= w) ++l;
        pairs.push_back({x, w, l, rng.uniform(0.1, 2.0)});
    }
    return PreferenceDataset(s, pairs);
}

// straight-line re-evaluation from definitions, no shared helpers
double reference_loss(const LossSpec& spec, const TabularPolicy& theta, const TabularPolicy& ref,
                      const PreferenceDataset& ds)
{
    long double total = 0, acc = 0;
    for (const auto& p : ds.pairs()) total += p.weight;
    for (const auto& p : ds.pairs()) {
        auto logp = [](const TabularPolicy& pol, std::size_t x, std::size_t y) {
            long double z = 0;
            for (double v : pol.logits()[x]) z += std::exp(static_cast<long double>(v));
            return static_cast<long double>(pol.logits()[x][y]) - std::log(z);
        };
        const long double d = logp(theta, p.prompt, p.yw) - logp(theta, p.prompt, p.yl);
        const long double dref = logp(ref, p.prompt, p.yw) - logp(ref, p.prompt, p.yl);
        long double m = 0;
        if (spec.kind == LossKind::CPO) {
            m = spec.gamma * (1 / std::exp(logp(ref, p.prompt, p.yw)) + 1 / std::exp(logp(ref, p.prompt, p.yl)));
        } else if (spec.kind == LossKind::ECPOC) {
            m = spec.beta * std::log1p(std::exp(spec.tau * (spec.gamma - dref))) / spec.tau;
        }
        const long double z = spec.beta * (d - dref) - m;
        acc += p.weight / total * std::log1p(std::exp(-z));
    }
    return static_cast<double>(acc);
}

} // namespace

TEST_CASE("pair_logit_arg examples", "[losses]")
{
    const RefStats rec = make_ref_record(-0.4, 0.2, 0.3, 0.0, 1.0, 1.0);
    SECTION("CPO with gamma = 0 is DPO")
    {
        Rng rng(1);
        for (int i = 0; i < 1000; ++i) {
            const double beta = rng.uniform(0.05, 20), d = rng.uniform(-20, 20);
            const auto r = make_ref_record(rng.uniform(-10, 10), rng.uniform(0.01, 1), rng.uniform(0.01, 1), 0.0, 1.0, beta);
            const double a = pair_logit_arg({LossKind::CPO, beta, 0.0, 1.0}, LogRatio(d), r);
            const double b = pair_logit_arg({LossKind::DPO, beta, 0.0, 1.0}, LogRatio(d), r);
            CHECK(std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b));
        }
    }
    SECTION("DPO at the reference")
    {
        const auto t = pair_terms({LossKind::DPO, 1.3, 0, 1}, LogRatio(rec.delta_ref), rec);
        CHECK(t.logit_arg == 0.0);
        CHECK(t.loss == Approx(std::log(2.0)).epsilon(1e-15));
        CHECK(t.weight == 0.5);
    }
    SECTION("ECPOC with delta_ref = gamma, tau = 1, beta = 2")
    {
        const double gamma = 0.8;
        const auto r = make_ref_record(gamma, 0.4, 0.4, gamma, 1.0, 2.0);
        const auto t = pair_terms({LossKind::ECPOC, 2.0, gamma, 1.0}, LogRatio(gamma), r);
        CHECK(t.logit_arg == Approx(-1.38629436111989061883).epsilon(1e-15));
        CHECK(t.loss == Approx(1.60943791243410037460).epsilon(1e-15));
    }
    SECTION("terms are consistent with softplus and sigmoid")
    {
        Rng rng(2);
        for (int i = 0; i < 1000; ++i) {
            const auto r = make_ref_record(rng.uniform(-5, 5), rng.uniform(0.01, 1), rng.uniform(0.01, 1), 0.3, 1.5, 2.0);
            for (LossKind k : {LossKind::DPO, LossKind::CPO, LossKind::ECPOC}) {
                const auto t = pair_terms({k, 2.0, 0.3, 1.5}, LogRatio(rng.uniform(-5, 5)), r);
                CHECK(std::fabs(t.loss - std::log1p(std::exp(-t.logit_arg))) <= 1e-14 * std::fmax(1.0, t.loss));
                CHECK(std::fabs(t.weight - 1.0 / (1.0 + std::exp(t.logit_arg))) <= 1e-14);
                CHECK(t.weight > 0.0);
                // sigma saturates to 1 in binary64 once the argument passes about -37
                if (t.logit_arg > -30) CHECK(t.weight < 1.0);
            }
        }
    }
}

TEST_CASE("dataset_loss", "[losses]")
{
    const auto s = ResponseSpace::uniform(1, 2);
    const TabularPolicy ref(s, {{0.3, -0.4}});
    const auto ds = precompute_ref_stats(PreferenceDataset(s, {{0, 0, 1, 1.0}}), ref, 0.0, 1.0, 1.0);
    SECTION("single pair at the reference is log 2")
    {
        CHECK(dataset_loss({LossKind::DPO, 1.0, 0, 1}, ref, ds) == Approx(std::log(2.0)).epsilon(1e-15));
    }
    SECTION("strictly decreasing in delta_theta")
    {
        double prev = INFINITY;
        for (int i = 0; i <= 60; ++i) {
            const TabularPolicy th(s, {{-3.0 + 0.1 * i, 0.0}});
            const double v = dataset_loss({LossKind::DPO, 1.0, 0, 1}, th, ds);
            CHECK(v < prev);
            prev = v;
        }
    }
    SECTION("matches a straight-line oracle on a random 50-pair dataset")
    {
        Rng rng(3);
        const ResponseSpace sp({3, 4, 2});
        for (int trial = 0; trial < 10; ++trial) {
            const auto r = random_policy(sp, rng, 1.5);
            const auto th = random_policy(sp, rng, 2.0);
            const auto raw = random_pairs(sp, rng, 50);
            for (LossKind k : {LossKind::DPO, LossKind::CPO, LossKind::ECPOC}) {
                const LossSpec spec{k, rng.uniform(0.1, 3), rng.uniform(0, 0.5), rng.uniform(0.5, 2)};
                const auto d = precompute_ref_stats(raw, r, spec.gamma, spec.tau, spec.beta);
                CHECK(std::fabs(dataset_loss(spec, th, d) - reference_loss(spec, th, r, d)) <= 1e-12);
            }
        }
    }
    SECTION("preconditions")
    {
        CHECK_THROWS_AS(dataset_loss({LossKind::DPO, 1.0, 0, 1}, ref, strip_ref_stats(ds)), UsageError);
        // ref_stats were built for gamma = 0
        CHECK_THROWS_AS(dataset_loss({LossKind::CPO, 1.0, 0.2, 1}, ref, ds), UsageError);
        CHECK_THROWS_AS(dataset_loss({LossKind::ECPOC, 2.0, 0.0, 1}, ref, ds), UsageError);
        const TabularPolicy other(s, {{0.0, 0.0}});
        CHECK_THROWS_AS(check_ref_stats({LossKind::DPO, 1.0, 0, 1}, ds, other), UsageError);
        CHECK_NOTHROW(check_ref_stats({LossKind::DPO, 1.0, 0, 1}, ds, ref));
    }
}

TEST_CASE("loss_gradient", "[losses]")
{
    Rng rng(4);
    SECTION("agrees with central differences")
    {
        for (int trial = 0; trial < 20; ++trial) {
            const ResponseSpace sp({2 + rng.below(3), 2 + rng.below(3)});
            const auto r = random_policy(sp, rng, 1.0);
            const auto th = random_policy(sp, rng, 1.5);
            const auto raw = random_pairs(sp, rng, 8);
            for (LossKind k : {LossKind::DPO, LossKind::CPO, LossKind::ECPOC}) {
                const LossSpec spec{k, rng.uniform(0.2, 2.5), rng.uniform(0, 0.3), rng.uniform(0.5, 2)};
                const auto d = precompute_ref_stats(raw, r, spec.gamma, spec.tau, spec.beta);
                const auto g = loss_gradient(spec, th, d);
                const auto fd = oracle::finite_diff_gradient(
                    [&](const TabularPolicy& p) { return dataset_loss(spec, p, d); }, th, 1e-6);
                for (std::size_t x = 0; x < g.size(); ++x) {
                    double row = 0;
                    for (std::size_t y = 0; y < g[x].size(); ++y) {
                        CHECK(std::fabs(g[x][y] - fd[x][y]) <= 1e-6);
                        row += g[x][y];
                    }
                    CHECK(std::fabs(row) <= 1e-15);
                }
            }
        }
    }
    SECTION("CPO weight is the DPO weight with the argument shifted by the margin")
    {
        for (int i = 0; i < 1000; ++i) {
            const double beta = rng.uniform(0.1, 5), d = rng.uniform(-5, 5);
            const auto rec = make_ref_record(rng.uniform(-5, 5), rng.uniform(0.05, 1), rng.uniform(0.05, 1),
                                             rng.uniform(0, 1), 1.0, beta);
            const double w_cpo = pair_terms({LossKind::CPO, beta, 0, 1}, LogRatio(d), rec).weight;
            const double w_dpo_shift = sigmoid(beta * (rec.delta_ref - d) + rec.gamma_ref);
            CHECK(w_cpo == Approx(w_dpo_shift).epsilon(1e-14));
        }
    }
}

TEST_CASE("strict convexity in delta", "[losses]")
{
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        const double beta = rng.uniform(0.1, 5), h = rng.uniform(0.01, 0.5), d = rng.uniform(-6, 6);
        const auto rec = make_ref_record(rng.uniform(-4, 4), rng.uniform(0.05, 1), rng.uniform(0.05, 1),
                                         rng.uniform(0, 1), rng.uniform(0.5, 2), beta);
        for (LossKind k : {LossKind::DPO, LossKind::CPO, LossKind::ECPOC}) {
            const LossSpec spec{k, beta, 0, 1};
            // keep all three points where the curvature is far above rounding of f
            bool moderate = true;
            for (double dd : {d - h, d, d + h})
                moderate = moderate && std::fabs(pair_logit_arg(spec, LogRatio(dd), rec)) <= 10.0;
            if (!moderate) continue;
            const double f0 = pair_terms(spec, LogRatio(d - h), rec).loss;
            const double f1 = pair_terms(spec, LogRatio(d), rec).loss;
            const double f2 = pair_terms(spec, LogRatio(d + h), rec).loss;
            CHECK(f0 + f2 - 2 * f1 > 0.0);
        }
    }
}

TEST_CASE("hinge_limit", "[losses]")
{
    const auto rec = make_ref_record(0.5, 0.5, 0.5, 0.0, 1.0, 1.0);
    CHECK(hinge_limit(LossKind::DPO, LogRatio(0.7), rec, 0, 1, 1) == 0.0);
    CHECK(hinge_limit(LossKind::DPO, LogRatio(0.5 - 2.0), rec, 0, 1, 1) == 2.0);
    CHECK(hinge_limit(LossKind::CPO, LogRatio(0.5), rec, 1.0, 4.0, 1) == Approx(0.5));

    SECTION("ECPOC target exceeds gamma; CPO target with gamma >= gamma* is non-negative")
    {
        Rng rng(6);
        for (int i = 0; i < 2000; ++i) {
            const double gamma = rng.uniform(0.01, 2), tau = rng.uniform(0.5, 2), dref = rng.uniform(-10, 10);
            CHECK(dref + conservative_margin(dref, gamma, tau) > gamma);
            // per-pair gamma* for the constant 2 gamma margin is beta max(0, -dref) / 2
            const double beta = rng.uniform(0.1, 5);
            const double g_star = beta * std::fmax(0.0, -dref) / 2.0;
            CHECK(dref + 2.0 * g_star / beta >= -1e-12);
        }
    }

    SECTION("scaled loss approaches the hinge as beta grows")
    {
        const double gamma = 0.5, tau = 1.0;
        for (LossKind k : {LossKind::DPO, LossKind::CPO, LossKind::ECPOC}) {
            for (int i = 0; i < 10; ++i)
                for (int j = 0; j < 10; ++j) {
                    const double dt = -3 + 6.0 * i / 9, dr = -3 + 6.0 * j / 9;
                    std::vector<double> err;
                    for (double beta : {10.0, 100.0, 1000.0}) {
                        auto r = make_ref_record(dr, 0.5, 0.5, gamma, tau, beta);
                        r.gamma_ref = 2 * gamma;
                        const double scaled = pair_terms({k, beta, gamma, tau}, LogRatio(dt), r).loss / beta;
                        const double e = std::fabs(scaled - hinge_limit(k, LogRatio(dt), r, gamma, beta, tau));
                        CHECK(e <= std::log(2.0) / beta + 1e-15);
                        err.push_back(e);
                    }
                    // allow a few ulps of the hinge value for rounding in loss / beta
                    const auto r = make_ref_record(dr, 0.5, 0.5, gamma, tau, 1.0);
                    const double ulps = 4 * std::numeric_limits<double>::epsilon() *
                        std::fmax(1.0, std::fabs(hinge_limit(k, LogRatio(dt), r, gamma, 1.0, tau)) + std::fabs(dt) + std::fabs(dr));
                    CHECK(err[1] <= err[0] + ulps);
                    CHECK(err[2] <= err[1] + ulps);
                }
        }
    }
}
