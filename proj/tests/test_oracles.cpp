#include "catch_amalgamated.hpp"

#include "prefopt/oracles.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/rng.hpp"
#include "prefopt/solvers.hpp"

#include <cmath>

using namespace prefopt;
using namespace prefopt::oracle;

namespace {

Instance random_instance(Rng& rng, std::size_t prompts, std::size_t k, double beta)
{
    const auto s = ResponseSpace::uniform(prompts, k);
    Table l = s.zeros(), r = s.zeros();
    for (std::size_t x = 0; x < prompts; ++x)
        for (std::size_t y = 0; y < k; ++y) {
            l[x][y] = rng.uniform(-1, 1);
            r[x][y] = rng.uniform(-1, 1);
        }
    return {TabularPolicy(s, l), RewardTable(s, r), PreferenceDataset(s, {{0, 0, 1, 1.0}}), beta};
}

double delta_of(const Table& probs, std::size_t x, std::size_t a, std::size_t b)
{
    return std::log(probs[x][a]) - std::log(probs[x][b]);
}

} // namespace

TEST_CASE("rlhf grid optimum matches the closed form", "[oracles]")
{
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const auto in = random_instance(rng, 1 + rng.below(2), 2 + rng.below(2), rng.uniform(0.5, 3));
        const auto g = grid_optimum(Objective::rlhf, in, 200, 30);
        CHECK(g.maximized);
        CHECK(std::fabs(g.best_objective - evaluate(Objective::rlhf, in, g.best_probs)) <= 1e-12);
        const auto cf = rlhf_closed_form(in.ref, in.reward, in.beta);
        const auto& sp = in.ref.space();
        for (std::size_t x = 0; x < sp.num_prompts(); ++x)
            for (std::size_t y = 1; y < sp.responses(x); ++y)
                CHECK(std::fabs(delta_of(g.best_probs, x, 0, y) - log_prob_ratio(cf, x, 0, y).value) <= 1e-4);
        // the closed form is at least as good as the grid point
        CHECK(evaluate(Objective::rlhf, in, cf.prob_table()) >= g.best_objective - 1e-12);
    }
}

TEST_CASE("DPO grid optimum on a well-posed instance", "[oracles]")
{
    // both orientations with BT weights: the DPO optimum is the RLHF optimum
    const auto s = ResponseSpace::uniform(1, 2);
    const TabularPolicy ref(s, {{0.3, -0.2}});
    const RewardTable reward(s, {{0.7, 0.0}});
    const auto ds = precompute_ref_stats(bt_population_dataset(reward, {{0, 0, 1}}), ref, 0, 1, 1.0);
    const Instance in{ref, reward, ds, 1.0};
    const auto g = grid_optimum(Objective::dpo_loss, in, 200, 30);
    CHECK_FALSE(g.maximized);
    const double expect = rlhf_delta(log_prob_ratio(ref, 0, 0, 1), 0.7, 1.0).value;
    CHECK(std::fabs(delta_of(g.best_probs, 0, 0, 1) - expect) <= 2e-3);
    // the oracle's loss agrees with the production loss at the grid point
    const auto at = TabularPolicy(s, g.best_logits);
    CHECK(std::fabs(g.best_objective - dataset_loss({LossKind::DPO, 1.0, 0, 1}, at, ds)) <= 1e-12);
}

TEST_CASE("oracle losses agree with production losses", "[oracles]")
{
    Rng rng(22);
    const ResponseSpace s({3, 2});
    for (int trial = 0; trial < 50; ++trial) {
        Table l = s.zeros(), q = s.zeros();
        for (std::size_t x = 0; x < 2; ++x)
            for (std::size_t y = 0; y < s.responses(x); ++y) {
                l[x][y] = rng.uniform(-2, 2);
                q[x][y] = rng.uniform(-2, 2);
            }
        const TabularPolicy ref(s, l), th(s, q);
        const PreferenceDataset raw(s, {{0, 0, 1, 1.0}, {0, 2, 1, 0.5}, {1, 1, 0, 2.0}});
        const double beta = rng.uniform(0.2, 3), gamma = rng.uniform(0, 0.5), tau = rng.uniform(0.5, 2);
        const auto ds = precompute_ref_stats(raw, ref, gamma, tau, beta);
        const Instance in{ref, RewardTable(s, s.zeros()), ds, beta, gamma, tau};
        const std::pair<Objective, LossKind> kinds[] = {
            {Objective::dpo_loss, LossKind::DPO}, {Objective::cpo_loss, LossKind::CPO}, {Objective::ecpoc_loss, LossKind::ECPOC}};
        for (auto [o, k] : kinds) {
            const double a = evaluate(o, in, th.prob_table());
            const double b = dataset_loss({k, beta, gamma, tau}, th, ds);
            CHECK(std::fabs(a - b) <= 1e-12 * std::fmax(1.0, b));
        }
    }
}

TEST_CASE("degenerate single pair pushes to the boundary", "[oracles]")
{
    const auto s = ResponseSpace::uniform(1, 2);
    const TabularPolicy ref = TabularPolicy::uniform(s);
    const RewardTable reward(s, {{1.0, 0.0}});
    const auto ds = precompute_ref_stats(PreferenceDataset(s, {{0, 0, 1, 1.0}}), ref, 0, 1, 1.0);
    const auto g = grid_optimum(Objective::dpo_loss, {ref, reward, ds, 1.0}, 100, 0);
    // loss is monotone in delta: the last interior grid point wins
    CHECK(g.best_probs[0][0] == Catch::Approx(0.99).epsilon(1e-12));
    INFO("refined winner probability " << grid_optimum(Objective::dpo_loss, {ref, reward, ds, 1.0}, 100, 30).best_probs[0][0]);
    SUCCEED();
}

TEST_CASE("budget guard", "[oracles]")
{
    Rng rng(23);
    auto big_prompts = random_instance(rng, 3, 2, 1.0);
    CHECK_THROWS_AS(grid_optimum(Objective::rlhf, big_prompts, 50), UsageError);
    auto big_k = random_instance(rng, 1, 4, 1.0);
    CHECK_THROWS_AS(grid_optimum(Objective::rlhf, big_k, 50), UsageError);
    auto ok = random_instance(rng, 2, 3, 1.0);
    CHECK_NOTHROW(grid_optimum(Objective::rlhf, ok, 50));
    ok.min_prob = 0.6;
    CHECK_THROWS_AS(grid_optimum(Objective::rlhf, ok, 50), UsageError);
}

TEST_CASE("finite differences", "[oracles]")
{
    const ResponseSpace s({3, 2});
    const TabularPolicy theta(s, {{0.3, -1.2, 2.0}, {0.7, -0.1}});
    SECTION("quadratic is exact up to rounding")
    {
        auto f = [](const TabularPolicy& p) {
            double v = 0;
            int i = 0;
            for (const auto& row : p.logits())
                for (double t : row) {
                    ++i;
                    v += i * t * t + i * 0.5 * t;
                }
            return v;
        };
        const auto g = finite_diff_gradient(f, theta, 1e-5);
        int i = 1;
        for (std::size_t x = 0; x < 2; ++x)
            for (std::size_t y = 0; y < s.responses(x); ++y, ++i)
                CHECK(std::fabs(g[x][y] - (2 * i * theta.logits()[x][y] + i * 0.5)) <= 1e-8);
    }
    SECTION("symmetric instance has zero gradient")
    {
        const auto sp = ResponseSpace::uniform(1, 2);
        const TabularPolicy ref(sp, {{0.4, -0.4}});
        const auto ds = precompute_ref_stats(PreferenceDataset(sp, {{0, 0, 1, 1.0}, {0, 1, 0, 1.0}}), ref, 0, 1, 1.0);
        const auto g = finite_diff_gradient(
            [&](const TabularPolicy& p) { return dataset_loss({LossKind::DPO, 1.0, 0, 1}, p, ds); }, ref, 1e-6);
        for (double v : g[0]) CHECK(std::fabs(v) <= 1e-8);
    }
    SECTION("step size range")
    {
        auto f = [](const TabularPolicy&) { return 0.0; };
        CHECK_THROWS_AS(finite_diff_gradient(f, theta, 1e-9), UsageError);
        CHECK_THROWS_AS(finite_diff_gradient(f, theta, 1e-3), UsageError);
        CHECK_NOTHROW(finite_diff_gradient(f, theta, 1e-8));
        CHECK_NOTHROW(finite_diff_gradient(f, theta, 1e-4));
    }
}
