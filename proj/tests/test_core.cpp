#include "catch_amalgamated.hpp"

#include "prefopt/core.hpp"
#include "prefopt/rng.hpp"

#include <cmath>

using namespace prefopt;
using Catch::Approx;

namespace {

// explicit softmax with long double as the oracle
std::vector<long double> softmax_ld(const std::vector<double>& l)
{
    long double m = l[0];
    for (double v : l) m = std::max<long double>(m, v);
    long double z = 0;
    for (double v : l) z += std::exp(static_cast<long double>(v) - m);
    std::vector<long double> p;
    for (double v : l) p.push_back(std::exp(static_cast<long double>(v) - m) / z);
    return p;
}

} // namespace

TEST_CASE("response space validation", "[core]")
{
    CHECK_THROWS_AS(ResponseSpace({2, 1}), UsageError);
    CHECK_THROWS_AS(ResponseSpace(std::vector<std::size_t>{}), UsageError);
    const ResponseSpace s({2, 3});
    CHECK(s.num_prompts() == 2);
    CHECK(s.total() == 5);
    CHECK_THROWS_AS(s.check_response(1, 3), UsageError);
    CHECK_THROWS_AS(s.check_prompt(2), UsageError);
}

TEST_CASE("policy rejects non-finite or misshapen logits", "[core]")
{
    const auto s = ResponseSpace::uniform(1, 2);
    CHECK_THROWS_AS(TabularPolicy(s, {{0.0, NAN}}), UsageError);
    CHECK_THROWS_AS(TabularPolicy(s, {{0.0, INFINITY}}), UsageError);
    CHECK_THROWS_AS(TabularPolicy(s, {{0.0}}), UsageError);
    CHECK_THROWS_AS(TabularPolicy(s, {{0.0, 0.0}, {0.0, 0.0}}), UsageError);
}

TEST_CASE("policy_prob", "[core]")
{
    const auto s = ResponseSpace::uniform(1, 2);
    SECTION("uniform logits")
    {
        const TabularPolicy p(s, {{0.0, 0.0}});
        CHECK(policy_prob(p, 0, 0) == 0.5);
        CHECK(policy_prob(p, 0, 1) == 0.5);
    }
    SECTION("logits [ln 3, 0]")
    {
        const TabularPolicy p(s, {{std::log(3.0), 0.0}});
        CHECK(policy_prob(p, 0, 0) == Approx(0.75).margin(1e-15));
    }
    SECTION("large logit does not overflow")
    {
        const TabularPolicy p(s, {{1000.0, 0.0}});
        const double v = policy_prob(p, 0, 0);
        CHECK(std::isfinite(v));
        CHECK(std::fabs(v - 1.0) <= 1e-12);
    }
    SECTION("index errors")
    {
        const TabularPolicy p(s, {{0.0, 0.0}});
        CHECK_THROWS_AS(policy_prob(p, 0, 2), UsageError);
        CHECK_THROWS_AS(policy_prob(p, 1, 0), UsageError);
    }
}

TEST_CASE("log_prob_ratio", "[core]")
{
    const auto s = ResponseSpace::uniform(1, 2);
    CHECK(log_prob_ratio(TabularPolicy(s, {{2.0, 2.0}}), 0, 0, 1).value == 0.0);
    CHECK(log_prob_ratio(TabularPolicy(s, {{1.0, 0.0}}), 0, 0, 1).value == 1.0);
    CHECK_THROWS_AS(log_prob_ratio(TabularPolicy(s, {{1.0, 0.0}}), 0, 1, 1), UsageError);
    CHECK_THROWS_AS(log_prob_ratio(TabularPolicy(s, {{1.0, 0.0}}), 0, 0, 2), UsageError);
}

TEST_CASE("normalizer cancellation, shift invariance, positivity", "[core][property]")
{
    Rng rng(20240611);
    const auto s = ResponseSpace::uniform(1, 3);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> row{rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)};
        const TabularPolicy p(s, {row});
        const auto oracle = softmax_ld(row);

        long double sum = 0;
        for (std::size_t y = 0; y < 3; ++y) {
            const double q = policy_prob(p, 0, y);
            CHECK(q > 0.0);
            CHECK(std::fabs(q - static_cast<double>(oracle[y])) <= 1e-12);
            sum += q;
        }
        CHECK(std::fabs(static_cast<double>(sum) - 1.0) <= 1e-12);

        const double c = rng.uniform(-50, 50);
        std::vector<double> shifted{row[0] + c, row[1] + c, row[2] + c};
        const TabularPolicy ps(s, {shifted});
        for (std::size_t w = 0; w < 3; ++w) {
            for (std::size_t l = 0; l < 3; ++l) {
                if (w == l) continue;
                const double d = log_prob_ratio(p, 0, w, l).value;
                const double full = static_cast<double>(std::log(oracle[w]) - std::log(oracle[l]));
                CHECK(std::fabs(d - full) <= 1e-12);
                CHECK(std::fabs(log_prob_ratio(ps, 0, w, l).value - d) <= 1e-12);
            }
        }
    }
}

TEST_CASE("content hash tracks logits bit-for-bit", "[core]")
{
    const auto s = ResponseSpace::uniform(1, 2);
    const TabularPolicy a(s, {{0.1, 0.2}});
    const TabularPolicy b(s, {{0.1, 0.2}});
    const TabularPolicy c(s, {{0.1, std::nextafter(0.2, 1.0)}});
    CHECK(a.content_hash() == b.content_hash());
    CHECK(a.content_hash() != c.content_hash());
    CHECK(a.content_hash().size() == 64);
}

TEST_CASE("counter rng is a pure function of its inputs", "[core]")
{
    CHECK(counter_index(7, 3, 10) == counter_index(7, 3, 10));
    std::vector<int> hist(4, 0);
    for (std::uint64_t i = 0; i < 40000; ++i) ++hist[counter_index(11, i, 4)];
    for (int h : hist) CHECK(std::abs(h - 10000) < 400);
}
