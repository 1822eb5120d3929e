#include <gtest/gtest.h>

#include "dkn/attribution.hpp"
#include "test_util.hpp"

using namespace dkn;

TEST(Attribution, RiemannSumExactOnLinearStub) {
    for (std::size_t steps : {1u, 2u, 7u, 20u, 2000u}) {
        // Constant gradient 3: the sum is exactly actual * 3.
        EXPECT_DOUBLE_EQ(riemann_ig(1.5, 0.0, steps, [](double) { return 3.0; }), 4.5) << steps;
        EXPECT_DOUBLE_EQ(riemann_ig(-2.0, 0.7, steps, [](double) { return -0.25; }), 0.5) << steps;
    }
    EXPECT_THROW(riemann_ig(1.0, 0.0, 0, [](double) { return 1.0; }), Error);
}

TEST(Attribution, RiemannSumConvergesOnQuadratic) {
    // f(v) = v^2 / 2 from baseline 0: right-endpoint sum a^2 (m + 1) / (2m).
    const double a = 0.8;
    for (std::size_t m : {1u, 4u, 50u}) {
        const double expect = a * a * static_cast<double>(m + 1) / (2.0 * static_cast<double>(m));
        EXPECT_NEAR(riemann_ig(a, 0.0, m, [](double v) { return v; }), expect, 1e-12);
    }
    EXPECT_NEAR(riemann_ig(a, 0.0, 100000, [](double v) { return v; }), a * a / 2, 1e-5);
}

TEST(Attribution, ScoresAreClampedAndNormalised) {
    const auto s = normalize_scores({2.0, -1.0, 0.0, 6.0});
    EXPECT_EQ(s, (std::vector<double>{0.25, 0.0, 0.0, 0.75}));
    EXPECT_THROW(normalize_scores({-1.0, 0.0}), NumericError);
}

TEST(Attribution, AttributeAllMatchesSingleNeuronPath) {
    const auto m = test::tiny_model(3);
    const Tokens q{4, 5, 6, 7};
    const int ans = 9;
    const auto r = attribute_all(m, q, ans, 12);
    ASSERT_EQ(r.raw.size(), m.config.neuron_count());
    double total = 0.0;
    for (double x : r.scores) total += x;
    EXPECT_NEAR(total, 1.0, 1e-12);
    for (std::size_t i : {0u, 5u, 17u, 35u}) {
        EXPECT_DOUBLE_EQ(r.raw[i], integrated_gradient(m, q, ans, m.config.neuron_at(i), 12));
    }
    // Threads do not change the result.
    EXPECT_EQ(attribute_all(m, q, ans, 12, 3).raw, r.raw);
}

TEST(Attribution, KnThresholdIsRelativeToMax) {
    AttributionResult r;
    r.n_layers = 1;
    r.d_ff = 4;
    r.scores = {0.1, 0.5, 0.3, 0.1};
    EXPECT_DOUBLE_EQ(kn_threshold(r, 0.2), 0.1);
    // Strictly above the threshold.
    EXPECT_EQ(select_kns(r, 0.1).neurons, (NeuronSet{{0, 1}, {0, 2}}));
    EXPECT_EQ(r.argmax(), (NeuronId{0, 1}));
    EXPECT_DOUBLE_EQ(mean_score(r, {{0, 1}, {0, 3}}), 0.3);
    EXPECT_THROW(mean_score(r, {}), Error);
}

TEST(Attribution, RejectsBadInputs) {
    const auto m = test::tiny_model();
    EXPECT_THROW(attribute_all(m, {1, 2}, 99), Error);
    EXPECT_THROW(attribute_all(m, {1, 2}, 3, 0), Error);
    EXPECT_THROW(integrated_gradient(m, {1, 2}, 3, {7, 0}), Error);
    EXPECT_EQ(baseline_input({5, 6, 7}), (Tokens{0, 0, 0}));
}
