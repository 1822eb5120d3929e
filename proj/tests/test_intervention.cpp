#include <gtest/gtest.h>

#include "dkn/intervention.hpp"
#include "test_util.hpp"

using namespace dkn;

namespace {

Bdc bdc(NeuronSet m, double birth) {
    Bdc b;
    b.members = std::move(m);
    b.birth = birth;
    return b;
}

SweepRow row(std::vector<std::size_t> subset, double delta) {
    SweepRow r;
    r.subset = std::move(subset);
    r.delta = delta;
    r.excluded = excluded(delta);
    return r;
}

}  // namespace

TEST(Intervention, DeltaProbAndExclusion) {
    EXPECT_DOUBLE_EQ(delta_prob(0.5, 0.25), 50.0);
    EXPECT_DOUBLE_EQ(delta_prob(0.2, 0.4), -100.0);
    EXPECT_THROW(delta_prob(0.0, 0.1), NumericError);
    EXPECT_FALSE(excluded(900.0));
    EXPECT_TRUE(excluded(900.5));
    EXPECT_TRUE(excluded(-901.0));
    EXPECT_DOUBLE_EQ(kExclusionLimit, 900.0);
}

TEST(Intervention, ModesParse) {
    EXPECT_EQ(SuppressionMode::parse("zero-values").name(), "zero-values");
    EXPECT_EQ(SuppressionMode::parse("scale-edges", 3).factor, 3.0);
    EXPECT_TRUE(SuppressionMode::parse("null-edges").on_edges());
    EXPECT_THROW(SuppressionMode::parse("melt"), ConfigError);
    EXPECT_THROW(plan_for_neurons({{0, 0}}, SuppressionMode::scale_values(-1), nullptr), ConfigError);
}

TEST(Intervention, EdgePlansTouchAdjacentPairsOnly) {
    const auto m = test::tiny_model();
    const NeuronSet ns{{0, 1}, {0, 2}, {1, 3}, {2, 4}};
    const auto g = build_distance_graph(m, ns);
    const auto pb = plan_for_neurons(ns, SuppressionMode::null_edges(), &g);
    EXPECT_FALSE(pb.warning);
    // (0,1)-(1,3), (0,2)-(1,3), (1,3)-(2,4).
    EXPECT_EQ(pb.plan.edge_edits().size(), 3u);
    EXPECT_TRUE(pb.plan.value_edits().empty());
    const auto same_layer = plan_for_neurons({{0, 1}, {0, 2}}, SuppressionMode::null_edges(), &g);
    EXPECT_TRUE(same_layer.warning);
    EXPECT_THROW(plan_for_neurons(ns, SuppressionMode::null_edges(), nullptr), Error);
    EXPECT_THROW(plan_for_neurons({{1, 0}}, SuppressionMode::null_edges(), &g), Error);
    const auto values = plan_for_neurons(ns, SuppressionMode::zero_values(), nullptr);
    EXPECT_EQ(values.plan.value_edits().size(), 4u);
}

TEST(Sweep, ExhaustiveRowsAndSummaries) {
    const auto m = test::tiny_model(4);
    DknSet d;
    d.fact = "f";
    d.bdcs = {bdc({{0, 1}, {0, 2}}, 1), bdc({{1, 3}}, 2), bdc({{2, 4}, {2, 5}}, 3)};
    const Tokens q{4, 5, 6};
    const auto r = subset_sweep(m, d, nullptr, q, 7, SuppressionMode::zero_values());
    ASSERT_EQ(r.rows.size(), 7u);
    EXPECT_FALSE(r.sampled);
    EXPECT_EQ(r.rows.back().bitmask(3), "111");
    // Independent recomputation of every row and of the aggregates.
    const double before = predict_prob(m, q, 7);
    double partial = 0.0;
    std::vector<double> by_size(4, 0.0), n(4, 0.0);
    for (const auto& rw : r.rows) {
        InterventionPlan plan;
        for (std::size_t b : rw.subset) {
            for (const auto& x : d.bdcs[b].members) plan.set_value(x, ValueEdit::zero());
        }
        const double expect = 100.0 * (before - predict_prob(m, q, 7, plan)) / before;
        EXPECT_NEAR(rw.delta, expect, 1e-12);
        by_size[rw.subset.size()] += rw.delta;
        n[rw.subset.size()] += 1;
        if (rw.subset.size() < 3) partial += rw.delta;
    }
    EXPECT_NEAR(*r.partial_mean, partial / 6.0, 1e-12);
    EXPECT_NEAR(*r.full, r.rows.back().delta, 0.0);
    for (std::size_t k = 1; k <= 3; ++k) EXPECT_NEAR(*r.size_means[k], by_size[k] / n[k], 1e-12);
    EXPECT_THROW(subset_sweep(m, DknSet{}, nullptr, q, 7, SuppressionMode::zero_values()), Error);
}

TEST(Sweep, SampledSubsetsAreDeterministicAndCoverExtremes) {
    SweepParams p;
    p.exhaustive_limit = 4;
    p.random_subsets = 20;
    p.seed = 9;
    bool sampled = false;
    const auto a = detail::sweep_subsets(6, p, sampled);
    EXPECT_TRUE(sampled);
    EXPECT_EQ(a, detail::sweep_subsets(6, p, sampled));
    EXPECT_EQ(a.front(), (std::vector<std::size_t>{0}));
    EXPECT_EQ(a.back().size(), 6u);
    std::size_t singles = 0, leave_one = 0;
    for (const auto& s : a) {
        singles += s.size() == 1;
        leave_one += s.size() == 5;
    }
    EXPECT_EQ(singles, 6u);
    EXPECT_EQ(leave_one, 6u);
}

TEST(Sweep, InflectionIsLastStepLargest) {
    SweepReport r;
    r.cardinality = 3;
    r.rows = {row({0}, 5), row({1}, 5), row({2}, 5), row({0, 1}, 10), row({0, 2}, 10), row({1, 2}, 10),
              row({0, 1, 2}, 60)};
    summarise(r);
    EXPECT_TRUE(r.inflection());
    EXPECT_DOUBLE_EQ(*r.partial_mean, 7.5);
    r.rows.back() = row({0, 1, 2}, 14);
    summarise(r);
    EXPECT_FALSE(r.inflection());
    // Excluded rows are ignored.
    r.rows.back() = row({0, 1, 2}, 1000);
    summarise(r);
    EXPECT_FALSE(r.full.has_value());
    EXPECT_FALSE(r.inflection());
}

TEST(Baselines, RandomMatchedIsDisjointAndSeeded) {
    const auto cfg = test::tiny_config();
    const NeuronSet dkn{{0, 1}, {1, 2}, {2, 3}};
    const auto a = baseline_neurons(BaselineKind::random_matched, dkn, {}, cfg, 4);
    EXPECT_EQ(a.size(), dkn.size());
    for (const auto& n : a) EXPECT_FALSE(contains(dkn, n));
    EXPECT_EQ(a, baseline_neurons(BaselineKind::random_matched, dkn, {}, cfg, 4));
    EXPECT_NE(a, baseline_neurons(BaselineKind::random_matched, dkn, {}, cfg, 5));
    EXPECT_TRUE(baseline_neurons(BaselineKind::none, dkn, {}, cfg, 4).empty());
}

TEST(Baselines, AccuracyUnderPlan) {
    const auto m = test::tiny_model();
    const std::vector<LabelledQuery> qs{{{1, 2, 3}, predict_top1(m, {1, 2, 3})}, {{4, 5}, -1}};
    EXPECT_DOUBLE_EQ(accuracy_under(m, qs, {}), 0.5);
    EXPECT_THROW(accuracy_under(m, {}, {}), Error);
}
