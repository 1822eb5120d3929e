#include <gtest/gtest.h>

#include "dkn/factcheck.hpp"
#include "test_util.hpp"

using namespace dkn;

namespace {

FactLabel label(bool gold, bool predicted) { return {"", 0, gold, predicted, 0.0}; }

}  // namespace

TEST(Factcheck, SplitIsSeededPartition) {
    std::vector<int> items(10);
    std::iota(items.begin(), items.end(), 0);
    const auto [a, b] = split_relation(items, 0.5, 3, "P1");
    EXPECT_EQ(a.size(), 5u);
    EXPECT_EQ(b.size(), 5u);
    std::vector<int> both = a;
    both.insert(both.end(), b.begin(), b.end());
    std::sort(both.begin(), both.end());
    EXPECT_EQ(both, items);
    EXPECT_EQ(split_relation(items, 0.5, 3, "P1").first, a);
    EXPECT_EQ(split_relation(items, 0.3, 3, "P1").first.size(), 3u);
    EXPECT_THROW(split_relation(std::vector<int>{1, 2, 3}, 0.5, 3), Error);
    EXPECT_THROW(split_relation(items, 1.0, 3), ConfigError);
}

TEST(Factcheck, RelationAggregationThreshold) {
    const NeuronId a{0, 1}, b{0, 2}, c{1, 0};
    // Union {a, b, c}: N_total 3, tau3 2.1; only a occurs 3 times.
    const auto r = aggregate_relation({{a, b}, {a, c}, {a}}, 0.7, "P0");
    EXPECT_EQ(r.n_total, 3u);
    EXPECT_DOUBLE_EQ(r.tau3, 0.7 * 3);
    EXPECT_EQ(r.neurons, (NeuronSet{a}));
    EXPECT_EQ(r.counts.at(b), 1u);
    // Strictly more than tau3.
    EXPECT_TRUE(aggregate_relation({{a}, {b}}, 0.5).empty());
    EXPECT_EQ(aggregate_relation({{a}, {b}}, 0.49).neurons.size(), 2u);
    // Duplicates inside one set count once.
    EXPECT_EQ(aggregate_relation({{a, a}, {b}}, 0.5).counts.at(a), 1u);
    EXPECT_THROW(aggregate_relation({{}, {}}, 0.7), Error);
    EXPECT_DOUBLE_EQ(kDefaultTau3Factor, 0.7);
}

TEST(Factcheck, CorruptedRecordsAreBalanced) {
    std::vector<CheckRecord> truths;
    for (int i = 0; i < 6; ++i) truths.push_back({"f" + std::to_string(i), {1, 2}, 10 + i % 3, 10 + i % 3, true});
    const auto recs = corrupt_answers(truths, {10, 11, 12, 12}, 4, "P0");
    ASSERT_EQ(recs.size(), 12u);
    for (std::size_t i = 0; i < recs.size(); i += 2) {
        EXPECT_TRUE(recs[i].gold);
        EXPECT_EQ(recs[i].candidate, recs[i].gold_answer);
        EXPECT_FALSE(recs[i + 1].gold);
        EXPECT_NE(recs[i + 1].candidate, recs[i + 1].gold_answer);
    }
    EXPECT_THROW(corrupt_answers(truths, {10, 10}, 4), Error);
}

TEST(Factcheck, PrfByHand) {
    // tp 2, fp 1, fn 1, tn 1.
    const auto p = evaluate_prf({label(true, true), label(true, true), label(false, true), label(true, false),
                                 label(false, false)});
    EXPECT_DOUBLE_EQ(p.precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(p.recall, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(p.f1, 2.0 / 3.0);
    EXPECT_EQ(p.tn, 1u);
    const auto none = evaluate_prf({label(true, false), label(false, false)});
    EXPECT_TRUE(none.zero_division);
    EXPECT_EQ(none.f1, 0.0);
    EXPECT_THROW(evaluate_prf({}), Error);
}

TEST(Factcheck, CalibrationPicksBestThreshold) {
    // Separable scores: any cut in [0.2, 0.8) is perfect; the sweep keeps the smallest.
    const auto c = calibrate_tau4({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}, 9);
    EXPECT_DOUBLE_EQ(c.f1, 1.0);
    EXPECT_NEAR(c.tau4, 0.2, 1e-12);
    EXPECT_FALSE(c.degenerate);
    const auto flat = calibrate_tau4({0.5, 0.5}, {true, false});
    EXPECT_TRUE(flat.degenerate);
    EXPECT_THROW(calibrate_tau4({0.1}, {true, false}), Error);
    EXPECT_THROW(calibrate_tau4({0.1}, {true}, 1), ConfigError);
}

TEST(Factcheck, ScoreUsesMeanAttribution) {
    const auto m = test::tiny_model(2);
    const NeuronSet ns{{0, 1}, {2, 3}};
    const auto r = attribute_all(m, {4, 5, 6}, 7, 10);
    const CheckRecord rec{"f", {4, 5, 6}, 7, 7, true};
    const double s = mean_score(r, ns);
    EXPECT_DOUBLE_EQ(fact_check(m, rec, ns, s - 1e-9, 10).score, s);
    EXPECT_TRUE(fact_check(m, rec, ns, s - 1e-9, 10).predicted);
    EXPECT_FALSE(fact_check(m, rec, ns, s, 10).predicted);
    EXPECT_THROW(fact_check(m, rec, {}, 0.0), Error);
}
