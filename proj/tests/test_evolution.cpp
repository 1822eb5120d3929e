#include <gtest/gtest.h>

#include "dkn/evolution.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dkn;

TEST(Evolution, ParamDeltaByHand) {
    const auto m = test::tiny_model();
    auto after = m;
    const NeuronId n{1, 4};
    // Double the W_fc column: relative change 1. W_proj row unchanged.
    for (std::size_t i = 0; i < m.config.d_model; ++i) after.layers[1].fc_w(i, 4) *= 2.0;
    const auto d = param_delta(m, after);
    EXPECT_NEAR(d.at(n), 1.0, 1e-12);
    EXPECT_EQ(d.at({1, 3}), 0.0);
    // Negating the W_proj row: relative change 2; combined as a root sum of squares.
    for (std::size_t i = 0; i < m.config.d_model; ++i) after.layers[1].proj_w(4, i) *= -1.0;
    EXPECT_NEAR(param_delta(m, after).at(n), std::sqrt(1.0 + 4.0), 1e-12);
    auto other = test::tiny_model(7, 2);
    EXPECT_THROW(param_delta(m, other), Error);
}

TEST(Evolution, ZeroWeightsBeforeTraining) {
    auto m = test::tiny_model();
    for (std::size_t i = 0; i < m.config.d_model; ++i) m.layers[0].fc_w(i, 2) = 0.0;
    EXPECT_EQ(param_delta(m, m).at({0, 2}), 0.0);
    auto after = m;
    after.layers[0].fc_w(0, 2) = 1.0;
    EXPECT_THROW(param_delta(m, after), NumericError);
}

TEST(Evolution, ChangedSetAndOverlap) {
    ParamDelta d{1, 5, {0.0, 1.0, 0.04, 0.05, 0.5}};
    const auto c = changed_set(d, 0.04);
    EXPECT_DOUBLE_EQ(c.tau, 0.04);
    // Strictly above tau.
    EXPECT_EQ(c.neurons, (NeuronSet{{0, 1}, {0, 3}, {0, 4}}));
    EXPECT_DOUBLE_EQ(overlap({{0, 1}, {0, 2}}, c.neurons), 0.5);
    EXPECT_THROW(overlap({}, c.neurons), Error);
    EXPECT_TRUE(changed_set({1, 2, {0.0, 0.0}}, 0.05).warning);
    EXPECT_DOUBLE_EQ(kSmallDeltaFactor, 0.04);
    EXPECT_DOUBLE_EQ(kLargeDeltaFactor, 0.05);
}

TEST(Evolution, FrozenParametersAreBitwiseUnchanged) {
    const auto m = test::tiny_model(5);
    const std::vector<Tokens> corpus{{1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11}};
    TrainParams hp;
    hp.steps = 15;
    for (Optimizer opt : {Optimizer::adam, Optimizer::sgd}) {
        hp.optimizer = opt;
        for (MaskKind kind : {MaskKind::dkn, MaskKind::kn, MaskKind::random_matched}) {
            const NeuronSet ns = kind == MaskKind::kn ? NeuronSet{{0, 0}, {1, 5}, {2, 11}} : NeuronSet{{1, 2}, {2, 3}};
            const auto out = train(m, corpus, hp, mask_for(kind, ns, m.config)).model;
            EXPECT_EQ(oracle::frozen_violations(m, out, ns, false), 0u) << to_string(kind);
            // And the trainable neurons did move.
            EXPECT_NE(out.fc_column(ns.front()), m.fc_column(ns.front()));
        }
    }
    EXPECT_THROW(mask_for(MaskKind::dkn, {}, m.config), Error);
    EXPECT_EQ(mask_for(MaskKind::all, {}, m.config).trainable_neurons.size(), m.config.neuron_count());
}

TEST(Evolution, OracleDetectsChanges) {
    const auto m = test::tiny_model();
    auto x = m;
    x.layers[0].qkv_b(0, 0) += 1e-300;
    EXPECT_EQ(oracle::frozen_violations(m, x, {}, false), 1u);
    EXPECT_EQ(oracle::frozen_violations(m, x, {}, true), 0u);
    x = m;
    x.layers[2].fc_b(0, 3) = -x.layers[2].fc_b(0, 3) + 1.0;
    EXPECT_EQ(oracle::frozen_violations(m, x, {}, false), 1u);
    EXPECT_EQ(oracle::frozen_violations(m, x, {{2, 3}}, false), 0u);
}

TEST(Evolution, FinetuneEvaluatesTriple) {
    const auto m = test::tiny_model(6);
    EvolveDatasets d;
    d.q_new = {{{1, 2, 3}, 4}};
    d.q_old = {{{5, 6, 7}, predict_top1(m, {5, 6, 7})}};
    d.q_au = {{{2, 1, 3}, 4}};
    d.train = {{1, 2, 3, 4}};
    TrainParams hp;
    hp.steps = 60;
    hp.lr = 0.02;
    hp.last_token_only = true;
    const auto r = freeze_finetune_eval(m, MaskKind::all, {}, d, hp);
    EXPECT_DOUBLE_EQ(r.acc.q_new, 1.0);
    EXPECT_DOUBLE_EQ(evaluate_triple(r.model, d).q_new, r.acc.q_new);
    const auto j = to_json(r.acc);
    EXPECT_TRUE(j.contains("Q_new") && j.contains("Q_old") && j.contains("Q_au"));
}
