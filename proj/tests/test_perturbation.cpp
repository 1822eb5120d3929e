#include <gtest/gtest.h>

#include <map>

#include "dkn/perturbation.hpp"
#include "test_util.hpp"

using namespace dkn;

TEST(Perturb, Operations) {
    const Tokens q{10, 11, 12};
    EXPECT_EQ(perturb(q, PerturbOp::replace, 1).perturbed, (Tokens{10, 2, 12}));
    EXPECT_EQ(perturb(q, PerturbOp::add, 0).perturbed, (Tokens{3, 10, 11, 12}));
    EXPECT_EQ(perturb(q, PerturbOp::add, 2).perturbed, (Tokens{10, 11, 3, 12}));
    EXPECT_EQ(perturb(q, PerturbOp::del, 2).perturbed, (Tokens{10, 11}));
    EXPECT_EQ(perturb(q, PerturbOp::del, 2).original, q);
    // Nothing may be placed on the blank.
    EXPECT_THROW(perturb(q, PerturbOp::add, 3), Error);
    EXPECT_THROW(perturb(q, PerturbOp::replace, 3), Error);
    EXPECT_THROW(perturb({10}, PerturbOp::del, 0), Error);
    EXPECT_THROW(perturb({}, PerturbOp::replace, 0), Error);
}

TEST(Perturb, RandomDrawIsUniformOverValidEdits) {
    const Tokens q{10, 11, 12, 13};
    std::map<std::pair<int, std::size_t>, int> seen;
    Rng rng = make_rng(3, "uniform");
    const int draws = 24000;
    for (int i = 0; i < draws; ++i) {
        const auto p = random_perturbation(q, rng, 3);
        ++seen[{static_cast<int>(p.op), p.position}];
    }
    // 4 replace + 4 add + 4 delete positions.
    ASSERT_EQ(seen.size(), 12u);
    for (const auto& [k, c] : seen) EXPECT_NEAR(c, draws / 12, 200);
    // One-token prompts cannot delete.
    Rng r2 = make_rng(3, "short");
    for (int i = 0; i < 100; ++i) EXPECT_NE(random_perturbation({10}, r2, 0).op, PerturbOp::del);
}

TEST(Perturb, PerQueryStreamsAreOrderIndependent) {
    std::vector<LabelledQuery> qs{{{10, 11, 12}, 5}, {{13, 14, 15, 16}, 6}, {{17, 18}, 7}};
    const auto a = perturb_all(qs, 42);
    const auto b = perturb_all({qs[0], qs[1]}, 42);
    EXPECT_EQ(a[1].perturbed, b[1].perturbed);
    EXPECT_EQ(a[1].seed, 42u);
    bool differs = false;
    for (std::uint64_t s = 43; s < 53; ++s) {
        const auto c = perturb_all(qs, s);
        for (std::size_t i = 0; i < qs.size(); ++i) differs = differs || c[i].perturbed != a[i].perturbed;
    }
    EXPECT_TRUE(differs);
}

TEST(Perturb, HarvestKeepsCleanRightNoisyWrong) {
    const auto m = test::tiny_model(8);
    std::vector<LabelledQuery> qs;
    Rng rng = make_rng(1, "harvest");
    for (int i = 0; i < 40; ++i) {
        const Tokens t = test::random_tokens(rng, 20, 4);
        qs.push_back({t, predict_top1(m, t)});
    }
    const auto errs = harvest_errors(m, qs, 5);
    const auto all = perturb_all(qs, 5);
    std::size_t expect = 0;
    for (std::size_t i = 0; i < qs.size(); ++i) expect += predict_top1(m, all[i].perturbed) != qs[i].answer;
    EXPECT_EQ(errs.size(), expect);
    for (const auto& e : errs) {
        EXPECT_EQ(e.answer, qs[e.index].answer);
        EXPECT_NE(predict_top1(m, e.query.perturbed), e.answer);
    }
    EXPECT_EQ(as_queries(errs).size(), errs.size());
}

TEST(Perturb, JsonLines) {
    Vocab v;
    for (const char* w : {"a", "b", "c"}) v.add(w);
    const auto p = perturb(v.encode("a b c"), PerturbOp::replace, 0, 9);
    const auto j = to_json(p, v);
    EXPECT_EQ(j["perturbed"], "[replace] b c");
    EXPECT_EQ(j["op"], "replace");
    const auto text = errors_jsonl({{0, p, v.id("c")}}, v);
    EXPECT_EQ(nlohmann::json::parse(text)["answer"], "c");
}
