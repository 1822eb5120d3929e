#include <gtest/gtest.h>

#include "dkn/experiments.hpp"

using namespace dkn;

namespace {

ExperimentConfig smoke() {
    auto c = ExperimentConfig::load((std::filesystem::path(DKN_SOURCE_DIR) / "configs/smoke.toml").string());
    c.jobs = 2;
    return c;
}

}  // namespace

TEST(Experiments, LocateReportRoundTripReproducesDrivers) {
    const auto cfg = smoke();
    Lab lab = Lab::train_new(cfg, 7);
    ASSERT_FALSE(lab.mastered().empty());
    EXPECT_LE(lab.studied().size(), cfg.max_facts);
    const auto report = nlohmann::json::parse(run_locate(lab).dump());
    const auto deg = run_degeneracy(lab);
    const auto rob = run_robustness(lab);

    Lab fresh(cfg, 7, lab.world(), lab.vocab(), lab.model());
    adopt_locate_report(fresh, report);
    EXPECT_EQ(to_json(run_degeneracy(fresh).summary), to_json(deg.summary));
    EXPECT_EQ(to_json(run_robustness(fresh)), to_json(rob));

    Lab other_seed(cfg, 8, lab.world(), lab.vocab(), lab.model());
    EXPECT_THROW(adopt_locate_report(other_seed, report), MissingPrerequisite);
    auto changed = cfg;
    changed.locate.kn_factor = 0.3;
    Lab other_cfg(changed, 7, lab.world(), lab.vocab(), lab.model());
    EXPECT_THROW(adopt_locate_report(other_cfg, report), MissingPrerequisite);
}

TEST(Experiments, DegeneracySummaryByHand) {
    auto rep = [](std::size_t card, double partial, double full, std::vector<double> means) {
        SweepReport r;
        r.cardinality = card;
        r.partial_mean = partial;
        r.full = full;
        for (double m : means) r.size_means.push_back(m);
        return r;
    };
    const std::vector<SweepReport> sweeps{rep(1, 0, 40, {0, 40}), rep(2, 10, 50, {0, 10, 50}),
                                          rep(3, 20, 30, {0, 15, 25, 30})};
    const auto s = summarise_degeneracy(sweeps, 5);
    EXPECT_EQ(s.facts, 5u);
    EXPECT_EQ(s.nonempty, 3u);
    EXPECT_EQ(s.multi, 2u);
    EXPECT_DOUBLE_EQ(s.mean_partial, 15.0);
    EXPECT_DOUBLE_EQ(s.mean_full, 40.0);
    // Only the 2-component curve ends on its largest step.
    EXPECT_DOUBLE_EQ(s.inflection_rate, 0.5);
    EXPECT_DOUBLE_EQ(s.multi_rate(), 0.4);
}

TEST(Experiments, EvolutionDatasetsSeparateOldAndNew) {
    const auto cfg = smoke();
    Lab lab = Lab::train_new(cfg, 7);
    const auto d = evolve_datasets(lab);
    EXPECT_EQ(d.q_new.size(), lab.world().q_new.size());
    EXPECT_EQ(d.q_au.size(), d.q_new.size());
    EXPECT_EQ(d.train.size(), d.q_new.size());
    for (const auto& o : d.q_old) {
        for (const auto& n : d.q_new) EXPECT_NE(o.prompt, n.prompt);
    }
}
