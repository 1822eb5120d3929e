#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/config.hpp"
#include "dkn/perturbation.hpp"

// End-to-end experiment drivers. A Lab holds one seed's world, vocabulary,
// trained model and localisation cache; every driver reads from it.

namespace dkn {

inline nlohmann::json provenance(const ExperimentConfig& c, std::uint64_t seed) {
    return {{"config", c.to_json()}, {"config_hash", c.hash()}, {"seed", seed}};
}

inline std::vector<FactRecord> load_records(const std::filesystem::path& p, bool required) {
    if (!std::filesystem::exists(p)) {
        if (required) throw MissingPrerequisite("dataset file " + p.string() + " not found (run `dkn-lab gen-corpus`)");
        return {};
    }
    return load_jsonl(p.string());
}

/// Reads a world written by gen-corpus or converted from TempLama.
inline World load_world(const std::filesystem::path& dir) {
    World w;
    w.facts = load_records(dir / "facts.jsonl", true);
    w.paraphrases = load_records(dir / "paraphrases.jsonl", false);
    w.q_new = load_records(dir / "q_new.jsonl", false);
    w.q_au = load_records(dir / "q_au.jsonl", false);
    if (w.facts.empty()) throw Error("dataset " + dir.string() + " has no facts");
    std::set<std::string> vocab;
    for (const auto* rs : {&w.facts, &w.paraphrases, &w.q_new, &w.q_au}) {
        for (const auto& r : *rs) {
            for (const auto& word : split_words(r.prompt())) vocab.insert(word);
            vocab.insert(r.answer);
        }
    }
    for (const auto& f : w.facts) w.corpus_lines.push_back(World::line(f));
    for (const auto& f : w.paraphrases) w.corpus_lines.push_back(World::line(f));
    // gen-corpus also lists answer tokens no record uses; keep them so the
    // vocabulary (and with it the model shape) matches the generated world.
    if (std::filesystem::exists(dir / "vocab.txt")) {
        const auto listed = split_words(read_file((dir / "vocab.txt").string()));
        for (const auto& word : vocab) {
            if (std::find(listed.begin(), listed.end(), word) == listed.end()) {
                throw Error("dataset " + dir.string() + ": vocab.txt lacks '" + word + "'");
            }
        }
        w.vocabulary = listed;
    } else {
        w.vocabulary.assign(vocab.begin(), vocab.end());
    }
    return w;
}

inline void write_world(const std::filesystem::path& dir, const World& w) {
    std::filesystem::create_directories(dir);
    write_file((dir / "facts.jsonl").string(), to_jsonl(w.facts));
    write_file((dir / "paraphrases.jsonl").string(), to_jsonl(w.paraphrases));
    write_file((dir / "q_new.jsonl").string(), to_jsonl(w.q_new));
    write_file((dir / "q_au.jsonl").string(), to_jsonl(w.q_au));
    std::string corpus;
    for (const auto& l : w.corpus_lines) corpus += l + "\n";
    write_file((dir / "corpus.txt").string(), corpus);
    std::string words;
    for (const auto& v : w.vocabulary) words += v + "\n";
    write_file((dir / "vocab.txt").string(), words);
}

inline World make_world(const ExperimentConfig& c, std::uint64_t seed) {
    if (!c.data_dir.empty()) return load_world(c.data_dir);
    CorpusSpec spec = c.corpus;
    spec.seed = seed;
    return gen_corpus(spec);
}

inline LabelledQuery labelled(const Vocab& v, const FactRecord& r) {
    const EncodedFact e = encode(v, r);
    return {e.prompt, e.answer};
}

class Lab {
public:
    Lab(ExperimentConfig cfg, std::uint64_t seed, World world, Vocab vocab, ToyTransformer model)
        : cfg_(std::move(cfg)), seed_(seed), world_(std::move(world)), vocab_(std::move(vocab)),
          model_(std::move(model)) {
        for (const auto& f : world_.facts) queries_.push_back(labelled(vocab_, f));
        const auto hit = parallel_map(queries_.size(), cfg_.jobs, [&](std::size_t i) {
            return predict_top1(model_, queries_[i].prompt) == queries_[i].answer ? 1 : 0;
        });
        for (std::size_t i = 0; i < hit.size(); ++i) {
            if (hit[i]) mastered_.push_back(i);
        }
    }

    /// Generates (or loads) the world and trains a fresh model.
    static Lab train_new(const ExperimentConfig& cfg, std::uint64_t seed, std::vector<double>* losses = nullptr) {
        World w = make_world(cfg, seed);
        Vocab v = build_vocab(w);
        const ModelConfig mc = cfg.model_config(v.size(), seed);
        TrainParams hp = cfg.train;
        hp.seed = seed;
        TrainResult r = train(ToyTransformer::init(mc), encode_lines(v, w.corpus_lines), hp, FreezeMask::all(mc));
        if (losses) *losses = r.losses;
        return Lab(cfg, seed, std::move(w), std::move(v), std::move(r.model));
    }

    const ExperimentConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    const World& world() const { return world_; }
    const Vocab& vocab() const { return vocab_; }
    const ToyTransformer& model() const { return model_; }
    const std::vector<LabelledQuery>& queries() const { return queries_; }
    const std::vector<std::size_t>& mastered() const { return mastered_; }
    nlohmann::json provenance() const { return dkn::provenance(cfg_, seed_); }

    /// Mastered facts, evenly thinned to `max_facts` when that is set.
    std::vector<std::size_t> studied() const {
        const std::size_t cap = cfg_.max_facts;
        if (cap == 0 || mastered_.size() <= cap) return mastered_;
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < cap; ++k) out.push_back(mastered_[k * mastered_.size() / cap]);
        return out;
    }

    const Localisation& localise(std::size_t fact) {
        localise_many({fact});
        return cache_.at(fact);
    }

    void localise_many(const std::vector<std::size_t>& facts) {
        std::vector<std::size_t> todo;
        for (std::size_t f : facts) {
            if (!cache_.count(f)) todo.push_back(f);
        }
        auto done = parallel_map(todo.size(), cfg_.jobs, [&](std::size_t i) {
            const auto& q = queries_.at(todo[i]);
            Localisation l = locate_dkns(model_, q.prompt, q.answer, cfg_.locate);
            l.dkn.fact = world_.facts[todo[i]].id();
            return l;
        });
        for (std::size_t i = 0; i < todo.size(); ++i) cache_.emplace(todo[i], std::move(done[i]));
    }

    Localisation localise_query(const LabelledQuery& q, const std::string& id) const {
        Localisation l = locate_dkns(model_, q.prompt, q.answer, cfg_.locate, cfg_.jobs);
        l.dkn.fact = id;
        return l;
    }

    bool has_localisation(std::size_t fact) const { return cache_.count(fact) != 0; }

    /// Installs a localisation read back from disk; the graph is rebuilt
    /// from the model so edge-mode plans work.
    void adopt(std::size_t fact, KnSet kns, DknSet dkn) {
        Localisation l;
        l.kns = std::move(kns);
        if (!l.kns.empty()) l.graph = build_distance_graph(model_, l.kns.neurons);
        l.dkn = std::move(dkn);
        cache_.insert_or_assign(fact, std::move(l));
    }

private:
    ExperimentConfig cfg_;
    std::uint64_t seed_;
    World world_;
    Vocab vocab_;
    ToyTransformer model_;
    std::vector<LabelledQuery> queries_;
    std::vector<std::size_t> mastered_;
    std::map<std::size_t, Localisation> cache_;
};

// ---------------------------------------------------------------------------
// Localisation reports

inline nlohmann::json localisation_json(const Lab& lab, std::size_t fact, const Localisation& l) {
    const auto& r = lab.world().facts[fact];
    return {{"index", fact},
            {"fact", r.id()},
            {"query", r.prompt()},
            {"answer", r.answer},
            {"kns", to_json(l.kns.neurons)},
            {"kn_threshold", l.kns.threshold_used},
            {"dkn", to_json(l.dkn)}};
}

inline nlohmann::json run_locate(Lab& lab, bool dendrograms = false) {
    const auto facts = lab.studied();
    lab.localise_many(facts);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t f : facts) {
        const auto& l = lab.localise(f);
        auto j = localisation_json(lab, f, l);
        if (dendrograms) j["dendrogram"] = dendrogram_json(l.filtration);
        rows.push_back(std::move(j));
    }
    return {{"provenance", lab.provenance()},
            {"stage_hash", lab.config().stage_hash("locate")},
            {"mastered", lab.mastered().size()},
            {"facts", rows}};
}

inline void adopt_locate_report(Lab& lab, const nlohmann::json& report) {
    if (report.at("stage_hash") != lab.config().stage_hash("locate") || report.at("provenance").at("seed") != lab.seed()) {
        throw MissingPrerequisite("DKN file was produced with a different config or seed (rerun `dkn-lab locate`)");
    }
    for (const auto& row : report.at("facts")) {
        KnSet k;
        k.neurons = neuron_set_from_json(row.at("kns"));
        k.threshold_used = row.at("kn_threshold").get<double>();
        lab.adopt(row.at("index").get<std::size_t>(), std::move(k), dkn_from_json(row.at("dkn")));
    }
}

// ---------------------------------------------------------------------------
// Degeneracy (subset sweeps)

struct DegeneracySummary {
    std::size_t facts = 0;      // studied mastered facts
    std::size_t nonempty = 0;   // |D| >= 1
    std::size_t multi = 0;      // |D| >= 2 with both aggregates defined
    std::size_t flagged = 0;
    double mean_partial = 0.0;
    double mean_full = 0.0;
    double inflection_rate = 0.0;

    double multi_rate() const { return facts ? static_cast<double>(multi) / static_cast<double>(facts) : 0.0; }
};

struct DegeneracyReport {
    std::vector<SweepReport> sweeps;
    DegeneracySummary summary;
};

inline DegeneracySummary summarise_degeneracy(const std::vector<SweepReport>& sweeps, std::size_t facts) {
    DegeneracySummary s;
    s.facts = facts;
    std::size_t infl = 0;
    for (const auto& r : sweeps) {
        ++s.nonempty;
        s.flagged += r.flagged ? 1 : 0;
        if (r.cardinality < 2 || !r.partial_mean || !r.full) continue;
        ++s.multi;
        s.mean_partial += *r.partial_mean;
        s.mean_full += *r.full;
        infl += r.inflection() ? 1 : 0;
    }
    if (s.multi) {
        const auto n = static_cast<double>(s.multi);
        s.mean_partial /= n;
        s.mean_full /= n;
        s.inflection_rate = static_cast<double>(infl) / n;
    }
    return s;
}

inline DegeneracyReport run_degeneracy(Lab& lab) {
    const auto facts = lab.studied();
    lab.localise_many(facts);
    const auto mode = SuppressionMode::parse(lab.config().sweep_mode, lab.config().sweep_factor);
    DegeneracyReport out;
    for (std::size_t f : facts) {
        const auto& l = lab.localise(f);
        if (l.dkn.empty()) continue;
        SweepParams p = lab.config().sweep;
        p.seed = substream_seed(lab.seed(), "sweep/" + std::to_string(f));
        const auto& q = lab.queries()[f];
        out.sweeps.push_back(subset_sweep(lab.model(), l.dkn, &l.graph, q.prompt, q.answer, mode, p, lab.config().jobs));
    }
    out.summary = summarise_degeneracy(out.sweeps, facts.size());
    return out;
}

inline nlohmann::json to_json(const DegeneracySummary& s) {
    return {{"facts", s.facts},
            {"nonempty", s.nonempty},
            {"multi", s.multi},
            {"multi_rate", s.multi_rate()},
            {"flagged", s.flagged},
            {"mean_partial", s.mean_partial},
            {"mean_full", s.mean_full},
            {"inflection_rate", s.inflection_rate}};
}

// ---------------------------------------------------------------------------
// Robustness

struct KindMeans {
    double dkn = 0.0, kn = 0.0, rnd = 0.0, none = 0.0;
};

inline nlohmann::json to_json(const KindMeans& k) {
    return {{"DKN", k.dkn}, {"KN", k.kn}, {"Rnd", k.rnd}, {"None", k.none}};
}

struct RobustnessReport {
    std::size_t facts = 0;     // studied facts with a non-empty DKN set
    std::size_t excluded = 0;  // dropped by the exclusion rule
    KindMeans suppress;        // mean ΔProb(Q -> Q*) on the suppressed model
    KindMeans suppress_vs_clean;  // mean ΔProb of Q* against the unsuppressed model
    KindMeans suppress_edges;
    std::size_t errors = 0;    // |Q*_err|
    std::optional<KindMeans> enhance;  // Acc_err
    std::optional<KindMeans> enhance_edges;
    std::vector<PerturbedQuery> perturbed;
    std::vector<std::size_t> perturbed_fact;
    std::vector<HarvestedError> harvest;
};

namespace detail {

struct FactNeurons {
    std::size_t fact;
    NeuronSet dkn, kn;
    std::vector<NeuronSet> rnd;
};

inline std::vector<FactNeurons> fact_neurons(Lab& lab, const std::vector<std::size_t>& facts, std::size_t draws,
                                             const std::string& stream) {
    std::vector<FactNeurons> out;
    for (std::size_t f : facts) {
        const auto& l = lab.localise(f);
        if (l.dkn.empty()) continue;
        FactNeurons n{f, l.dkn.neurons(), l.kns.neurons, {}};
        for (std::size_t d = 0; d < draws; ++d) {
            const auto s = substream_seed(lab.seed(), stream + "/" + std::to_string(f) + "/" + std::to_string(d));
            n.rnd.push_back(baseline_neurons(BaselineKind::random_matched, n.dkn, n.kn, lab.model().config, s));
        }
        out.push_back(std::move(n));
    }
    return out;
}

inline InterventionPlan plan_on(const ToyTransformer& m, const NeuronSet& neurons, const SuppressionMode& mode) {
    if (neurons.empty()) return {};
    if (!mode.on_edges()) return plan_for_neurons(neurons, mode, nullptr).plan;
    const DistanceGraph g = build_distance_graph(m, neurons);
    return plan_for_neurons(neurons, mode, &g).plan;
}

}  // namespace detail

inline RobustnessReport run_robustness(Lab& lab) {
    const auto& cfg = lab.config();
    const auto& m = lab.model();
    const auto facts = lab.studied();
    lab.localise_many(facts);
    RobustnessReport out;

    // One perturbation per fact, keyed by fact index so the draw does not
    // depend on which facts are studied.
    const auto all_perturbed = perturb_all(lab.queries(), lab.seed());
    const auto neurons = detail::fact_neurons(lab, facts, cfg.robustness.random_draws, "robust-rnd");
    out.facts = neurons.size();
    if (neurons.empty()) throw Error("robustness: no studied fact has a DKN set");

    const auto sup = SuppressionMode::parse(cfg.robustness.suppress, 0.0);
    const auto sup_edges = SuppressionMode::null_edges();
    struct Row {
        bool excluded = false;
        KindMeans lit, clean, edges;
    };
    const auto rows = parallel_map(neurons.size(), cfg.jobs, [&](std::size_t i) {
        const auto& fn = neurons[i];
        const auto& q = lab.queries()[fn.fact];
        const Tokens& noisy = all_perturbed[fn.fact].perturbed;
        const double clean_star = predict_prob(m, noisy, q.answer);
        Row row;
        auto measure = [&](const NeuronSet& set, double& lit, double& clean, double& edges) {
            const auto plan = detail::plan_on(m, set, sup);
            const double a = predict_prob(m, q.prompt, q.answer, plan);
            const double b = predict_prob(m, noisy, q.answer, plan);
            lit = delta_prob(a, b);
            clean = delta_prob(clean_star, b);
            const auto eplan = detail::plan_on(m, set, sup_edges);
            edges = delta_prob(predict_prob(m, q.prompt, q.answer, eplan), predict_prob(m, noisy, q.answer, eplan));
            row.excluded = row.excluded || excluded(lit) || excluded(clean) || excluded(edges);
        };
        measure(fn.dkn, row.lit.dkn, row.clean.dkn, row.edges.dkn);
        measure(fn.kn, row.lit.kn, row.clean.kn, row.edges.kn);
        measure({}, row.lit.none, row.clean.none, row.edges.none);
        for (const auto& r : fn.rnd) {
            double a = 0, b = 0, c = 0;
            measure(r, a, b, c);
            const auto n = static_cast<double>(fn.rnd.size());
            row.lit.rnd += a / n;
            row.clean.rnd += b / n;
            row.edges.rnd += c / n;
        }
        return row;
    });
    std::size_t kept = 0;
    auto acc = [](KindMeans& into, const KindMeans& x) {
        into.dkn += x.dkn;
        into.kn += x.kn;
        into.rnd += x.rnd;
        into.none += x.none;
    };
    for (const auto& r : rows) {
        if (r.excluded) {
            ++out.excluded;
            continue;
        }
        ++kept;
        acc(out.suppress, r.lit);
        acc(out.suppress_vs_clean, r.clean);
        acc(out.suppress_edges, r.edges);
    }
    auto scale = [](KindMeans& k, double n) {
        k.dkn /= n;
        k.kn /= n;
        k.rnd /= n;
        k.none /= n;
    };
    if (kept) {
        scale(out.suppress, static_cast<double>(kept));
        scale(out.suppress_vs_clean, static_cast<double>(kept));
        scale(out.suppress_edges, static_cast<double>(kept));
    }

    // Q*_err over the facts that have DKNs.
    std::vector<LabelledQuery> pool;
    for (const auto& fn : neurons) pool.push_back(lab.queries()[fn.fact]);
    for (const auto& fn : neurons) {
        out.perturbed.push_back(all_perturbed[fn.fact]);
        out.perturbed_fact.push_back(fn.fact);
    }
    std::vector<std::size_t> err_idx;
    const auto wrong = parallel_map(neurons.size(), cfg.jobs, [&](std::size_t i) {
        const auto& q = pool[i];
        return predict_top1(m, q.prompt) == q.answer && predict_top1(m, out.perturbed[i].perturbed) != q.answer ? 1 : 0;
    });
    for (std::size_t i = 0; i < wrong.size(); ++i) {
        if (!wrong[i]) continue;
        err_idx.push_back(i);
        out.harvest.push_back({neurons[i].fact, out.perturbed[i], pool[i].answer});
    }
    out.errors = err_idx.size();
    if (err_idx.empty()) return out;

    const auto enh = SuppressionMode::parse(cfg.robustness.enhance, cfg.robustness.enhance_factor);
    const auto enh_edges = SuppressionMode::scale_edges(cfg.robustness.enhance_factor);
    auto correct = [&](const NeuronSet& set, const SuppressionMode& mode, std::size_t i) {
        const auto plan = detail::plan_on(m, set, mode);
        return predict_top1(m, out.perturbed[i].perturbed, plan) == pool[i].answer ? 1.0 : 0.0;
    };
    auto enhance_with = [&](const SuppressionMode& mode) {
        const auto per = parallel_map(err_idx.size(), cfg.jobs, [&](std::size_t k) {
            const std::size_t i = err_idx[k];
            const auto& fn = neurons[i];
            KindMeans r;
            r.dkn = correct(fn.dkn, mode, i);
            r.kn = correct(fn.kn, mode, i);
            r.none = correct({}, mode, i);
            for (const auto& s : fn.rnd) r.rnd += correct(s, mode, i) / static_cast<double>(fn.rnd.size());
            return r;
        });
        KindMeans total;
        for (const auto& r : per) acc(total, r);
        scale(total, static_cast<double>(per.size()));
        return total;
    };
    out.enhance = enhance_with(enh);
    out.enhance_edges = enhance_with(enh_edges);
    return out;
}

inline nlohmann::json to_json(const RobustnessReport& r) {
    nlohmann::json j{{"facts", r.facts},
                     {"excluded", r.excluded},
                     {"suppress_delta_prob", to_json(r.suppress)},
                     {"suppress_delta_prob_vs_clean", to_json(r.suppress_vs_clean)},
                     {"suppress_edges_delta_prob", to_json(r.suppress_edges)},
                     {"q_err", r.errors}};
    j["enhance_acc_err"] = r.enhance ? to_json(*r.enhance) : nlohmann::json(nullptr);
    j["enhance_edges_acc_err"] = r.enhance_edges ? to_json(*r.enhance_edges) : nlohmann::json(nullptr);
    return j;
}

// ---------------------------------------------------------------------------
// Fact checking

struct RelationCheck {
    std::string relation;
    std::string status = "ok";
    std::size_t q1 = 0, q2 = 0;
    RelationDkn dkn;
    double tau4_relation = 0.0, tau4_golden = 0.0;
    std::vector<FactLabel> relation_labels, golden_labels;
};

struct FactcheckReport {
    std::vector<RelationCheck> relations;
    std::optional<Prf> relation;  // micro-averaged over relations that ran
    std::optional<Prf> golden;
};

namespace detail {

struct Scored {
    CheckRecord record;
    std::size_t fact = 0;
    AttributionResult attr;
};

inline std::vector<Scored> score_records(const Lab& lab, const std::vector<CheckRecord>& recs,
                                         const std::vector<std::size_t>& facts) {
    const auto& cfg = lab.config();
    auto attrs = parallel_map(recs.size(), cfg.jobs, [&](std::size_t i) {
        return attribute_all(lab.model(), recs[i].prompt, recs[i].candidate, cfg.locate.steps);
    });
    std::vector<Scored> out;
    for (std::size_t i = 0; i < recs.size(); ++i) out.push_back({recs[i], facts[i], std::move(attrs[i])});
    return out;
}

}  // namespace detail

inline FactcheckReport run_factcheck(Lab& lab) {
    const auto& cfg = lab.config();
    const auto studied = lab.studied();
    lab.localise_many(studied);
    std::map<std::string, std::vector<std::size_t>> by_rel;
    std::map<std::string, std::vector<int>> answers;
    for (std::size_t i = 0; i < lab.world().facts.size(); ++i) {
        answers[lab.world().facts[i].relation].push_back(lab.queries()[i].answer);
    }
    for (std::size_t f : studied) {
        if (!lab.localise(f).dkn.empty()) by_rel[lab.world().facts[f].relation].push_back(f);
    }

    FactcheckReport out;
    std::vector<FactLabel> all_rel, all_gold;
    for (const auto& [rel, facts] : by_rel) {
        RelationCheck rc;
        rc.relation = rel;
        if (facts.size() < 4) {
            rc.status = "too-few-queries";
            out.relations.push_back(std::move(rc));
            continue;
        }
        const auto [q1, q2] = split_relation(facts, cfg.factcheck.split_ratio, lab.seed(), rel);
        rc.q1 = q1.size();
        rc.q2 = q2.size();
        std::vector<NeuronSet> per;
        for (std::size_t f : q1) per.push_back(lab.localise(f).dkn.neurons());
        rc.dkn = aggregate_relation(per, cfg.factcheck.tau3_factor, rel);

        auto records = [&](const std::vector<std::size_t>& fs, const std::string& tag) {
            std::vector<CheckRecord> truths;
            for (std::size_t f : fs) {
                truths.push_back({lab.world().facts[f].id(), lab.queries()[f].prompt, lab.queries()[f].answer,
                                  lab.queries()[f].answer, true});
            }
            auto recs = corrupt_answers(truths, answers.at(rel), lab.seed(), tag);
            std::vector<std::size_t> owner;
            for (std::size_t f : fs) owner.insert(owner.end(), {f, f});
            return detail::score_records(lab, recs, owner);
        };
        const auto calib = records(q1, rel + "/calibration");
        const auto test = records(q2, rel);

        auto golden_score = [&](const detail::Scored& s) { return mean_score(s.attr, lab.localise(s.fact).dkn.neurons()); };
        auto calibrate = [&](auto&& score) {
            std::vector<double> xs;
            std::vector<bool> gold;
            for (const auto& s : calib) {
                xs.push_back(score(s));
                gold.push_back(s.record.gold);
            }
            return calibrate_tau4(xs, gold, cfg.factcheck.tau4_candidates).tau4;
        };
        rc.tau4_golden = calibrate(golden_score);
        for (const auto& s : test) rc.golden_labels.push_back(label_from_score(s.record, golden_score(s), rc.tau4_golden));
        all_gold.insert(all_gold.end(), rc.golden_labels.begin(), rc.golden_labels.end());

        if (rc.dkn.empty()) {
            rc.status = "empty-relation-dkn";
            out.relations.push_back(std::move(rc));
            continue;
        }
        auto rel_score = [&](const detail::Scored& s) { return mean_score(s.attr, rc.dkn.neurons); };
        rc.tau4_relation = calibrate(rel_score);
        for (const auto& s : test) rc.relation_labels.push_back(label_from_score(s.record, rel_score(s), rc.tau4_relation));
        all_rel.insert(all_rel.end(), rc.relation_labels.begin(), rc.relation_labels.end());
        out.relations.push_back(std::move(rc));
    }
    if (!all_rel.empty()) out.relation = evaluate_prf(all_rel);
    if (!all_gold.empty()) out.golden = evaluate_prf(all_gold);
    return out;
}

inline nlohmann::json to_json(const FactcheckReport& r) {
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& rc : r.relations) {
        nlohmann::json j{{"relation", rc.relation}, {"status", rc.status}, {"q1", rc.q1}, {"q2", rc.q2}};
        if (rc.q1) {
            j["dkn_size"] = rc.dkn.neurons.size();
            j["n_total"] = rc.dkn.n_total;
            j["tau3"] = rc.dkn.tau3;
            std::size_t top = 0;
            for (const auto& [n, c] : rc.dkn.counts) top = std::max(top, c);
            j["max_count"] = top;
            j["tau4_relation"] = rc.tau4_relation;
            j["tau4_golden"] = rc.tau4_golden;
            if (!rc.relation_labels.empty()) j["relation"] = to_json(evaluate_prf(rc.relation_labels));
            if (!rc.golden_labels.empty()) j["golden"] = to_json(evaluate_prf(rc.golden_labels));
        }
        rels.push_back(std::move(j));
    }
    return {{"relations", rels},
            {"relation", r.relation ? to_json(*r.relation) : nlohmann::json(nullptr)},
            {"golden", r.golden ? to_json(*r.golden) : nlohmann::json(nullptr)}};
}

// ---------------------------------------------------------------------------
// Evolvability

struct EvolutionReport {
    std::size_t dkn_size = 0, kn_size = 0, changed = 0;
    double tau_dn = 0.0;
    double overlap_dkn = 0.0, overlap_kn = 0.0, overlap_rnd = 0.0;  // rnd averaged over draws
    AccuracyTriple before;
    std::map<std::string, AccuracyTriple> grid;  // mask kind -> accuracies
};

inline EvolveDatasets evolve_datasets(const Lab& lab) {
    const auto& w = lab.world();
    if (w.q_new.empty()) throw MissingPrerequisite("evolve: dataset has no Q_new records (q_new.jsonl)");
    if (w.q_au.size() != w.q_new.size()) throw Error("evolve: Q_au must pair one-to-one with Q_new");
    EvolveDatasets d;
    std::set<Tokens> fresh;
    for (const auto& r : w.q_new) {
        d.q_new.push_back(labelled(lab.vocab(), r));
        d.train.push_back(lab.vocab().encode(World::line(r)));
        fresh.insert(d.q_new.back().prompt);
    }
    for (const auto& r : w.q_au) d.q_au.push_back(labelled(lab.vocab(), r));
    for (std::size_t f : lab.mastered()) {
        if (!fresh.count(lab.queries()[f].prompt)) d.q_old.push_back(lab.queries()[f]);
    }
    if (d.q_old.empty()) throw Error("evolve: no mastered facts outside Q_new");
    return d;
}

inline EvolutionReport run_evolution(Lab& lab) {
    const auto& cfg = lab.config();
    const auto& m = lab.model();
    const EvolveDatasets d = evolve_datasets(lab);

    NeuronSet dkn, kn;
    for (std::size_t i = 0; i < d.q_new.size(); ++i) {
        const auto l = lab.localise_query(d.q_new[i], lab.world().q_new[i].id());
        const auto n = l.dkn.neurons();
        dkn.insert(dkn.end(), n.begin(), n.end());
        kn.insert(kn.end(), l.kns.neurons.begin(), l.kns.neurons.end());
    }
    normalize_set(dkn);
    normalize_set(kn);
    if (dkn.empty()) throw Error("evolve: Q_new has no DKNs");

    EvolutionReport out;
    out.dkn_size = dkn.size();
    out.kn_size = kn.size();
    out.before = evaluate_triple(m, d, cfg.jobs);

    TrainParams hp = cfg.evolve.finetune;
    hp.seed = substream_seed(lab.seed(), "finetune");
    std::vector<NeuronSet> rnd;
    for (std::size_t k = 0; k < cfg.evolve.random_draws; ++k) {
        rnd.push_back(baseline_neurons(BaselineKind::random_matched, dkn, kn, m.config,
                                       substream_seed(lab.seed(), "evolve-rnd/" + std::to_string(k))));
    }

    const auto all = freeze_finetune_eval(m, MaskKind::all, {}, d, hp, cfg.jobs);
    out.grid["All"] = all.acc;
    const ChangedSet changed = changed_set(param_delta(m, all.model), cfg.delta_factor());
    out.changed = changed.neurons.size();
    out.tau_dn = changed.tau;
    out.overlap_dkn = overlap(dkn, changed.neurons);
    out.overlap_kn = overlap(kn, changed.neurons);
    for (const auto& r : rnd) out.overlap_rnd += overlap(r, changed.neurons) / static_cast<double>(rnd.size());

    out.grid["DKN"] = freeze_finetune_eval(m, MaskKind::dkn, dkn, d, hp, cfg.jobs).acc;
    out.grid["KN"] = freeze_finetune_eval(m, MaskKind::kn, kn, d, hp, cfg.jobs).acc;
    out.grid["Rnd"] = freeze_finetune_eval(m, MaskKind::random_matched, rnd.front(), d, hp, cfg.jobs).acc;
    return out;
}

inline nlohmann::json to_json(const EvolutionReport& r) {
    nlohmann::json grid;
    for (const auto& [k, v] : r.grid) grid[k] = to_json(v);
    return {{"dkn_size", r.dkn_size},
            {"kn_size", r.kn_size},
            {"changed", r.changed},
            {"tau_dN", r.tau_dn},
            {"overlap", {{"DKN", r.overlap_dkn}, {"KN", r.overlap_kn}, {"Rnd", r.overlap_rnd}}},
            {"before", to_json(r.before)},
            {"grid", grid}};
}

inline std::string overlap_csv(const EvolutionReport& r) {
    std::ostringstream out;
    out.precision(10);
    out << "set,size,overlap\n";
    out << "DKN," << r.dkn_size << ',' << r.overlap_dkn << '\n';
    out << "KN," << r.kn_size << ',' << r.overlap_kn << '\n';
    out << "Rnd," << r.dkn_size << ',' << r.overlap_rnd << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Size comparison

struct SizeRow {
    std::string size;
    std::string experiment;
    std::size_t parameters = 0;
    nlohmann::json metrics;
};

inline std::vector<SizeRow> compare_sizes(const ExperimentConfig& base) {
    std::vector<SizeRow> rows;
    for (ModelSize size : {ModelSize::small, ModelSize::large}) {
        ExperimentConfig c = base;
        c.model = size;
        Lab lab = Lab::train_new(c, c.seeds.front());
        const std::size_t params = lab.model().config.parameter_count();
        const std::string name = to_string(size);
        const auto deg = run_degeneracy(lab);
        rows.push_back({name, "degeneracy", params, to_json(deg.summary)});
        rows.push_back({name, "robustness", params, to_json(run_robustness(lab))});
        rows.push_back({name, "factcheck", params, to_json(run_factcheck(lab))});
        rows.push_back({name, "evolve", params, to_json(run_evolution(lab))});
    }
    return rows;
}

inline nlohmann::json to_json(const SizeRow& r) {
    return {{"size", r.size}, {"experiment", r.experiment}, {"parameters", r.parameters}, {"metrics", r.metrics}};
}

}  // namespace dkn
