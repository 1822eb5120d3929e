#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/attribution.hpp"

namespace dkn {

inline constexpr double kDefaultTau3Factor = 0.7;

/// Seeded partition of `items` into (first, second) with round(ratio * n)
/// items in the first part.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_relation(const std::vector<T>& items, double ratio,
                                                         std::uint64_t seed, const std::string& relation = "") {
    if (items.size() < 4) throw Error("split: relation " + relation + " has fewer than 4 queries");
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, "split/" + relation);
    shuffle(order, rng);
    const auto cut = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(items.size())));
    std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<long>(cut));
    std::vector<std::size_t> b(order.begin() + static_cast<long>(cut), order.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::pair<std::vector<T>, std::vector<T>> out;
    for (std::size_t i : a) out.first.push_back(items[i]);
    for (std::size_t i : b) out.second.push_back(items[i]);
    return out;
}

struct RelationDkn {
    std::string relation;
    NeuronSet neurons;
    std::map<NeuronId, std::size_t> counts;
    std::size_t n_total = 0;  // distinct neurons across the per-query sets
    double tau3 = 0.0;

    bool empty() const { return neurons.empty(); }
};

/// Keeps the neurons that occur in more than tau3_factor * N_total of the
/// per-query sets, N_total being the size of their union.
inline RelationDkn aggregate_relation(const std::vector<NeuronSet>& per_query, double tau3_factor,
                                      const std::string& relation = "") {
    if (!(tau3_factor >= 0.0)) throw ConfigError("tau3 factor must be >= 0");
    RelationDkn r;
    r.relation = relation;
    bool any = false;
    for (const auto& s : per_query) {
        NeuronSet u = s;
        normalize_set(u);
        any = any || !u.empty();
        for (const auto& n : u) ++r.counts[n];
    }
    if (!any) throw Error("aggregate: relation " + relation + " has no non-empty DKN set");
    r.n_total = r.counts.size();
    r.tau3 = tau3_factor * static_cast<double>(r.n_total);
    for (const auto& [n, c] : r.counts) {
        if (static_cast<double>(c) > r.tau3) r.neurons.push_back(n);
    }
    return r;
}

struct CheckRecord {
    std::string fact;
    Tokens prompt;
    int candidate = 0;
    int gold_answer = 0;
    bool gold = true;  // candidate is the true answer
};

/// Pairs every query with its true answer and with a uniformly drawn wrong
/// answer from `pool`.
inline std::vector<CheckRecord> corrupt_answers(const std::vector<CheckRecord>& truths, const std::vector<int>& pool,
                                                std::uint64_t seed, const std::string& relation = "") {
    std::vector<int> answers = pool;
    std::sort(answers.begin(), answers.end());
    answers.erase(std::unique(answers.begin(), answers.end()), answers.end());
    if (answers.size() < 2) throw Error("corrupt: relation " + relation + " has a single answer");
    Rng rng = make_rng(seed, "corrupt/" + relation);
    std::vector<CheckRecord> out;
    for (const auto& t : truths) {
        std::vector<int> wrong;
        for (int a : answers) {
            if (a != t.gold_answer) wrong.push_back(a);
        }
        CheckRecord yes = t;
        yes.candidate = t.gold_answer;
        yes.gold = true;
        CheckRecord no = t;
        no.candidate = wrong[uniform_index(rng, wrong.size())];
        no.gold = false;
        out.push_back(yes);
        out.push_back(no);
    }
    return out;
}

struct FactLabel {
    std::string fact;
    int candidate = 0;
    bool gold = false;
    bool predicted = false;
    double score = 0.0;
};

inline FactLabel label_from_score(const CheckRecord& r, double score, double tau4) {
    return {r.fact, r.candidate, r.gold, score > tau4, score};
}

inline FactLabel fact_check(const ToyTransformer& m, const CheckRecord& r, const NeuronSet& neurons, double tau4,
                            std::size_t steps = kDefaultIgSteps) {
    if (neurons.empty()) throw Error("fact_check: empty relation DKN set");
    return label_from_score(r, score_for_factcheck(m, r.prompt, r.candidate, neurons, steps), tau4);
}

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool zero_division = false;
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Prf evaluate_prf(const std::vector<FactLabel>& labels) {
    if (labels.empty()) throw Error("evaluate_prf: no labels");
    Prf r;
    for (const auto& l : labels) {
        if (l.predicted && l.gold) ++r.tp;
        else if (l.predicted) ++r.fp;
        else if (l.gold) ++r.fn;
        else ++r.tn;
    }
    const auto div = [&](double a, double b) {
        if (b == 0.0) {
            r.zero_division = true;
            return 0.0;
        }
        return a / b;
    };
    r.precision = div(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fp));
    r.recall = div(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fn));
    r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

struct Calibration {
    double tau4 = 0.0;
    double f1 = 0.0;
    bool degenerate = false;
};

/// Sweeps `candidates` evenly spaced thresholds over the observed score range
/// and keeps the one with the best F1 (smallest on ties).
inline Calibration calibrate_tau4(const std::vector<double>& scores, const std::vector<bool>& gold,
                                  std::size_t candidates = 101) {
    if (scores.empty() || scores.size() != gold.size()) throw Error("calibrate: score/label size mismatch");
    if (candidates < 2) throw ConfigError("calibrate: need at least 2 candidates");
    const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *lo_it, hi = *hi_it;
    auto f1_at = [&](double tau) {
        std::vector<FactLabel> labels;
        for (std::size_t i = 0; i < scores.size(); ++i) labels.push_back({"", 0, gold[i], scores[i] > tau, scores[i]});
        return evaluate_prf(labels).f1;
    };
    Calibration best;
    if (hi == lo) {
        best.tau4 = lo;
        best.f1 = f1_at(lo);
        best.degenerate = true;
        return best;
    }
    best.f1 = -1.0;
    for (std::size_t c = 0; c < candidates; ++c) {
        const double tau = lo + (hi - lo) * static_cast<double>(c) / static_cast<double>(candidates - 1);
        const double f = f1_at(tau);
        if (f > best.f1) {
            best.f1 = f;
            best.tau4 = tau;
        }
    }
    return best;
}

inline nlohmann::json to_json(const Prf& p) {
    return {{"P", p.precision}, {"R", p.recall}, {"F1", p.f1}, {"zero_division", p.zero_division}};
}

}  // namespace dkn
