#pragma once

#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/topology.hpp"

namespace dkn {

inline constexpr double kExclusionLimit = 900.0;

/// Percentage drop from `before` to `after`; negative when the probability rose.
inline double delta_prob(double before, double after) {
    if (!(before > 0.0)) throw NumericError("delta_prob: reference probability must be positive");
    return 100.0 * (before - after) / before;
}

/// A change this large in either direction means the fact was never held;
/// such rows are dropped.
inline bool excluded(double delta) { return std::abs(delta) > kExclusionLimit; }

struct SuppressionMode {
    enum class Kind { zero_values, null_edges, scale_values, scale_edges };
    Kind kind = Kind::zero_values;
    double factor = 0.0;

    static SuppressionMode zero_values() { return {Kind::zero_values, 0.0}; }
    static SuppressionMode null_edges() { return {Kind::null_edges, 0.0}; }
    static SuppressionMode scale_values(double f) { return {Kind::scale_values, f}; }
    static SuppressionMode scale_edges(double f) { return {Kind::scale_edges, f}; }

    bool on_edges() const { return kind == Kind::null_edges || kind == Kind::scale_edges; }

    void validate() const {
        if (!std::isfinite(factor) || factor < 0.0) throw ConfigError("suppression factor must be finite and >= 0");
    }

    std::string name() const {
        switch (kind) {
            case Kind::zero_values: return "zero-values";
            case Kind::null_edges: return "null-edges";
            case Kind::scale_values: return "scale-values";
            case Kind::scale_edges: return "scale-edges";
        }
        return "?";
    }

    static SuppressionMode parse(const std::string& s, double factor = 2.0) {
        if (s == "zero-values") return zero_values();
        if (s == "null-edges") return null_edges();
        if (s == "scale-values") return scale_values(factor);
        if (s == "scale-edges") return scale_edges(factor);
        throw ConfigError("unknown suppression mode '" + s + "'");
    }
};

struct PlanBuild {
    InterventionPlan plan;
    bool warning = false;  // edge mode found no adjacent-layer pair
};

/// Plan over a neuron set. Edge modes touch every adjacent-layer pair inside
/// the set whose graph distance is finite.
inline PlanBuild plan_for_neurons(const NeuronSet& neurons, const SuppressionMode& mode,
                                  const DistanceGraph* graph) {
    mode.validate();
    PlanBuild out;
    if (neurons.empty()) return out;
    if (!mode.on_edges()) {
        const ValueEdit e = mode.kind == SuppressionMode::Kind::zero_values ? ValueEdit::zero()
                                                                             : ValueEdit::scale(mode.factor);
        for (const auto& n : neurons) out.plan.set_value(n, e);
        return out;
    }
    if (!graph) throw Error("edge suppression needs the distance graph");
    const double gain = mode.kind == SuppressionMode::Kind::null_edges ? 0.0 : mode.factor;
    std::vector<std::size_t> idx;
    for (const auto& n : neurons) {
        const auto it = std::lower_bound(graph->neurons.begin(), graph->neurons.end(), n);
        if (it == graph->neurons.end() || *it != n) throw Error("neuron " + to_string(n) + " not in the distance graph");
        idx.push_back(static_cast<std::size_t>(it - graph->neurons.begin()));
    }
    for (std::size_t a = 0; a < idx.size(); ++a) {
        for (std::size_t b = a + 1; b < idx.size(); ++b) {
            if (graph->provenance(idx[a], idx[b]) == Adjacency::adjacent_layer) {
                out.plan.set_edge(neurons[a], neurons[b], gain);
            }
        }
    }
    out.warning = out.plan.empty();
    return out;
}

inline NeuronSet union_members(const std::vector<Bdc>& bdcs) {
    NeuronSet out;
    for (const auto& b : bdcs) out.insert(out.end(), b.members.begin(), b.members.end());
    normalize_set(out);
    return out;
}

inline PlanBuild plan_for_bdcs(const std::vector<Bdc>& bdcs, const SuppressionMode& mode,
                               const DistanceGraph* graph) {
    return plan_for_neurons(union_members(bdcs), mode, graph);
}

// ---------------------------------------------------------------------------
// Subset sweep

struct SweepRow {
    std::vector<std::size_t> subset;  // BDC indices, ascending
    double delta = 0.0;
    bool excluded = false;
    bool warning = false;

    std::string bitmask(std::size_t s) const {
        std::string m(s, '0');
        for (std::size_t i : subset) m[s - 1 - i] = '1';
        return m;
    }
};

struct SweepReport {
    std::string fact;
    std::string mode;
    std::size_t cardinality = 0;
    bool sampled = false;
    bool flagged = false;  // some row hit the exclusion rule
    double prob_before = 0.0;
    std::vector<SweepRow> rows;
    std::optional<double> partial_mean;  // uniform mean over 1..s-1 sized subsets
    std::optional<double> full;          // all BDCs suppressed
    std::vector<std::optional<double>> size_means;  // index k: mean over size-k subsets; [0] = 0

    /// True when the final step of the size curve is its largest increment.
    bool inflection() const {
        if (size_means.size() < 3) return false;
        std::vector<double> ys;
        for (const auto& m : size_means) {
            if (!m) return false;
            ys.push_back(*m);
        }
        const double last = ys.back() - ys[ys.size() - 2];
        for (std::size_t k = 1; k + 1 < ys.size(); ++k) {
            if (!(last > ys[k] - ys[k - 1])) return false;
        }
        return true;
    }
};

struct SweepParams {
    std::size_t exhaustive_limit = 12;
    std::size_t random_subsets = 256;
    std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> sweep_subsets(std::size_t s, const SweepParams& p, bool& sampled) {
    std::vector<std::vector<std::size_t>> out;
    sampled = s > p.exhaustive_limit;
    if (!sampled) {
        for (std::uint64_t mask = 1; mask < (std::uint64_t{1} << s); ++mask) {
            std::vector<std::size_t> sub;
            for (std::size_t i = 0; i < s; ++i) {
                if (mask >> i & 1U) sub.push_back(i);
            }
            out.push_back(std::move(sub));
        }
        return out;
    }
    std::set<std::vector<std::size_t>> seen;
    auto add = [&](std::vector<std::size_t> sub) {
        if (seen.insert(sub).second) out.push_back(std::move(sub));
    };
    for (std::size_t i = 0; i < s; ++i) add({i});
    for (std::size_t i = 0; i < s; ++i) {
        std::vector<std::size_t> sub;
        for (std::size_t j = 0; j < s; ++j) {
            if (j != i) sub.push_back(j);
        }
        add(sub);
    }
    std::vector<std::size_t> all(s);
    std::iota(all.begin(), all.end(), std::size_t{0});
    add(all);
    Rng rng = make_rng(p.seed, "sweep-subsets");
    for (std::size_t r = 0; r < p.random_subsets; ++r) {
        std::vector<std::size_t> sub;
        while (sub.empty()) {
            for (std::size_t i = 0; i < s; ++i) {
                if (rng() & 1U) sub.push_back(i);
            }
        }
        add(sub);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return std::make_pair(a.size(), a) < std::make_pair(b.size(), b);
    });
    return out;
}

}  // namespace detail

/// Summary numbers over the non-excluded rows.
inline void summarise(SweepReport& r) {
    const std::size_t s = r.cardinality;
    std::vector<double> sum(s + 1, 0.0);
    std::vector<std::size_t> count(s + 1, 0);
    double partial = 0.0;
    std::size_t n_partial = 0;
    r.full.reset();
    for (const auto& row : r.rows) {
        if (row.excluded) continue;
        const std::size_t k = row.subset.size();
        sum[k] += row.delta;
        ++count[k];
        if (k < s) {
            partial += row.delta;
            ++n_partial;
        } else {
            r.full = row.delta;
        }
    }
    r.partial_mean.reset();
    if (n_partial > 0) r.partial_mean = partial / static_cast<double>(n_partial);
    r.size_means.assign(s + 1, std::nullopt);
    r.size_means[0] = 0.0;
    for (std::size_t k = 1; k <= s; ++k) {
        if (count[k] > 0) r.size_means[k] = sum[k] / static_cast<double>(count[k]);
    }
}

inline SweepReport subset_sweep(const ToyTransformer& m, const DknSet& dkn, const DistanceGraph* graph,
                                const Tokens& query, int answer, const SuppressionMode& mode,
                                const SweepParams& p = {}, std::size_t jobs = 1) {
    if (dkn.bdcs.empty()) throw Error("subset sweep: empty DKN set");
    SweepReport r;
    r.fact = dkn.fact;
    r.mode = mode.name();
    r.cardinality = dkn.bdcs.size();
    r.prob_before = predict_prob(m, query, answer);
    const auto subsets = detail::sweep_subsets(r.cardinality, p, r.sampled);
    r.rows = parallel_map(subsets.size(), jobs, [&](std::size_t i) {
        std::vector<Bdc> chosen;
        for (std::size_t b : subsets[i]) chosen.push_back(dkn.bdcs[b]);
        const PlanBuild pb = plan_for_bdcs(chosen, mode, graph);
        SweepRow row;
        row.subset = subsets[i];
        row.warning = pb.warning;
        row.delta = delta_prob(r.prob_before, predict_prob(m, query, answer, pb.plan));
        row.excluded = excluded(row.delta);
        return row;
    });
    for (const auto& row : r.rows) r.flagged = r.flagged || row.excluded;
    summarise(r);
    return r;
}

inline std::string to_csv(const SweepReport& r) {
    std::ostringstream out;
    out << "fact,mode,subset,size,delta_prob,excluded\n";
    out.precision(10);
    for (const auto& row : r.rows) {
        out << '"' << r.fact << "\"," << r.mode << ',' << row.bitmask(r.cardinality) << ',' << row.subset.size()
            << ',' << row.delta << ',' << (row.excluded ? 1 : 0) << '\n';
    }
    return out.str();
}

inline nlohmann::json opt_json(const std::optional<double>& x) {
    return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const SweepReport& r, bool figure_data = false) {
    nlohmann::json j{{"fact", r.fact},
                     {"mode", r.mode},
                     {"cardinality", r.cardinality},
                     {"sampled", r.sampled},
                     {"flagged", r.flagged},
                     {"prob_before", r.prob_before},
                     {"partial_mean", opt_json(r.partial_mean)},
                     {"full", opt_json(r.full)},
                     {"inflection", r.inflection()}};
    if (figure_data) {
        nlohmann::json series = nlohmann::json::array();
        for (std::size_t k = 0; k < r.size_means.size(); ++k) {
            series.push_back({{"suppressed", k}, {"delta_prob", opt_json(r.size_means[k])}});
        }
        j["series"] = series;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Baselines and enhancement

enum class BaselineKind { kns, random_matched, none };

/// Neurons for a comparison run. `random_matched` draws as many neurons as
/// `dkn` holds, uniformly without replacement and avoiding `dkn`.
inline NeuronSet baseline_neurons(BaselineKind kind, const NeuronSet& dkn, const NeuronSet& kns,
                                  const ModelConfig& cfg, std::uint64_t seed) {
    switch (kind) {
        case BaselineKind::none: return {};
        case BaselineKind::kns: return kns;
        case BaselineKind::random_matched: {
            std::vector<NeuronId> pool;
            for (std::size_t i = 0; i < cfg.neuron_count(); ++i) {
                const NeuronId n = cfg.neuron_at(i);
                if (!contains(dkn, n)) pool.push_back(n);
            }
            if (pool.size() < dkn.size()) throw Error("random baseline: not enough neurons outside the DKN set");
            Rng rng = make_rng(seed, "random-baseline");
            // Partial Fisher-Yates.
            for (std::size_t i = 0; i < dkn.size(); ++i) {
                std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
            }
            NeuronSet out(pool.begin(), pool.begin() + static_cast<long>(dkn.size()));
            normalize_set(out);
            return out;
        }
    }
    return {};
}

struct LabelledQuery {
    Tokens prompt;
    int answer = 0;
};

/// Fraction of `err_queries` answered correctly (greedy) under `plan`.
inline double accuracy_under(const ToyTransformer& m, const std::vector<LabelledQuery>& queries,
                             const InterventionPlan& plan, std::size_t jobs = 1) {
    if (queries.empty()) throw Error("accuracy over an empty query set");
    const auto hits = parallel_map(queries.size(), jobs, [&](std::size_t i) {
        return predict_top1(m, queries[i].prompt, plan) == queries[i].answer ? 1 : 0;
    });
    return static_cast<double>(std::accumulate(hits.begin(), hits.end(), 0)) / static_cast<double>(queries.size());
}

inline double enhance_eval(const ToyTransformer& m, const NeuronSet& neurons,
                           const std::vector<LabelledQuery>& err_queries, const SuppressionMode& mode,
                           const DistanceGraph* graph = nullptr, std::size_t jobs = 1) {
    if (err_queries.empty()) throw Error("enhance_eval: nothing to enhance");
    return accuracy_under(m, err_queries, plan_for_neurons(neurons, mode, graph).plan, jobs);
}

}  // namespace dkn
