#pragma once

#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/attribution.hpp"
#include "dkn/model.hpp"

namespace dkn {

// ---------------------------------------------------------------------------
// Distance graph

enum class Adjacency { self, adjacent_layer, multi_layer_path, same_layer, disconnected };

inline const char* to_string(Adjacency a) {
    switch (a) {
        case Adjacency::self: return "self";
        case Adjacency::adjacent_layer: return "adjacent-layer";
        case Adjacency::multi_layer_path: return "multi-layer-path";
        case Adjacency::same_layer: return "same-layer";
        case Adjacency::disconnected: return "disconnected";
    }
    return "?";
}

struct DistanceGraph {
    NeuronSet neurons;  // sorted
    std::vector<double> dist;
    std::vector<Adjacency> tag;

    std::size_t size() const { return neurons.size(); }
    double d(std::size_t i, std::size_t j) const { return dist[i * size() + j]; }
    Adjacency provenance(std::size_t i, std::size_t j) const { return tag[i * size() + j]; }

    static DistanceGraph empty(NeuronSet neurons) {
        DistanceGraph g;
        g.neurons = std::move(neurons);
        const std::size_t k = g.size();
        g.dist.assign(k * k, kInf);
        g.tag.assign(k * k, Adjacency::disconnected);
        for (std::size_t i = 0; i < k; ++i) {
            g.dist[i * k + i] = 0.0;
            g.tag[i * k + i] = Adjacency::self;
        }
        return g;
    }

    void set(std::size_t i, std::size_t j, double d, Adjacency a) {
        dist[i * size() + j] = dist[j * size() + i] = d;
        tag[i * size() + j] = tag[j * size() + i] = a;
    }
};

/// Builds the distance graph from a connection-weight function on sorted
/// neurons. Adjacent layers: |1/w| (infinite for w = 0). Further apart: the
/// shortest path that climbs one layer at a time through listed neurons.
template <class WeightFn>
DistanceGraph distance_graph_from(NeuronSet neurons, WeightFn&& weight) {
    normalize_set(neurons);
    DistanceGraph g = DistanceGraph::empty(std::move(neurons));
    const std::size_t k = g.size();
    const auto& ns = g.neurons;
    std::vector<double> adj(k * k, kInf);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            if (ns[i].layer == ns[j].layer) {
                g.set(i, j, kInf, Adjacency::same_layer);
            } else if (ns[j].layer == ns[i].layer + 1) {
                const double w = weight(ns[i], ns[j]);
                const double d = w != 0.0 ? std::abs(1.0 / w) : kInf;
                adj[i * k + j] = d;
                g.set(i, j, d, std::isfinite(d) ? Adjacency::adjacent_layer : Adjacency::disconnected);
            }
        }
    }
    // Sorted order is layer order, so each source's distances to layer l+1
    // only depend on finished distances to layer l.
    for (std::size_t s = 0; s < k; ++s) {
        std::vector<double> best(k, kInf);
        best[s] = 0.0;
        for (std::size_t j = s + 1; j < k; ++j) {
            if (ns[j].layer <= ns[s].layer + 1) {
                if (ns[j].layer == ns[s].layer + 1) best[j] = adj[s * k + j];
                continue;
            }
            for (std::size_t m = s + 1; m < j; ++m) {
                if (ns[m].layer + 1 == ns[j].layer && std::isfinite(best[m])) {
                    best[j] = std::min(best[j], best[m] + adj[m * k + j]);
                }
            }
            g.set(s, j, best[j], std::isfinite(best[j]) ? Adjacency::multi_layer_path : Adjacency::disconnected);
        }
    }
    return g;
}

template <class Weights>
DistanceGraph build_distance_graph(const Weights& w, const NeuronSet& kns) {
    if (kns.empty()) throw Error("distance graph: empty neuron set");
    return distance_graph_from(kns, [&](const NeuronId& a, const NeuronId& b) { return connection_weight(w, a, b); });
}

/// Same graph from an explicit square distance matrix (used for tests and
/// synthetic inputs). Entries are symmetrised from the upper triangle.
inline DistanceGraph graph_from_matrix(NeuronSet neurons, const std::vector<std::vector<double>>& d) {
    DistanceGraph g = DistanceGraph::empty(std::move(neurons));
    for (std::size_t i = 0; i < g.size(); ++i) {
        for (std::size_t j = i + 1; j < g.size(); ++j) {
            g.set(i, j, d[i][j], std::isfinite(d[i][j]) ? Adjacency::adjacent_layer : Adjacency::disconnected);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// 0-dimensional persistence

struct Bdc {
    NeuronSet members;
    double birth = 0.0;
    double death = kInf;
    std::size_t merged = 0;      // components joined at birth
    std::vector<int> children;   // indices of absorbed clusters
    int parent = -1;
    double retention = -1.0;     // Prob(B) / Prob(full); set by the filter

    double persistence() const { return death - birth; }
    bool final_component() const { return !std::isfinite(death); }
};

struct Filtration {
    NeuronSet neurons;
    std::vector<Bdc> clusters;  // in creation order

    // Clusters alive at radius r: born at or before r and not yet absorbed.
    std::vector<NeuronSet> alive_at(double r) const {
        std::vector<NeuronSet> out;
        for (const auto& c : clusters) {
            if (c.birth <= r && r < c.death) out.push_back(c.members);
        }
        std::sort(out.begin(), out.end());
        return out;
    }
};

namespace detail {

struct UnionFind {
    std::vector<std::size_t> parent, size;

    explicit UnionFind(std::size_t n) : parent(n), size(n, 1) {
        std::iota(parent.begin(), parent.end(), std::size_t{0});
    }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (size[a] < size[b]) std::swap(a, b);
        parent[b] = a;
        size[a] += size[b];
        return true;
    }
};

}  // namespace detail

/// Sweeps the radius over the sorted finite distances. Components joined at
/// one radius are coalesced into one cluster born there; the clusters they
/// absorb die at that radius.
inline Filtration persistence_filtration(const DistanceGraph& g) {
    const std::size_t k = g.size();
    struct Edge {
        double d;
        std::size_t i, j;
    };
    std::vector<Edge> edges;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            if (std::isfinite(g.d(i, j))) edges.push_back({g.d(i, j), i, j});
        }
    }
    // Neurons are sorted, so (i, j) order is the lexicographic NeuronId order.
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        return std::tie(a.d, a.i, a.j) < std::tie(b.d, b.i, b.j);
    });

    Filtration f;
    f.neurons = g.neurons;
    detail::UnionFind uf(k);
    std::vector<int> cluster_of(k, -1);  // by root
    for (std::size_t e = 0; e < edges.size();) {
        const double r = edges[e].d;
        std::size_t end = e;
        while (end < edges.size() && edges[end].d == r) ++end;

        std::vector<std::pair<std::size_t, std::size_t>> roots;  // old roots per edge
        for (std::size_t x = e; x < end; ++x) roots.emplace_back(uf.find(edges[x].i), uf.find(edges[x].j));
        std::vector<int> old_cluster(k, -1);
        for (std::size_t x = 0; x < k; ++x) old_cluster[x] = cluster_of[x];
        bool any = false;
        for (const auto& [a, b] : roots) any = uf.unite(a, b) || any;
        if (any) {
            // Old roots grouped by their new root.
            std::map<std::size_t, std::vector<std::size_t>> groups;
            for (const auto& [a, b] : roots) {
                if (uf.find(a) != uf.find(b)) continue;
                for (std::size_t old : {a, b}) {
                    auto& v = groups[uf.find(old)];
                    if (std::find(v.begin(), v.end(), old) == v.end()) v.push_back(old);
                }
            }
            for (auto& [root, olds] : groups) {
                if (olds.size() < 2) continue;
                Bdc c;
                c.birth = r;
                c.merged = olds.size();
                for (std::size_t x = 0; x < k; ++x) {
                    if (uf.find(x) == root) c.members.push_back(g.neurons[x]);
                }
                const int id = static_cast<int>(f.clusters.size());
                for (std::size_t old : olds) {
                    const int oc = old_cluster[old];
                    if (oc >= 0) {
                        f.clusters[static_cast<std::size_t>(oc)].death = r;
                        f.clusters[static_cast<std::size_t>(oc)].parent = id;
                        c.children.push_back(oc);
                    }
                    cluster_of[old] = -1;
                }
                std::sort(c.children.begin(), c.children.end());
                cluster_of[root] = id;
                f.clusters.push_back(std::move(c));
            }
        }
        e = end;
    }
    return f;
}

/// Nested merge tree: final components at the top, singletons as leaves.
inline nlohmann::json dendrogram_json(const Filtration& f) {
    std::function<nlohmann::json(int)> node = [&](int id) {
        const Bdc& c = f.clusters[static_cast<std::size_t>(id)];
        nlohmann::json members = nlohmann::json::array();
        for (const auto& n : c.members) members.push_back(to_string(n));
        nlohmann::json children = nlohmann::json::array();
        NeuronSet covered;
        for (int ch : c.children) {
            children.push_back(node(ch));
            const auto& m = f.clusters[static_cast<std::size_t>(ch)].members;
            covered.insert(covered.end(), m.begin(), m.end());
        }
        normalize_set(covered);
        for (const auto& n : c.members) {
            if (!contains(covered, n)) children.push_back({{"neuron", to_string(n)}});
        }
        return nlohmann::json{{"members", members},
                              {"birth", c.birth},
                              {"death", std::isfinite(c.death) ? nlohmann::json(c.death) : nlohmann::json(nullptr)},
                              {"children", children}};
    };
    nlohmann::json roots = nlohmann::json::array();
    NeuronSet covered;
    for (std::size_t i = 0; i < f.clusters.size(); ++i) {
        if (f.clusters[i].parent < 0) {
            roots.push_back(node(static_cast<int>(i)));
            covered.insert(covered.end(), f.clusters[i].members.begin(), f.clusters[i].members.end());
        }
    }
    normalize_set(covered);
    for (const auto& n : f.neurons) {
        if (!contains(covered, n)) roots.push_back({{"neuron", to_string(n)}});
    }
    return roots;
}

// ---------------------------------------------------------------------------
// Probability gate and filter

/// Answer probability with every KN outside `members` zeroed.
inline double activate_only(const ToyTransformer& m, const NeuronSet& members, const NeuronSet& kns,
                            const Tokens& query, int answer) {
    InterventionPlan plan;
    for (const auto& n : kns) {
        if (!contains(members, n)) plan.set_value(n, ValueEdit::zero());
    }
    for (const auto& n : members) {
        if (!contains(kns, n)) throw Error("activate_only: cluster member " + to_string(n) + " is not a KN");
    }
    return predict_prob(m, query, answer, plan);
}

struct NtcParams {
    double tau1_factor = 0.5;
    double tau2 = 0.3;
    // Keep only the finest survivors so that no returned cluster contains
    // another one.
    bool finest_only = true;
};

struct DknSet {
    std::vector<Bdc> bdcs;  // sorted by birth
    std::string fact;
    double tau1 = 0.0;
    double tau2 = 0.0;
    std::string status = "ok";  // or the pipeline stage that came up empty

    bool empty() const { return bdcs.empty(); }
    std::size_t cardinality() const { return bdcs.size(); }
    NeuronSet neurons() const {
        NeuronSet out;
        for (const auto& b : bdcs) out.insert(out.end(), b.members.begin(), b.members.end());
        normalize_set(out);
        return out;
    }
};

/// Persistence used by the first gate: final components are capped at the
/// largest finite death radius (largest birth when nothing ever died).
inline std::vector<double> gated_persistence(const std::vector<Bdc>& bdcs) {
    double cap = -kInf;
    for (const auto& b : bdcs) {
        if (std::isfinite(b.death)) cap = std::max(cap, b.death);
    }
    if (!std::isfinite(cap)) {
        for (const auto& b : bdcs) cap = std::max(cap, b.birth);
    }
    std::vector<double> out;
    for (const auto& b : bdcs) out.push_back(b.final_component() ? cap : b.persistence());
    return out;
}

inline double tau1_from(const std::vector<Bdc>& bdcs, double factor) {
    const auto p = gated_persistence(bdcs);
    double mx = -kInf;
    for (std::size_t i = 0; i < bdcs.size(); ++i) {
        if (!bdcs[i].final_component()) mx = std::max(mx, p[i]);
    }
    if (!std::isfinite(mx)) {
        for (double x : p) mx = std::max(mx, x);
    }
    return std::isfinite(mx) ? factor * mx : 0.0;
}

/// Applies both gates given precomputed retention ratios (one per cluster).
inline DknSet ntc_gate(const std::vector<Bdc>& bdcs, const std::vector<double>& retention,
                       const NtcParams& p) {
    if (!(p.tau1_factor > 0.0 && p.tau1_factor <= 1.0)) throw ConfigError("tau1 factor must be in (0, 1]");
    if (!(p.tau2 >= 0.0 && p.tau2 <= 1.0)) throw ConfigError("tau2 must be in [0, 1]");
    DknSet out;
    out.tau1 = tau1_from(bdcs, p.tau1_factor);
    out.tau2 = p.tau2;
    const auto pers = gated_persistence(bdcs);
    std::vector<Bdc> kept;
    for (std::size_t i = 0; i < bdcs.size(); ++i) {
        if (pers[i] > out.tau1 && retention[i] >= p.tau2) {
            kept.push_back(bdcs[i]);
            kept.back().retention = retention[i];
        }
    }
    if (p.finest_only) {
        std::stable_sort(kept.begin(), kept.end(), [](const Bdc& a, const Bdc& b) {
            return std::make_pair(a.members.size(), a.birth) < std::make_pair(b.members.size(), b.birth);
        });
        std::vector<Bdc> fine;
        for (const auto& b : kept) {
            const bool covers = std::any_of(fine.begin(), fine.end(), [&](const Bdc& f) {
                return std::includes(b.members.begin(), b.members.end(), f.members.begin(), f.members.end());
            });
            if (!covers) fine.push_back(b);
        }
        kept = std::move(fine);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const Bdc& a, const Bdc& b) {
        return std::tie(a.birth, a.members) < std::tie(b.birth, b.members);
    });
    for (auto& b : kept) {
        b.children.clear();
        b.parent = -1;
    }
    out.bdcs = std::move(kept);
    if (out.bdcs.empty()) out.status = "empty-filter";
    return out;
}

inline DknSet ntc_filter(const std::vector<Bdc>& bdcs, const ToyTransformer& m, const NeuronSet& kns,
                         const Tokens& query, int answer, const NtcParams& p, std::size_t jobs = 1) {
    const double full = predict_prob(m, query, answer);
    if (!(full > 0.0)) throw NumericError("ntc_filter: zero answer probability");
    const auto retention = parallel_map(bdcs.size(), jobs, [&](std::size_t i) {
        return activate_only(m, bdcs[i].members, kns, query, answer) / full;
    });
    return ntc_gate(bdcs, retention, p);
}

struct LocateParams {
    std::size_t steps = kDefaultIgSteps;
    double kn_factor = kDefaultKnFactor;
    NtcParams ntc;
};

/// Every intermediate of one localisation run.
struct Localisation {
    AttributionResult attribution;
    KnSet kns;
    DistanceGraph graph;
    Filtration filtration;
    DknSet dkn;
};

inline Localisation locate_dkns(const ToyTransformer& m, const Tokens& query, int answer,
                                const LocateParams& p = {}, std::size_t jobs = 1) {
    Localisation out;
    out.attribution = attribute_all(m, query, answer, p.steps, jobs);
    out.kns = select_kns(out.attribution, kn_threshold(out.attribution, p.kn_factor));
    if (out.kns.empty()) {
        out.dkn.status = "empty-kns";
        return out;
    }
    out.graph = build_distance_graph(m, out.kns.neurons);
    out.filtration = persistence_filtration(out.graph);
    if (out.filtration.clusters.empty()) {
        out.dkn.status = "empty-filtration";
        out.dkn.tau2 = p.ntc.tau2;
        return out;
    }
    out.dkn = ntc_filter(out.filtration.clusters, m, out.kns.neurons, query, answer, p.ntc, jobs);
    return out;
}

inline nlohmann::json to_json(const NeuronSet& s) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& n : s) a.push_back({n.layer, n.pos});
    return a;
}

inline NeuronSet neuron_set_from_json(const nlohmann::json& j) {
    NeuronSet s;
    for (const auto& e : j) s.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    normalize_set(s);
    return s;
}

inline nlohmann::json to_json(const DknSet& d) {
    nlohmann::json bdcs = nlohmann::json::array();
    for (const auto& b : d.bdcs) {
        bdcs.push_back({{"members", to_json(b.members)},
                        {"birth", b.birth},
                        {"death", std::isfinite(b.death) ? nlohmann::json(b.death) : nlohmann::json(nullptr)},
                        {"persistence", std::isfinite(b.death) ? nlohmann::json(b.persistence()) : nlohmann::json(nullptr)},
                        {"retention", b.retention}});
    }
    return {{"fact", d.fact}, {"tau1", d.tau1}, {"tau2", d.tau2}, {"status", d.status}, {"bdcs", bdcs}};
}

inline DknSet dkn_from_json(const nlohmann::json& j) {
    DknSet d;
    d.fact = j.at("fact").get<std::string>();
    d.tau1 = j.at("tau1").get<double>();
    d.tau2 = j.at("tau2").get<double>();
    d.status = j.at("status").get<std::string>();
    for (const auto& b : j.at("bdcs")) {
        Bdc c;
        c.members = neuron_set_from_json(b.at("members"));
        c.birth = b.at("birth").get<double>();
        c.death = b.at("death").is_null() ? kInf : b.at("death").get<double>();
        c.retention = b.at("retention").get<double>();
        d.bdcs.push_back(std::move(c));
    }
    return d;
}

}  // namespace dkn
