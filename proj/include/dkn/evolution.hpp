#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/intervention.hpp"

namespace dkn {

inline constexpr double kSmallDeltaFactor = 0.04;
inline constexpr double kLargeDeltaFactor = 0.05;

struct ParamDelta {
    std::size_t n_layers = 0;
    std::size_t d_ff = 0;
    std::vector<double> values;  // flat, layer-major

    double at(const NeuronId& n) const { return values.at(n.layer * d_ff + n.pos); }
    NeuronId neuron(std::size_t flat) const { return {flat / d_ff, flat % d_ff}; }
};

namespace detail {

inline double relative_change(double diff, double before, double after, const NeuronId& n, const char* what) {
    if (before == 0.0) {
        if (after == 0.0) return 0.0;
        throw NumericError(std::string("param_delta: zero ") + what + " weights before training for " + to_string(n));
    }
    return diff / before;
}

}  // namespace detail

/// Per neuron, the root of the summed squared relative changes of its W_fc
/// column and its W_proj row.
inline ParamDelta param_delta(const ToyTransformer& before, const ToyTransformer& after) {
    if (!(before.config == after.config)) throw Error("param_delta: model configs differ");
    const ModelConfig& cfg = before.config;
    ParamDelta out{cfg.n_layers, cfg.d_ff, std::vector<double>(cfg.neuron_count(), 0.0)};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& a = before.layers[l];
        const auto& b = after.layers[l];
        for (std::size_t j = 0; j < cfg.d_ff; ++j) {
            const NeuronId n{l, j};
            double fc_d = 0, fc_a = 0, fc_b = 0, pr_d = 0, pr_a = 0, pr_b = 0;
            for (std::size_t i = 0; i < cfg.d_model; ++i) {
                const double x = a.fc_w(i, j), y = b.fc_w(i, j);
                fc_d += (y - x) * (y - x);
                fc_a += x * x;
                fc_b += y * y;
                const double u = a.proj_w(j, i), v = b.proj_w(j, i);
                pr_d += (v - u) * (v - u);
                pr_a += u * u;
                pr_b += v * v;
            }
            const double rf = detail::relative_change(std::sqrt(fc_d), std::sqrt(fc_a), std::sqrt(fc_b), n, "W_fc");
            const double rp = detail::relative_change(std::sqrt(pr_d), std::sqrt(pr_a), std::sqrt(pr_b), n, "W_proj");
            out.values[l * cfg.d_ff + j] = std::sqrt(rf * rf + rp * rp);
        }
    }
    return out;
}

struct ChangedSet {
    NeuronSet neurons;
    double tau = 0.0;
    bool warning = false;  // every delta was zero
};

inline ChangedSet changed_set(const ParamDelta& d, double tau_factor) {
    if (d.values.empty()) throw Error("changed_set: empty delta");
    if (!(tau_factor >= 0.0)) throw ConfigError("tau_dN factor must be >= 0");
    ChangedSet out;
    const double mx = *std::max_element(d.values.begin(), d.values.end());
    out.tau = tau_factor * mx;
    out.warning = mx == 0.0;
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        if (d.values[i] > out.tau) out.neurons.push_back(d.neuron(i));
    }
    return out;
}

/// |dkn ∩ changed| / |dkn|.
inline double overlap(const NeuronSet& dkn, const NeuronSet& changed) {
    if (dkn.empty()) throw Error("overlap: empty DKN set");
    std::size_t hit = 0;
    for (const auto& n : dkn) hit += contains(changed, n) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(dkn.size());
}

enum class MaskKind { dkn, kn, random_matched, all };

inline const char* to_string(MaskKind k) {
    switch (k) {
        case MaskKind::dkn: return "DKN";
        case MaskKind::kn: return "KN";
        case MaskKind::random_matched: return "Rnd";
        case MaskKind::all: return "All";
    }
    return "?";
}

struct EvolveDatasets {
    std::vector<LabelledQuery> q_new, q_old, q_au;
    std::vector<Tokens> train;  // fine-tuning sequences (the Q_new facts with answers)
};

struct AccuracyTriple {
    double q_new = 0.0, q_old = 0.0, q_au = 0.0;
};

inline AccuracyTriple evaluate_triple(const ToyTransformer& m, const EvolveDatasets& d, std::size_t jobs = 1) {
    const InterventionPlan none;
    return {accuracy_under(m, d.q_new, none, jobs), accuracy_under(m, d.q_old, none, jobs),
            accuracy_under(m, d.q_au, none, jobs)};
}

inline FreezeMask mask_for(MaskKind kind, const NeuronSet& neurons, const ModelConfig& cfg) {
    if (kind == MaskKind::all) return FreezeMask::all(cfg);
    if (neurons.empty()) throw Error(std::string("freeze mask '") + to_string(kind) + "' is empty");
    return FreezeMask::neurons_only(neurons);
}

struct FinetuneOutcome {
    ToyTransformer model;
    AccuracyTriple acc;
};

inline FinetuneOutcome freeze_finetune_eval(const ToyTransformer& m, MaskKind kind, const NeuronSet& neurons,
                                            const EvolveDatasets& d, const TrainParams& hp, std::size_t jobs = 1) {
    const FreezeMask mask = mask_for(kind, neurons, m.config);
    TrainResult r = train(m, d.train, hp, mask);
    FinetuneOutcome out{std::move(r.model), {}};
    out.acc = evaluate_triple(out.model, d, jobs);
    return out;
}

inline nlohmann::json to_json(const AccuracyTriple& a) {
    return {{"Q_new", a.q_new}, {"Q_old", a.q_old}, {"Q_au", a.q_au}};
}

}  // namespace dkn
