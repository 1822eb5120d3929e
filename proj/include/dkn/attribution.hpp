#pragma once

#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/model.hpp"
#include "dkn/parallel.hpp"

namespace dkn {

inline constexpr std::size_t kDefaultIgSteps = 20;
inline constexpr double kDefaultKnFactor = 0.2;

/// The <eos> sentence of the same length as `query`.
inline Tokens baseline_input(const Tokens& query) {
    if (query.empty()) throw Error("baseline_input: empty query");
    return Tokens(query.size(), Vocab().eos());
}

/// Riemann sum (actual / steps) * sum_k grad(baseline + k/steps * (actual - baseline)).
template <class GradFn>
double riemann_ig(double actual, double baseline, std::size_t steps, GradFn&& grad) {
    if (steps < 1) throw Error("integrated gradients: steps must be >= 1");
    double sum = 0.0;
    for (std::size_t k = 1; k <= steps; ++k) {
        const double a = static_cast<double>(k) / static_cast<double>(steps);
        sum += grad(baseline + a * (actual - baseline));
    }
    return actual / static_cast<double>(steps) * sum;
}

/// Per-query attribution state: the clean pass on the query and the baseline
/// activations from the <eos> sentence.
class Attributor {
public:
    Attributor(const ToyTransformer& m, Tokens query, int answer)
        : m_(&m), answer_(answer), tail_(m, forward_pass(m, query)), query_(std::move(query)) {
        if (answer < 0 || static_cast<std::size_t>(answer) >= m.config.vocab_size) {
            throw Error("attribution: answer token out of vocabulary");
        }
        base_ = forward_pass(m, baseline_input(query_));
    }

    double actual(const NeuronId& n) const { return tail_.activation(n); }
    double baseline(const NeuronId& n) const {
        return base_.layers[n.layer].act(base_.answer_pos(), n.pos);
    }

    double raw(const NeuronId& n, std::size_t steps) const {
        if (!m_->config.valid(n)) throw Error("attribution: invalid neuron " + to_string(n));
        const double s = riemann_ig(actual(n), baseline(n), steps,
                                    [&](double v) { return tail_.neuron_grad(n, v, answer_); });
        if (!std::isfinite(s)) throw NumericError("attribution: non-finite gradient for " + to_string(n));
        return s;
    }

    const Tokens& query() const { return query_; }
    int answer() const { return answer_; }

private:
    const ToyTransformer* m_;
    int answer_;
    AnswerTail tail_;
    Tokens query_;
    ForwardPass base_;
};

inline double integrated_gradient(const ToyTransformer& m, const Tokens& query, int answer,
                                  const NeuronId& n, std::size_t steps = kDefaultIgSteps) {
    return Attributor(m, query, answer).raw(n, steps);
}

struct AttributionResult {
    std::size_t n_layers = 0;
    std::size_t d_ff = 0;
    std::vector<double> raw;     // signed, flat (layer-major)
    std::vector<double> scores;  // clamped and normalised
    Tokens query;
    int answer = 0;
    std::size_t steps_used = 0;

    NeuronId neuron(std::size_t flat) const { return {flat / d_ff, flat % d_ff}; }
    double score(const NeuronId& n) const { return scores.at(n.layer * d_ff + n.pos); }
    double max_score() const { return *std::max_element(scores.begin(), scores.end()); }
    NeuronId argmax() const {
        return neuron(static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin()));
    }
};

/// Clamps negatives to zero and divides by the total.
inline std::vector<double> normalize_scores(const std::vector<double>& raw) {
    std::vector<double> out(raw.size());
    double total = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out[i] = std::max(raw[i], 0.0);
        total += out[i];
    }
    if (!(total > 0.0)) throw NumericError("attribution: no attributable signal");
    for (double& s : out) s /= total;
    return out;
}

inline AttributionResult attribute_all(const ToyTransformer& m, const Tokens& query, int answer,
                                       std::size_t steps = kDefaultIgSteps, std::size_t jobs = 1) {
    if (steps < 1) throw Error("attribution: steps must be >= 1");
    const Attributor attr(m, query, answer);
    const ModelConfig& cfg = m.config;
    AttributionResult r;
    r.n_layers = cfg.n_layers;
    r.d_ff = cfg.d_ff;
    r.query = query;
    r.answer = answer;
    r.steps_used = steps;
    r.raw = parallel_map(cfg.neuron_count(), jobs,
                         [&](std::size_t i) { return attr.raw(cfg.neuron_at(i), steps); });
    r.scores = normalize_scores(r.raw);
    return r;
}

struct KnSet {
    NeuronSet neurons;
    double threshold_used = 0.0;
    std::string source_query;

    bool empty() const { return neurons.empty(); }
};

inline KnSet select_kns(const AttributionResult& r, double tau) {
    if (!(tau >= 0.0)) throw Error("select_kns: threshold must be >= 0");
    KnSet out;
    out.threshold_used = tau;
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
        if (r.scores[i] > tau) out.neurons.push_back(r.neuron(i));
    }
    return out;
}

/// Threshold relative to the largest score of the query.
inline double kn_threshold(const AttributionResult& r, double factor = kDefaultKnFactor) {
    return factor * r.max_score();
}

/// Mean normalised score over `neurons`.
inline double mean_score(const AttributionResult& r, const NeuronSet& neurons) {
    if (neurons.empty()) throw Error("mean score over an empty neuron set");
    double sum = 0.0;
    for (const auto& n : neurons) sum += r.score(n);
    return sum / static_cast<double>(neurons.size());
}

inline double score_for_factcheck(const ToyTransformer& m, const Tokens& query, int answer,
                                  const NeuronSet& dkn_neurons, std::size_t steps = kDefaultIgSteps,
                                  std::size_t jobs = 1) {
    if (dkn_neurons.empty()) throw Error("score_for_factcheck: empty neuron set");
    return mean_score(attribute_all(m, query, answer, steps, jobs), dkn_neurons);
}

inline nlohmann::json to_json(const AttributionResult& r, const Vocab& vocab) {
    nlohmann::json scores = nlohmann::json::array();
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
        if (r.scores[i] > 1e-6) {
            const NeuronId n = r.neuron(i);
            scores.push_back({{"layer", n.layer}, {"pos", n.pos}, {"score", r.scores[i]}});
        }
    }
    return {{"query", vocab.decode(r.query)},
            {"answer", vocab.word(r.answer)},
            {"steps", r.steps_used},
            {"scores", scores}};
}

}  // namespace dkn
