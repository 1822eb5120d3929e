#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dkn/core.hpp"
#include "dkn/tokenizer.hpp"

namespace dkn {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 64;
    std::size_t d_ff = 128;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_seq = 16;
    std::uint64_t seed = 1;
    double init_std = 0.05;
    double mlp_init_std = 0.05;  // W_fc only; larger values give sparser GELU activations

    void validate() const {
        if (n_layers < 1 || d_model < 1 || d_ff < 1 || n_heads < 1 || vocab_size < 1 ||
            max_seq < 1) {
            throw ConfigError("model config: all counts must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("model config: d_model must be divisible by n_heads");
        }
        if (!(init_std > 0.0) || !std::isfinite(init_std) || !(mlp_init_std > 0.0) ||
            !std::isfinite(mlp_init_std)) {
            throw ConfigError("model config: init_std and mlp_init_std must be positive and finite");
        }
    }

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t neuron_count() const { return n_layers * d_ff; }

    bool valid(const NeuronId& n) const { return n.layer < n_layers && n.pos < d_ff; }

    NeuronId neuron_at(std::size_t flat) const { return {flat / d_ff, flat % d_ff}; }
    std::size_t flat_index(const NeuronId& n) const { return n.layer * d_ff + n.pos; }

    // Total trainable parameter count.
    std::size_t parameter_count() const {
        const std::size_t d = d_model;
        const std::size_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d +
                                      (d * d_ff + d_ff) + (d_ff * d + d);
        return vocab_size * d + max_seq * d + n_layers * per_layer + 2 * d + d * vocab_size;
    }

    static ModelConfig small(std::size_t vocab, std::uint64_t seed, std::size_t max_seq = 16) {
        return {2, 64, 128, 4, vocab, max_seq, seed, 0.05, 0.05};
    }
    static ModelConfig large(std::size_t vocab, std::uint64_t seed, std::size_t max_seq = 16) {
        return {4, 128, 256, 4, vocab, max_seq, seed, 0.05, 0.05};
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    const double& operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {v.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {v.data() + r * cols, cols}; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct LayerWeights {
    Matrix ln1_g, ln1_b;
    Matrix qkv_w, qkv_b;
    Matrix attn_proj_w, attn_proj_b;
    Matrix ln2_g, ln2_b;
    Matrix fc_w, fc_b;      // d_model x d_ff: column j is neuron j's input weights
    Matrix proj_w, proj_b;  // d_ff x d_model: row j is neuron j's output weights

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// Decoder-only pre-LayerNorm transformer with GELU MLPs and an untied
/// output head. Gradient buffers reuse this type.
struct ToyTransformer {
    ModelConfig config;
    Matrix wte, wpe;
    std::vector<LayerWeights> layers;
    Matrix lnf_g, lnf_b;
    Matrix head;  // d_model x vocab

    static ToyTransformer zeros(const ModelConfig& cfg) {
        cfg.validate();
        const std::size_t d = cfg.d_model;
        ToyTransformer m;
        m.config = cfg;
        m.wte = Matrix(cfg.vocab_size, d);
        m.wpe = Matrix(cfg.max_seq, d);
        m.layers.resize(cfg.n_layers);
        for (auto& l : m.layers) {
            l.ln1_g = Matrix(1, d);
            l.ln1_b = Matrix(1, d);
            l.qkv_w = Matrix(d, 3 * d);
            l.qkv_b = Matrix(1, 3 * d);
            l.attn_proj_w = Matrix(d, d);
            l.attn_proj_b = Matrix(1, d);
            l.ln2_g = Matrix(1, d);
            l.ln2_b = Matrix(1, d);
            l.fc_w = Matrix(d, cfg.d_ff);
            l.fc_b = Matrix(1, cfg.d_ff);
            l.proj_w = Matrix(cfg.d_ff, d);
            l.proj_b = Matrix(1, d);
        }
        m.lnf_g = Matrix(1, d);
        m.lnf_b = Matrix(1, d);
        m.head = Matrix(d, cfg.vocab_size);
        return m;
    }

    static ToyTransformer init(const ModelConfig& cfg) {
        ToyTransformer m = zeros(cfg);
        Rng rng = make_rng(cfg.seed, "init");
        const double s = cfg.init_std;
        const double s_out = s / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
        auto randn = [&](Matrix& x, double std) {
            for (auto& e : x.v) e = std * normal(rng);
        };
        randn(m.wte, s);
        randn(m.wpe, s);
        for (auto& l : m.layers) {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            randn(l.qkv_w, s);
            randn(l.attn_proj_w, s_out);
            randn(l.fc_w, cfg.mlp_init_std);
            randn(l.proj_w, s_out);
        }
        m.lnf_g.fill(1.0);
        randn(m.head, s);
        return m;
    }

    std::span<const double> proj_row(const NeuronId& n) const {
        return layers[n.layer].proj_w.row(n.pos);
    }

    std::vector<double> fc_column(const NeuronId& n) const {
        const Matrix& w = layers[n.layer].fc_w;
        std::vector<double> col(w.rows);
        for (std::size_t i = 0; i < w.rows; ++i) col[i] = w(i, n.pos);
        return col;
    }

    // Visits every parameter tensor with its neutral-format name.
    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("wte", self.wte);
        f("wpe", self.wpe);
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            const std::string p = "h." + std::to_string(i) + ".";
            f(p + "ln_1.weight", l.ln1_g);
            f(p + "ln_1.bias", l.ln1_b);
            f(p + "attn.c_attn.weight", l.qkv_w);
            f(p + "attn.c_attn.bias", l.qkv_b);
            f(p + "attn.c_proj.weight", l.attn_proj_w);
            f(p + "attn.c_proj.bias", l.attn_proj_b);
            f(p + "ln_2.weight", l.ln2_g);
            f(p + "ln_2.bias", l.ln2_b);
            f(p + "mlp.c_fc.weight", l.fc_w);
            f(p + "mlp.c_fc.bias", l.fc_b);
            f(p + "mlp.c_proj.weight", l.proj_w);
            f(p + "mlp.c_proj.bias", l.proj_b);
        }
        f("ln_f.weight", self.lnf_g);
        f("ln_f.bias", self.lnf_b);
        f("lm_head.weight", self.head);
    }

    template <class F>
    void for_each_param(F&& f) { visit(*this, std::forward<F>(f)); }
    template <class F>
    void for_each_param(F&& f) const { visit(*this, std::forward<F>(f)); }

    bool all_finite() const {
        bool ok = true;
        for_each_param([&](const std::string&, const Matrix& m) {
            for (double x : m.v) ok = ok && std::isfinite(x);
        });
        return ok;
    }

    friend bool operator==(const ToyTransformer&, const ToyTransformer&) = default;
};

/// Direct residual-stream connection weight between adjacent-layer neurons:
/// A's output row dotted with B's input column.
template <class Weights>
double connection_weight(const Weights& w, const NeuronId& a, const NeuronId& b) {
    const auto u = w.proj_row(a);
    const auto v = w.fc_column(b);
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

// ---------------------------------------------------------------------------
// Interventions

struct ValueEdit {
    enum class Kind { zero, scale, interpolate };
    Kind kind = Kind::zero;
    double factor = 1.0;    // scale factor, or alpha for interpolate
    double baseline = 0.0;  // interpolate only

    static ValueEdit zero() { return {Kind::zero, 0.0, 0.0}; }
    static ValueEdit scale(double f) { return {Kind::scale, f, 0.0}; }
    // activation := baseline + alpha * (actual - baseline), at the answer
    // position only; alpha = 0 pins the activation to `baseline`.
    static ValueEdit interpolate(double alpha, double baseline) {
        return {Kind::interpolate, alpha, baseline};
    }

    double apply(double actual) const {
        switch (kind) {
            case Kind::zero: return 0.0;
            case Kind::scale: return factor * actual;
            case Kind::interpolate: return baseline + factor * (actual - baseline);
        }
        return actual;
    }

    // d(apply)/d(actual)
    double derivative() const {
        return kind == Kind::zero ? 0.0 : factor;
    }
};

/// Value and connection-weight edits applied during a forward pass.
class InterventionPlan {
public:
    using Edge = std::pair<NeuronId, NeuronId>;  // (lower layer, upper layer)

    void set_value(const NeuronId& n, const ValueEdit& e) {
        if (!std::isfinite(e.factor) || !std::isfinite(e.baseline)) {
            throw Error("value edit on " + to_string(n) + " is not finite");
        }
        if (!values_.emplace(n, e).second) {
            throw Error("neuron " + to_string(n) + " already has a value edit");
        }
    }

    void set_edge(NeuronId a, NeuronId b, double gain) {
        if (!std::isfinite(gain) || gain < 0.0) {
            throw Error("edge gain must be finite and >= 0");
        }
        if (a.layer > b.layer) std::swap(a, b);
        if (b.layer != a.layer + 1) {
            throw Error("edge edit between non-adjacent layers: " + to_string(a) + " - " +
                        to_string(b));
        }
        edges_[{a, b}] = gain;
    }

    const std::map<NeuronId, ValueEdit>& value_edits() const { return values_; }
    const std::map<Edge, double>& edge_edits() const { return edges_; }

    bool empty() const { return values_.empty() && edges_.empty(); }

    void validate(const ModelConfig& cfg) const {
        for (const auto& [n, e] : values_) {
            if (!cfg.valid(n)) throw Error("value edit on invalid neuron " + to_string(n));
        }
        for (const auto& [e, g] : edges_) {
            if (!cfg.valid(e.first) || !cfg.valid(e.second)) {
                throw Error("edge edit on invalid neuron");
            }
        }
    }

    // Merges another plan; duplicate value edits are rejected.
    void merge(const InterventionPlan& other) {
        for (const auto& [n, e] : other.values_) set_value(n, e);
        for (const auto& [e, g] : other.edges_) set_edge(e.first, e.second, g);
    }

private:
    std::map<NeuronId, ValueEdit> values_;
    std::map<Edge, double> edges_;
};

// ---------------------------------------------------------------------------
// Numerics

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y = x W + b for one row.
inline void linear_row(std::span<const double> x, const Matrix& w, const Matrix& b,
                       std::span<double> y) {
    for (std::size_t j = 0; j < w.cols; ++j) y[j] = b.v[j];
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* wr = w.v.data() + i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
    }
}

inline Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y(x.rows, w.cols);
    for (std::size_t t = 0; t < x.rows; ++t) linear_row(x.row(t), w, b, y.row(t));
    return y;
}

// dx = dy W^T for one row (accumulates).
inline void linear_row_back_input(std::span<const double> dy, const Matrix& w,
                                  std::span<double> dx) {
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wr = w.v.data() + i * w.cols;
        double s = 0.0;
        for (std::size_t j = 0; j < w.cols; ++j) s += wr[j] * dy[j];
        dx[i] += s;
    }
}

// dW += x^T dy, db += dy for one row.
inline void linear_row_back_params(std::span<const double> x, std::span<const double> dy,
                                   Matrix& dw, Matrix& db) {
    for (std::size_t j = 0; j < dw.cols; ++j) db.v[j] += dy[j];
    for (std::size_t i = 0; i < dw.rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        double* dr = dw.v.data() + i * dw.cols;
        for (std::size_t j = 0; j < dw.cols; ++j) dr[j] += xi * dy[j];
    }
}

struct LnCache {
    Matrix xhat;
    std::vector<double> rstd;
};

inline void layernorm_row(std::span<const double> x, const Matrix& g, const Matrix& b,
                          std::span<double> y, std::span<double> xhat, double& rstd) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (double e : x) mean += e;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double e : x) var += (e - mean) * (e - mean);
    var /= static_cast<double>(n);
    rstd = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = g.v[i] * xhat[i] + b.v[i];
    }
}

inline Matrix layernorm(const Matrix& x, const Matrix& g, const Matrix& b, LnCache& c) {
    Matrix y(x.rows, x.cols);
    c.xhat = Matrix(x.rows, x.cols);
    c.rstd.assign(x.rows, 0.0);
    for (std::size_t t = 0; t < x.rows; ++t) {
        layernorm_row(x.row(t), g, b, y.row(t), c.xhat.row(t), c.rstd[t]);
    }
    return y;
}

// Accumulates into dx; dg/db may be null.
inline void layernorm_row_back(std::span<const double> dy, std::span<const double> xhat,
                               double rstd, const Matrix& g, std::span<double> dx, Matrix* dg,
                               Matrix* db) {
    const std::size_t n = dy.size();
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dxh = dy[i] * g.v[i];
        mean_d += dxh;
        mean_dx += dxh * xhat[i];
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double dxh = dy[i] * g.v[i];
        dx[i] += rstd * (dxh - mean_d - xhat[i] * mean_dx);
        if (dg) dg->v[i] += dy[i] * xhat[i];
        if (db) db->v[i] += dy[i];
    }
}

inline std::vector<double> softmax(std::span<const double> z) {
    double mx = -kInf;
    for (double e : z) mx = std::max(mx, e);
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - mx);
        s += p[i];
    }
    for (double& e : p) e /= s;
    return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerCache {
    Matrix x_in;
    detail::LnCache ln1;
    Matrix ln1_out;
    Matrix qkv;
    std::vector<double> att;  // [head][t][s], s <= t
    Matrix attn_y;
    Matrix x_mid;
    detail::LnCache ln2;
    Matrix ln2_out;
    Matrix pre;      // MLP pre-activation after edge corrections
    Matrix act_raw;  // GELU output
    Matrix act;      // after value edits; this is what W_proj sees
};

/// Everything a backward pass needs, plus the logits.
struct ForwardPass {
    Tokens tokens;
    std::vector<LayerCache> layers;
    Matrix x_final;
    detail::LnCache lnf;
    Matrix lnf_out;
    Matrix logits;  // T x vocab

    std::size_t answer_pos() const { return tokens.size() - 1; }

    std::vector<double> answer_distribution() const {
        return detail::softmax(logits.row(answer_pos()));
    }
};

/// Post-nonlinearity activations per (layer, position) and the next-token
/// distribution at the answer position.
struct ActivationTrace {
    std::vector<Matrix> activations;  // per layer: T x d_ff
    std::vector<double> distribution;

    double activation(const NeuronId& n, std::size_t position) const {
        return activations[n.layer](position, n.pos);
    }
};

inline void check_tokens(const ModelConfig& cfg, const Tokens& tokens) {
    if (tokens.empty()) throw Error("forward: empty token sequence");
    if (tokens.size() > cfg.max_seq) {
        throw Error("forward: sequence length " + std::to_string(tokens.size()) +
                    " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw Error("forward: token id " + std::to_string(t) + " out of vocabulary");
        }
    }
}

inline ForwardPass forward_pass(const ToyTransformer& m, const Tokens& tokens,
                                const InterventionPlan& plan = {}) {
    const ModelConfig& cfg = m.config;
    check_tokens(cfg, tokens);
    plan.validate(cfg);

    const std::size_t T = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardPass f;
    f.tokens = tokens;
    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        const auto e = m.wte.row(static_cast<std::size_t>(tokens[t]));
        const auto p = m.wpe.row(t);
        for (std::size_t i = 0; i < d; ++i) x(t, i) = e[i] + p[i];
    }

    f.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& w = m.layers[l];
        LayerCache& c = f.layers[l];
        c.x_in = x;

        c.ln1_out = detail::layernorm(x, w.ln1_g, w.ln1_b, c.ln1);
        c.qkv = detail::linear(c.ln1_out, w.qkv_w, w.qkv_b);
        c.att.assign(H * T * T, 0.0);
        c.attn_y = Matrix(T, d);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < T; ++t) {
                const double* q = &c.qkv(t, h * hd);
                double* p = &c.att[(h * T + t) * T];
                double mx = -kInf;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* k = &c.qkv(s, d + h * hd);
                    double dot = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) dot += q[i] * k[i];
                    p[s] = dot * scale;
                    mx = std::max(mx, p[s]);
                }
                double sum = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] = std::exp(p[s] - mx);
                    sum += p[s];
                }
                for (std::size_t s = 0; s <= t; ++s) p[s] /= sum;
                double* y = &c.attn_y(t, h * hd);
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = &c.qkv(s, 2 * d + h * hd);
                    for (std::size_t i = 0; i < hd; ++i) y[i] += p[s] * v[i];
                }
            }
        }
        const Matrix o = detail::linear(c.attn_y, w.attn_proj_w, w.attn_proj_b);
        for (std::size_t k = 0; k < x.v.size(); ++k) x.v[k] += o.v[k];
        c.x_mid = x;

        c.ln2_out = detail::layernorm(x, w.ln2_g, w.ln2_b, c.ln2);
        c.pre = detail::linear(c.ln2_out, w.fc_w, w.fc_b);
        for (const auto& [edge, gain] : plan.edge_edits()) {
            if (edge.second.layer != l || gain == 1.0) continue;
            const double coef = (gain - 1.0) * connection_weight(m, edge.first, edge.second);
            const Matrix& prev = f.layers[l - 1].act;
            for (std::size_t t = 0; t < T; ++t) {
                c.pre(t, edge.second.pos) += coef * prev(t, edge.first.pos);
            }
        }
        c.act_raw = Matrix(T, cfg.d_ff);
        for (std::size_t k = 0; k < c.pre.v.size(); ++k) c.act_raw.v[k] = detail::gelu(c.pre.v[k]);
        c.act = c.act_raw;
        for (const auto& [n, e] : plan.value_edits()) {
            if (n.layer != l) continue;
            if (e.kind == ValueEdit::Kind::interpolate) {
                c.act(T - 1, n.pos) = e.apply(c.act_raw(T - 1, n.pos));
            } else {
                for (std::size_t t = 0; t < T; ++t) c.act(t, n.pos) = e.apply(c.act_raw(t, n.pos));
            }
        }
        const Matrix mo = detail::linear(c.act, w.proj_w, w.proj_b);
        for (std::size_t k = 0; k < x.v.size(); ++k) x.v[k] += mo.v[k];
    }

    f.x_final = x;
    f.lnf_out = detail::layernorm(x, m.lnf_g, m.lnf_b, f.lnf);
    f.logits = Matrix(T, cfg.vocab_size);
    const Matrix no_bias(1, cfg.vocab_size);
    for (std::size_t t = 0; t < T; ++t) {
        detail::linear_row(f.lnf_out.row(t), m.head, no_bias, f.logits.row(t));
    }
    return f;
}

/// Reverse pass. `dlogits` is dLoss/dlogits (T x vocab). Parameter gradients
/// are accumulated into `grads` when non-null; gradients with respect to the
/// post-edit MLP activations are written to `dact` when non-null. Parameter
/// gradients do not include the weight dependence of edge-edit corrections.
inline void backward_pass(const ToyTransformer& m, const ForwardPass& f,
                          const InterventionPlan& plan, const Matrix& dlogits,
                          ToyTransformer* grads, std::vector<Matrix>* dact_out) {
    const ModelConfig& cfg = m.config;
    const std::size_t T = f.tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    const std::size_t L = cfg.n_layers;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (dact_out) dact_out->assign(L, Matrix());

    Matrix dx(T, d);
    {
        Matrix dz(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            detail::linear_row_back_input(dlogits.row(t), m.head, dz.row(t));
            if (grads) {
                Matrix dummy(1, cfg.vocab_size);
                detail::linear_row_back_params(f.lnf_out.row(t), dlogits.row(t), grads->head, dummy);
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            detail::layernorm_row_back(dz.row(t), f.lnf.xhat.row(t), f.lnf.rstd[t], m.lnf_g,
                                       dx.row(t), grads ? &grads->lnf_g : nullptr,
                                       grads ? &grads->lnf_b : nullptr);
        }
    }

    std::vector<Matrix> edge_pending(L, Matrix(T, cfg.d_ff));

    for (std::size_t li = L; li-- > 0;) {
        const LayerWeights& w = m.layers[li];
        const LayerCache& c = f.layers[li];
        LayerWeights* gw = grads ? &grads->layers[li] : nullptr;

        Matrix dact(T, cfg.d_ff);
        for (std::size_t t = 0; t < T; ++t) {
            detail::linear_row_back_input(dx.row(t), w.proj_w, dact.row(t));
            if (gw) detail::linear_row_back_params(c.act.row(t), dx.row(t), gw->proj_w, gw->proj_b);
        }
        for (std::size_t k = 0; k < dact.v.size(); ++k) dact.v[k] += edge_pending[li].v[k];
        if (dact_out) (*dact_out)[li] = dact;

        Matrix dact_raw = dact;
        for (const auto& [n, e] : plan.value_edits()) {
            if (n.layer != li) continue;
            if (e.kind == ValueEdit::Kind::interpolate) {
                dact_raw(T - 1, n.pos) *= e.derivative();
            } else {
                for (std::size_t t = 0; t < T; ++t) dact_raw(t, n.pos) *= e.derivative();
            }
        }
        Matrix dpre(T, cfg.d_ff);
        for (std::size_t k = 0; k < dpre.v.size(); ++k) {
            dpre.v[k] = dact_raw.v[k] * detail::gelu_grad(c.pre.v[k]);
        }
        for (const auto& [edge, gain] : plan.edge_edits()) {
            if (edge.second.layer != li || gain == 1.0) continue;
            const double coef = (gain - 1.0) * connection_weight(m, edge.first, edge.second);
            for (std::size_t t = 0; t < T; ++t) {
                edge_pending[li - 1](t, edge.first.pos) += coef * dpre(t, edge.second.pos);
            }
        }

        Matrix dln2(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            detail::linear_row_back_input(dpre.row(t), w.fc_w, dln2.row(t));
            if (gw) detail::linear_row_back_params(c.ln2_out.row(t), dpre.row(t), gw->fc_w, gw->fc_b);
        }
        Matrix dmid = dx;
        for (std::size_t t = 0; t < T; ++t) {
            detail::layernorm_row_back(dln2.row(t), c.ln2.xhat.row(t), c.ln2.rstd[t], w.ln2_g,
                                       dmid.row(t), gw ? &gw->ln2_g : nullptr,
                                       gw ? &gw->ln2_b : nullptr);
        }

        Matrix dy(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            detail::linear_row_back_input(dmid.row(t), w.attn_proj_w, dy.row(t));
            if (gw) {
                detail::linear_row_back_params(c.attn_y.row(t), dmid.row(t), gw->attn_proj_w,
                                               gw->attn_proj_b);
            }
        }
        Matrix dqkv(T, 3 * d);
        std::vector<double> dp(T);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < T; ++t) {
                const double* p = &c.att[(h * T + t) * T];
                const double* gy = &dy(t, h * hd);
                double dot_sum = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = &c.qkv(s, 2 * d + h * hd);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) acc += gy[i] * v[i];
                    dp[s] = acc;
                    dot_sum += p[s] * acc;
                    double* dv = &dqkv(s, 2 * d + h * hd);
                    for (std::size_t i = 0; i < hd; ++i) dv[i] += p[s] * gy[i];
                }
                const double* q = &c.qkv(t, h * hd);
                double* dq = &dqkv(t, h * hd);
                for (std::size_t s = 0; s <= t; ++s) {
                    const double ds = p[s] * (dp[s] - dot_sum) * scale;
                    const double* k = &c.qkv(s, d + h * hd);
                    double* dk = &dqkv(s, d + h * hd);
                    for (std::size_t i = 0; i < hd; ++i) {
                        dq[i] += ds * k[i];
                        dk[i] += ds * q[i];
                    }
                }
            }
        }
        Matrix dln1(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            detail::linear_row_back_input(dqkv.row(t), w.qkv_w, dln1.row(t));
            if (gw) detail::linear_row_back_params(c.ln1_out.row(t), dqkv.row(t), gw->qkv_w, gw->qkv_b);
        }
        dx = dmid;
        for (std::size_t t = 0; t < T; ++t) {
            detail::layernorm_row_back(dln1.row(t), c.ln1.xhat.row(t), c.ln1.rstd[t], w.ln1_g,
                                       dx.row(t), gw ? &gw->ln1_g : nullptr,
                                       gw ? &gw->ln1_b : nullptr);
        }
    }

    if (grads) {
        for (std::size_t t = 0; t < T; ++t) {
            auto ge = grads->wte.row(static_cast<std::size_t>(f.tokens[t]));
            auto gp = grads->wpe.row(t);
            for (std::size_t i = 0; i < d; ++i) {
                ge[i] += dx(t, i);
                gp[i] += dx(t, i);
            }
        }
    }
}

struct ForwardOutput {
    Matrix logits;
    std::optional<ActivationTrace> trace;
};

inline ForwardOutput forward(const ToyTransformer& m, const Tokens& tokens,
                             const InterventionPlan& plan = {}, bool capture = false) {
    ForwardPass f = forward_pass(m, tokens, plan);
    ForwardOutput out;
    if (capture) {
        ActivationTrace tr;
        for (auto& c : f.layers) tr.activations.push_back(std::move(c.act));
        tr.distribution = f.answer_distribution();
        out.trace = std::move(tr);
    }
    out.logits = std::move(f.logits);
    return out;
}

/// Probability of `answer` as the next token after `query`.
inline double predict_prob(const ToyTransformer& m, const Tokens& query, int answer,
                           const InterventionPlan& plan = {}) {
    if (answer < 0 || static_cast<std::size_t>(answer) >= m.config.vocab_size) {
        throw Error("answer token out of vocabulary");
    }
    const ForwardPass f = forward_pass(m, query, plan);
    return f.answer_distribution()[static_cast<std::size_t>(answer)];
}

/// Greedy top-1 next token (ties resolve to the lowest id).
inline int predict_top1(const ToyTransformer& m, const Tokens& query,
                        const InterventionPlan& plan = {}) {
    const ForwardPass f = forward_pass(m, query, plan);
    const auto row = f.logits.row(f.answer_pos());
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// dF/d(activation) at the answer position, with the neuron's activation
/// pinned to `injected`, where F is the answer probability.
inline double backprop_neuron_grad(const ToyTransformer& m, const Tokens& query, int answer,
                                   const NeuronId& neuron, double injected) {
    if (!m.config.valid(neuron)) throw Error("invalid neuron " + to_string(neuron));
    InterventionPlan plan;
    plan.set_value(neuron, ValueEdit::interpolate(0.0, injected));
    const ForwardPass f = forward_pass(m, query, plan);
    const auto p = f.answer_distribution();
    const auto a = static_cast<std::size_t>(answer);
    Matrix dlogits(query.size(), m.config.vocab_size);
    for (std::size_t v = 0; v < p.size(); ++v) {
        dlogits(f.answer_pos(), v) = p[a] * ((v == a ? 1.0 : 0.0) - p[v]);
    }
    std::vector<Matrix> dact;
    backward_pass(m, f, plan, dlogits, nullptr, &dact);
    return dact[neuron.layer](f.answer_pos(), neuron.pos);
}

// ---------------------------------------------------------------------------
// Answer-position tail evaluation.
//
// Changing an MLP activation at the last position only affects that
// position's residual stream from the same layer upward. AnswerTail caches a
// clean pass and re-evaluates just the final position, returning the answer
// probability and its gradient with respect to the injected residual.

class AnswerTail {
public:
    AnswerTail(const ToyTransformer& m, ForwardPass clean) : m_(&m), clean_(std::move(clean)) {}

    const ForwardPass& clean() const { return clean_; }

    // Residual at the answer position after layer `layer` finished.
    std::vector<double> residual_after(std::size_t layer) const {
        const std::size_t t = clean_.answer_pos();
        const auto r = layer + 1 < clean_.layers.size() ? clean_.layers[layer + 1].x_in.row(t)
                                                        : clean_.x_final.row(t);
        return {r.begin(), r.end()};
    }

    double activation(const NeuronId& n) const {
        return clean_.layers[n.layer].act(clean_.answer_pos(), n.pos);
    }

    /// F(h) and dF/dh for residual `h` injected after `layer`.
    double prob_and_grad(std::size_t layer, std::vector<double> h, int answer,
                         std::vector<double>& dh) const {
        const ToyTransformer& m = *m_;
        const ModelConfig& cfg = m.config;
        const std::size_t d = cfg.d_model;
        const std::size_t H = cfg.n_heads;
        const std::size_t hd = cfg.head_dim();
        const std::size_t T = clean_.tokens.size();
        const std::size_t last = T - 1;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

        struct Step {
            std::vector<double> x_in, xhat1, a1, qkv, att, y, x_mid, xhat2, a2, pre, act;
            double rstd1 = 0, rstd2 = 0;
        };
        std::vector<Step> steps;
        for (std::size_t li = layer + 1; li < cfg.n_layers; ++li) {
            const LayerWeights& w = m.layers[li];
            const LayerCache& c = clean_.layers[li];
            Step s;
            s.x_in = h;
            s.xhat1.resize(d);
            s.a1.resize(d);
            detail::layernorm_row(h, w.ln1_g, w.ln1_b, s.a1, s.xhat1, s.rstd1);
            s.qkv.resize(3 * d);
            detail::linear_row(s.a1, w.qkv_w, w.qkv_b, s.qkv);
            s.att.assign(H * T, 0.0);
            s.y.assign(d, 0.0);
            for (std::size_t hh = 0; hh < H; ++hh) {
                const double* q = &s.qkv[hh * hd];
                double* p = &s.att[hh * T];
                double mx = -kInf;
                for (std::size_t t = 0; t < T; ++t) {
                    const double* k = t == last ? &s.qkv[d + hh * hd] : &c.qkv(t, d + hh * hd);
                    double dot = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) dot += q[i] * k[i];
                    p[t] = dot * scale;
                    mx = std::max(mx, p[t]);
                }
                double sum = 0.0;
                for (std::size_t t = 0; t < T; ++t) {
                    p[t] = std::exp(p[t] - mx);
                    sum += p[t];
                }
                for (std::size_t t = 0; t < T; ++t) p[t] /= sum;
                for (std::size_t t = 0; t < T; ++t) {
                    const double* v = t == last ? &s.qkv[2 * d + hh * hd] : &c.qkv(t, 2 * d + hh * hd);
                    for (std::size_t i = 0; i < hd; ++i) s.y[hh * hd + i] += p[t] * v[i];
                }
            }
            std::vector<double> o(d);
            detail::linear_row(s.y, w.attn_proj_w, w.attn_proj_b, o);
            for (std::size_t i = 0; i < d; ++i) h[i] += o[i];
            s.x_mid = h;
            s.xhat2.resize(d);
            s.a2.resize(d);
            detail::layernorm_row(h, w.ln2_g, w.ln2_b, s.a2, s.xhat2, s.rstd2);
            s.pre.resize(cfg.d_ff);
            detail::linear_row(s.a2, w.fc_w, w.fc_b, s.pre);
            s.act.resize(cfg.d_ff);
            for (std::size_t j = 0; j < cfg.d_ff; ++j) s.act[j] = detail::gelu(s.pre[j]);
            std::vector<double> mo(d);
            detail::linear_row(s.act, w.proj_w, w.proj_b, mo);
            for (std::size_t i = 0; i < d; ++i) h[i] += mo[i];
            steps.push_back(std::move(s));
        }

        std::vector<double> xhat(d), z(d);
        double rstd = 0.0;
        detail::layernorm_row(h, m.lnf_g, m.lnf_b, z, xhat, rstd);
        std::vector<double> logits(cfg.vocab_size);
        const Matrix no_bias(1, cfg.vocab_size);
        detail::linear_row(z, m.head, no_bias, logits);
        const auto p = detail::softmax(logits);
        const auto a = static_cast<std::size_t>(answer);
        const double F = p[a];

        std::vector<double> dlog(cfg.vocab_size);
        for (std::size_t v = 0; v < p.size(); ++v) dlog[v] = F * ((v == a ? 1.0 : 0.0) - p[v]);
        std::vector<double> dz(d, 0.0);
        detail::linear_row_back_input(dlog, m.head, dz);
        dh.assign(d, 0.0);
        detail::layernorm_row_back(dz, xhat, rstd, m.lnf_g, dh, nullptr, nullptr);

        for (std::size_t k = steps.size(); k-- > 0;) {
            const std::size_t li = layer + 1 + k;
            const LayerWeights& w = m.layers[li];
            const LayerCache& c = clean_.layers[li];
            const Step& s = steps[k];

            std::vector<double> dact(cfg.d_ff, 0.0);
            detail::linear_row_back_input(dh, w.proj_w, dact);
            std::vector<double> dpre(cfg.d_ff);
            for (std::size_t j = 0; j < cfg.d_ff; ++j) dpre[j] = dact[j] * detail::gelu_grad(s.pre[j]);
            std::vector<double> da2(d, 0.0);
            detail::linear_row_back_input(dpre, w.fc_w, da2);
            std::vector<double> dmid = dh;
            detail::layernorm_row_back(da2, s.xhat2, s.rstd2, w.ln2_g, dmid, nullptr, nullptr);

            std::vector<double> dy(d, 0.0);
            detail::linear_row_back_input(dmid, w.attn_proj_w, dy);
            std::vector<double> dqkv(3 * d, 0.0);
            std::vector<double> dp(T);
            for (std::size_t hh = 0; hh < H; ++hh) {
                const double* p = &s.att[hh * T];
                const double* gy = &dy[hh * hd];
                double dot_sum = 0.0;
                for (std::size_t t = 0; t < T; ++t) {
                    const double* v = t == last ? &s.qkv[2 * d + hh * hd] : &c.qkv(t, 2 * d + hh * hd);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) acc += gy[i] * v[i];
                    dp[t] = acc;
                    dot_sum += p[t] * acc;
                }
                for (std::size_t i = 0; i < hd; ++i) dqkv[2 * d + hh * hd + i] += p[last] * gy[i];
                const double* q = &s.qkv[hh * hd];
                for (std::size_t t = 0; t < T; ++t) {
                    const double ds = p[t] * (dp[t] - dot_sum) * scale;
                    const double* k = t == last ? &s.qkv[d + hh * hd] : &c.qkv(t, d + hh * hd);
                    for (std::size_t i = 0; i < hd; ++i) dqkv[hh * hd + i] += ds * k[i];
                    if (t == last) {
                        for (std::size_t i = 0; i < hd; ++i) dqkv[d + hh * hd + i] += ds * q[i];
                    }
                }
            }
            std::vector<double> da1(d, 0.0);
            detail::linear_row_back_input(dqkv, w.qkv_w, da1);
            dh = dmid;
            detail::layernorm_row_back(da1, s.xhat1, s.rstd1, w.ln1_g, dh, nullptr, nullptr);
        }
        return F;
    }

    /// dF/d(activation) of `n` when its answer-position activation is `value`.
    double neuron_grad(const NeuronId& n, double value, int answer) const {
        const auto u = m_->proj_row(n);
        std::vector<double> h = residual_after(n.layer);
        const double delta = value - activation(n);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += delta * u[i];
        std::vector<double> dh;
        prob_and_grad(n.layer, std::move(h), answer, dh);
        double g = 0.0;
        for (std::size_t i = 0; i < dh.size(); ++i) g += dh[i] * u[i];
        return g;
    }

private:
    const ToyTransformer* m_;
    ForwardPass clean_;
};

// ---------------------------------------------------------------------------
// Training

enum class Optimizer { adam, sgd };

struct TrainParams {
    Optimizer optimizer = Optimizer::adam;
    std::size_t steps = 1000;
    std::size_t batch = 16;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 1.0;
    std::uint64_t seed = 0;
    bool last_token_only = false;  // loss on the final token (the answer) only
};

/// Which parameters a training run may touch. A trainable neuron owns its
/// W_fc column, its W_fc bias entry and its W_proj row.
struct FreezeMask {
    NeuronSet trainable_neurons;
    bool train_non_mlp = false;

    static FreezeMask all(const ModelConfig& cfg) {
        FreezeMask m;
        for (std::size_t i = 0; i < cfg.neuron_count(); ++i) m.trainable_neurons.push_back(cfg.neuron_at(i));
        m.train_non_mlp = true;
        return m;
    }

    static FreezeMask neurons_only(NeuronSet neurons) {
        normalize_set(neurons);
        return {std::move(neurons), false};
    }

    void validate(const ModelConfig& cfg) const {
        for (const auto& n : trainable_neurons) {
            if (!cfg.valid(n)) throw Error("freeze mask: invalid neuron " + to_string(n));
        }
    }
};

struct TrainResult {
    ToyTransformer model;
    std::vector<double> losses;  // mean loss per step
};

namespace detail {

// 1 where the parameter may change, in for_each_param order.
inline std::vector<std::vector<char>> trainable_flags(const ToyTransformer& m, const FreezeMask& mask) {
    std::vector<std::vector<char>> flags;
    std::vector<std::vector<char>> neuron_on(m.config.n_layers, std::vector<char>(m.config.d_ff, 0));
    for (const auto& n : mask.trainable_neurons) neuron_on[n.layer][n.pos] = 1;
    m.for_each_param([&](const std::string& name, const Matrix& p) {
        std::vector<char> f(p.v.size(), mask.train_non_mlp ? 1 : 0);
        const bool fc_w = name.ends_with("mlp.c_fc.weight");
        const bool fc_b = name.ends_with("mlp.c_fc.bias");
        const bool proj_w = name.ends_with("mlp.c_proj.weight");
        if (fc_w || fc_b || proj_w) {
            const std::size_t layer = std::stoul(name.substr(2, name.find('.', 2) - 2));
            const auto& on = neuron_on[layer];
            for (std::size_t r = 0; r < p.rows; ++r) {
                for (std::size_t c = 0; c < p.cols; ++c) {
                    const std::size_t j = proj_w ? r : c;
                    f[r * p.cols + c] = on[j];
                }
            }
        }
        flags.push_back(std::move(f));
    });
    return flags;
}

inline void collect(ToyTransformer& m, std::vector<Matrix*>& out) {
    m.for_each_param([&](const std::string&, Matrix& p) { out.push_back(&p); });
}

}  // namespace detail

/// Summed next-token cross-entropy of one sequence (or of its last token
/// only), with gradients accumulated into `grads` scaled by `weight`.
inline double sequence_loss(const ToyTransformer& m, const Tokens& seq, double weight,
                            ToyTransformer* grads, bool last_token_only = false) {
    const ForwardPass f = forward_pass(m, seq);
    const std::size_t T = seq.size();
    Matrix dlogits(T, m.config.vocab_size);
    double loss = 0.0;
    for (std::size_t t = last_token_only ? T - 2 : 0; t + 1 < T; ++t) {
        const auto p = detail::softmax(f.logits.row(t));
        const auto target = static_cast<std::size_t>(seq[t + 1]);
        loss -= std::log(std::max(p[target], 1e-300));
        for (std::size_t v = 0; v < p.size(); ++v) {
            dlogits(t, v) = weight * (p[v] - (v == target ? 1.0 : 0.0));
        }
    }
    if (grads) backward_pass(m, f, {}, dlogits, grads, nullptr);
    return loss;
}

/// Adam (or plain SGD) with global-norm clipping over the trainable entries. Frozen entries
/// are never written.
inline TrainResult train(const ToyTransformer& start, const std::vector<Tokens>& corpus,
                         const TrainParams& hp, const FreezeMask& mask) {
    if (corpus.empty()) throw Error("train: empty corpus");
    mask.validate(start.config);
    for (const auto& s : corpus) {
        check_tokens(start.config, s);
        if (s.size() < 2) throw Error("train: sequence shorter than 2 tokens");
    }

    TrainResult out{start, {}};
    ToyTransformer& model = out.model;
    const auto flags = detail::trainable_flags(model, mask);
    ToyTransformer m1 = ToyTransformer::zeros(model.config);
    ToyTransformer m2 = ToyTransformer::zeros(model.config);
    std::vector<Matrix*> params, mom1, mom2;
    detail::collect(model, params);
    detail::collect(m1, mom1);
    detail::collect(m2, mom2);

    Rng rng = make_rng(hp.seed, "train-batches");
    for (std::size_t step = 0; step < hp.steps; ++step) {
        ToyTransformer grads = ToyTransformer::zeros(model.config);
        std::vector<std::size_t> batch(hp.batch);
        std::size_t targets = 0;
        for (auto& b : batch) {
            b = uniform_index(rng, corpus.size());
            targets += hp.last_token_only ? 1 : corpus[b].size() - 1;
        }
        const double w = 1.0 / static_cast<double>(targets);
        double loss = 0.0;
        for (std::size_t b : batch) loss += sequence_loss(model, corpus[b], w, &grads, hp.last_token_only);
        loss *= w;
        if (!std::isfinite(loss)) {
            throw NumericError("train: non-finite loss at step " + std::to_string(step));
        }
        out.losses.push_back(loss);

        std::vector<Matrix*> g;
        detail::collect(grads, g);
        double norm2 = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) {
            for (std::size_t i = 0; i < g[k]->v.size(); ++i) {
                if (flags[k][i]) norm2 += g[k]->v[i] * g[k]->v[i];
            }
        }
        const double norm = std::sqrt(norm2);
        const double clip = norm > hp.clip && norm > 0.0 ? hp.clip / norm : 1.0;
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(hp.beta1, t);
        const double bc2 = 1.0 - std::pow(hp.beta2, t);
        for (std::size_t k = 0; k < g.size(); ++k) {
            auto& p = params[k]->v;
            auto& a = mom1[k]->v;
            auto& b = mom2[k]->v;
            const auto& gk = g[k]->v;
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (!flags[k][i]) continue;
                const double gi = gk[i] * clip;
                if (hp.optimizer == Optimizer::sgd) {
                    p[i] -= hp.lr * gi;
                    continue;
                }
                a[i] = hp.beta1 * a[i] + (1.0 - hp.beta1) * gi;
                b[i] = hp.beta2 * b[i] + (1.0 - hp.beta2) * gi * gi;
                p[i] -= hp.lr * (a[i] / bc1) / (std::sqrt(b[i] / bc2) + hp.eps);
            }
        }
    }
    if (!model.all_finite()) throw NumericError("train: parameters became non-finite");
    return out;
}

}  // namespace dkn
