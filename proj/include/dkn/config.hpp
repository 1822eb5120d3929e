#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "dkn/corpus.hpp"
#include "dkn/evolution.hpp"
#include "dkn/factcheck.hpp"
#include "dkn/weights_io.hpp"

namespace dkn {

enum class ModelSize { small, large };

inline const char* to_string(ModelSize s) { return s == ModelSize::small ? "small" : "large"; }

inline ModelSize parse_model_size(const std::string& s) {
    if (s == "small") return ModelSize::small;
    if (s == "large") return ModelSize::large;
    throw ConfigError("run.model must be \"small\" or \"large\", got '" + s + "'");
}

inline const char* to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }

inline Optimizer parse_optimizer(const std::string& s) {
    if (s == "adam") return Optimizer::adam;
    if (s == "sgd") return Optimizer::sgd;
    throw ConfigError("optimizer must be \"adam\" or \"sgd\", got '" + s + "'");
}

struct RobustnessParams {
    std::string suppress = "zero-values";
    std::string enhance = "scale-values";
    double enhance_factor = 2.0;
    std::size_t random_draws = 5;  // random-matched baselines averaged per fact
};

struct FactcheckParams {
    double split_ratio = 0.5;
    double tau3_factor = kDefaultTau3Factor;
    std::size_t tau4_candidates = 101;
};

struct EvolveParams {
    TrainParams finetune = [] {
        TrainParams t;
        // Plain SGD on the answer token keeps the update local enough that
        // the changed-parameter set is not the whole MLP.
        t.optimizer = Optimizer::sgd;
        t.lr = 0.05;
        t.steps = 200;
        t.batch = 16;
        t.last_token_only = true;
        return t;
    }();
    double delta_factor_small = kSmallDeltaFactor;
    double delta_factor_large = kLargeDeltaFactor;
    std::size_t random_draws = 5;
};

struct ExperimentConfig {
    std::string name = "default";
    ModelSize model = ModelSize::small;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t jobs = 1;
    std::string out = "runs";
    std::string data_dir;    // TempLama-style JSONL instead of the synthetic corpus
    std::size_t max_facts = 0;  // cap on localised facts per seed, 0 = all

    CorpusSpec corpus;
    double init_std = 0.05;
    double mlp_init_std = 0.15;  // sparser GELU activations, less diffuse attribution
    std::size_t max_seq = 16;
    TrainParams train = [] {
        TrainParams t;
        t.steps = 300;
        return t;
    }();
    LocateParams locate;
    std::string sweep_mode = "zero-values";
    double sweep_factor = 2.0;
    SweepParams sweep;
    RobustnessParams robustness;
    FactcheckParams factcheck;
    EvolveParams evolve;

    double delta_factor() const {
        return model == ModelSize::small ? evolve.delta_factor_small : evolve.delta_factor_large;
    }

    ModelConfig model_config(std::size_t vocab, std::uint64_t seed) const {
        ModelConfig c = model == ModelSize::small ? ModelConfig::small(vocab, seed, max_seq)
                                                  : ModelConfig::large(vocab, seed, max_seq);
        c.init_std = init_std;
        c.mlp_init_std = mlp_init_std;
        c.validate();
        return c;
    }

    void validate() const;
    nlohmann::json to_json() const;
    std::string hash() const { return sha256_hex(to_json().dump()); }

    /// Hash of the sections that determine one pipeline artifact, so that
    /// editing e.g. [evolve] does not invalidate a trained model.
    std::string stage_hash(const std::string& stage) const;

    static ExperimentConfig from_toml(std::string_view text, const std::string& source = "config");
    static ExperimentConfig load(const std::string& path);
};

namespace detail {

inline void check(bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
}

inline void check_train(const TrainParams& t, const std::string& sec) {
    check(t.steps >= 1 && t.batch >= 1, sec + ": steps and batch must be >= 1");
    check(t.lr > 0.0 && std::isfinite(t.lr), sec + ".lr must be positive");
    check(t.clip > 0.0, sec + ".clip must be positive");
    check(t.beta1 >= 0.0 && t.beta1 < 1.0 && t.beta2 >= 0.0 && t.beta2 < 1.0, sec + ": betas must be in [0, 1)");
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
    using detail::check;
    check(!seeds.empty(), "run.seeds must not be empty");
    check(jobs >= 1, "run.jobs must be >= 1");
    corpus.validate();
    check(init_std > 0.0 && mlp_init_std > 0.0, "model: init scales must be positive");
    check(max_seq >= 8, "model.max_seq must be >= 8");
    detail::check_train(train, "train");
    detail::check_train(evolve.finetune, "evolve");
    check(locate.steps >= 1, "attribution.steps must be >= 1");
    check(locate.kn_factor >= 0.0 && locate.kn_factor <= 1.0, "attribution.kn_factor must be in [0, 1]");
    check(locate.ntc.tau1_factor > 0.0 && locate.ntc.tau1_factor <= 1.0, "ntc.tau1_factor must be in (0, 1]");
    check(locate.ntc.tau2 >= 0.0 && locate.ntc.tau2 <= 1.0, "ntc.tau2 must be in [0, 1]");
    SuppressionMode::parse(sweep_mode, sweep_factor).validate();
    check(sweep.exhaustive_limit >= 1 && sweep.exhaustive_limit <= 12, "sweep.exhaustive_limit must be in [1, 12]");
    check(sweep.random_subsets >= 1, "sweep.random_subsets must be >= 1");
    SuppressionMode::parse(robustness.suppress, 0.0).validate();
    SuppressionMode::parse(robustness.enhance, robustness.enhance_factor).validate();
    check(robustness.random_draws >= 1, "robustness.random_draws must be >= 1");
    check(factcheck.split_ratio > 0.0 && factcheck.split_ratio < 1.0, "factcheck.split_ratio must be in (0, 1)");
    check(factcheck.tau3_factor >= 0.0 && factcheck.tau3_factor <= 1.0, "factcheck.tau3_factor must be in [0, 1]");
    check(factcheck.tau4_candidates >= 2, "factcheck.tau4_candidates must be >= 2");
    check(evolve.delta_factor_small > 0.0 && evolve.delta_factor_small < 1.0 && evolve.delta_factor_large > 0.0 &&
              evolve.delta_factor_large < 1.0,
          "evolve delta factors must be in (0, 1)");
    check(evolve.random_draws >= 1, "evolve.random_draws must be >= 1");
}

inline nlohmann::json to_json(const TrainParams& t) {
    return {{"optimizer", to_string(t.optimizer)}, {"steps", t.steps},   {"batch", t.batch},
            {"lr", t.lr},                          {"beta1", t.beta1},   {"beta2", t.beta2},
            {"eps", t.eps},                        {"clip", t.clip},     {"last_token_only", t.last_token_only}};
}

inline nlohmann::json ExperimentConfig::to_json() const {
    using nlohmann::json;
    return json{
        {"run",
         {{"name", name},
          {"model", to_string(model)},
          {"seeds", seeds},
          {"jobs", jobs},
          {"out", out},
          {"data_dir", data_dir},
          {"max_facts", max_facts}}},
        {"corpus",
         {{"n_relations", corpus.n_relations},
          {"n_subjects", corpus.n_subjects},
          {"n_answers", corpus.n_answers},
          {"templates_per_relation", corpus.templates_per_relation},
          {"timestamp_updates", corpus.timestamp_updates}}},
        {"model", {{"init_std", init_std}, {"mlp_init_std", mlp_init_std}, {"max_seq", max_seq}}},
        {"train", dkn::to_json(train)},
        {"attribution", {{"steps", locate.steps}, {"kn_factor", locate.kn_factor}}},
        {"ntc",
         {{"tau1_factor", locate.ntc.tau1_factor},
          {"tau2", locate.ntc.tau2},
          {"finest_only", locate.ntc.finest_only}}},
        {"sweep",
         {{"mode", sweep_mode},
          {"factor", sweep_factor},
          {"exhaustive_limit", sweep.exhaustive_limit},
          {"random_subsets", sweep.random_subsets},
          {"exclusion_limit", kExclusionLimit}}},
        {"robustness",
         {{"suppress", robustness.suppress},
          {"enhance", robustness.enhance},
          {"enhance_factor", robustness.enhance_factor},
          {"random_draws", robustness.random_draws}}},
        {"factcheck",
         {{"split_ratio", factcheck.split_ratio},
          {"tau3_factor", factcheck.tau3_factor},
          {"tau4_candidates", factcheck.tau4_candidates}}},
        {"evolve",
         {{"finetune", dkn::to_json(evolve.finetune)},
          {"delta_factor_small", evolve.delta_factor_small},
          {"delta_factor_large", evolve.delta_factor_large},
          {"random_draws", evolve.random_draws}}},
    };
}

inline std::string ExperimentConfig::stage_hash(const std::string& stage) const {
    const nlohmann::json j = to_json();
    nlohmann::json part{{"data_dir", j["run"]["data_dir"]}, {"corpus", j["corpus"]}};
    if (stage == "data") return sha256_hex(part.dump());
    part["size"] = j["run"]["model"];
    part["model"] = j["model"];
    part["train"] = j["train"];
    if (stage == "model") return sha256_hex(part.dump());
    part["max_facts"] = j["run"]["max_facts"];
    part["attribution"] = j["attribution"];
    part["ntc"] = j["ntc"];
    if (stage == "locate") return sha256_hex(part.dump());
    throw Error("unknown pipeline stage '" + stage + "'");
}

namespace detail {

class TomlSection {
public:
    TomlSection(const toml::table& root, std::string name, std::set<std::string> keys) : name_(std::move(name)) {
        const toml::node* n = root.get(name_);
        if (!n) return;
        t_ = n->as_table();
        if (!t_) throw ConfigError("[" + name_ + "] must be a table");
        for (const auto& [k, v] : *t_) {
            if (!keys.count(std::string(k.str()))) throw ConfigError("unknown key " + name_ + "." + std::string(k.str()));
        }
    }

    template <class T>
    void get(const char* key, T& out) const {
        if (!t_) return;
        const toml::node* n = t_->get(key);
        if (!n) return;
        out = convert<T>(*n, key);
    }

    void get(const char* key, Optimizer& out) const {
        std::string s;
        get(key, s);
        if (!s.empty()) out = parse_optimizer(s);
    }

    void get_seeds(const char* key, std::vector<std::uint64_t>& out) const {
        if (!t_ || !t_->get(key)) return;
        const auto* arr = t_->get(key)->as_array();
        if (!arr) throw ConfigError(where(key) + " must be an array of integers");
        out.clear();
        for (const auto& el : *arr) out.push_back(convert<std::uint64_t>(el, key));
    }

private:
    std::string where(const char* key) const { return name_ + "." + key; }

    template <class T>
    T convert(const toml::node& n, const char* key) const {
        if constexpr (std::is_same_v<T, bool>) {
            if (auto v = n.value_exact<bool>()) return *v;
            throw ConfigError(where(key) + " must be a boolean");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (n.is_number()) return static_cast<T>(*n.value<double>());
            throw ConfigError(where(key) + " must be a number");
        } else if constexpr (std::is_integral_v<T>) {
            const auto v = n.value_exact<std::int64_t>();
            if (!v || *v < 0) throw ConfigError(where(key) + " must be a non-negative integer");
            return static_cast<T>(*v);
        } else {
            if (auto v = n.value_exact<std::string>()) return *v;
            throw ConfigError(where(key) + " must be a string");
        }
    }

    std::string name_;
    const toml::table* t_ = nullptr;
};

inline void read_train(const TomlSection& s, TrainParams& t) {
    s.get("optimizer", t.optimizer);
    s.get("steps", t.steps);
    s.get("batch", t.batch);
    s.get("lr", t.lr);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("eps", t.eps);
    s.get("clip", t.clip);
    s.get("last_token_only", t.last_token_only);
}

inline const std::set<std::string> kTrainKeys{"optimizer", "steps", "batch", "lr", "beta1",
                                              "beta2",     "eps",   "clip",  "last_token_only"};

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_toml(std::string_view text, const std::string& source) {
    toml::table root;
    try {
        root = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << source << ": " << e.description() << " (line " << e.source().begin.line << ")";
        throw ConfigError(msg.str());
    }
    static const std::set<std::string> sections{"run",        "corpus",    "model",  "train", "attribution", "ntc",
                                                "sweep",      "robustness", "factcheck", "evolve"};
    for (const auto& [k, v] : root) {
        if (!sections.count(std::string(k.str()))) throw ConfigError("unknown section [" + std::string(k.str()) + "]");
    }
    using detail::TomlSection;
    ExperimentConfig c;

    const TomlSection run(root, "run", {"name", "model", "seeds", "jobs", "out", "data_dir", "max_facts"});
    run.get("name", c.name);
    std::string model = to_string(c.model);
    run.get("model", model);
    c.model = parse_model_size(model);
    run.get_seeds("seeds", c.seeds);
    run.get("jobs", c.jobs);
    run.get("out", c.out);
    run.get("data_dir", c.data_dir);
    run.get("max_facts", c.max_facts);

    const TomlSection corpus(root, "corpus",
                             {"n_relations", "n_subjects", "n_answers", "templates_per_relation", "timestamp_updates"});
    corpus.get("n_relations", c.corpus.n_relations);
    corpus.get("n_subjects", c.corpus.n_subjects);
    corpus.get("n_answers", c.corpus.n_answers);
    corpus.get("templates_per_relation", c.corpus.templates_per_relation);
    corpus.get("timestamp_updates", c.corpus.timestamp_updates);

    const TomlSection mdl(root, "model", {"init_std", "mlp_init_std", "max_seq"});
    mdl.get("init_std", c.init_std);
    mdl.get("mlp_init_std", c.mlp_init_std);
    mdl.get("max_seq", c.max_seq);

    detail::read_train(TomlSection(root, "train", detail::kTrainKeys), c.train);

    const TomlSection attr(root, "attribution", {"steps", "kn_factor"});
    attr.get("steps", c.locate.steps);
    attr.get("kn_factor", c.locate.kn_factor);

    const TomlSection ntc(root, "ntc", {"tau1_factor", "tau2", "finest_only"});
    ntc.get("tau1_factor", c.locate.ntc.tau1_factor);
    ntc.get("tau2", c.locate.ntc.tau2);
    ntc.get("finest_only", c.locate.ntc.finest_only);

    const TomlSection sweep(root, "sweep", {"mode", "factor", "exhaustive_limit", "random_subsets"});
    sweep.get("mode", c.sweep_mode);
    sweep.get("factor", c.sweep_factor);
    sweep.get("exhaustive_limit", c.sweep.exhaustive_limit);
    sweep.get("random_subsets", c.sweep.random_subsets);

    const TomlSection rob(root, "robustness", {"suppress", "enhance", "enhance_factor", "random_draws"});
    rob.get("suppress", c.robustness.suppress);
    rob.get("enhance", c.robustness.enhance);
    rob.get("enhance_factor", c.robustness.enhance_factor);
    rob.get("random_draws", c.robustness.random_draws);

    const TomlSection fc(root, "factcheck", {"split_ratio", "tau3_factor", "tau4_candidates"});
    fc.get("split_ratio", c.factcheck.split_ratio);
    fc.get("tau3_factor", c.factcheck.tau3_factor);
    fc.get("tau4_candidates", c.factcheck.tau4_candidates);

    auto evolve_keys = detail::kTrainKeys;
    evolve_keys.insert({"delta_factor_small", "delta_factor_large", "random_draws"});
    const TomlSection ev(root, "evolve", evolve_keys);
    detail::read_train(ev, c.evolve.finetune);
    ev.get("delta_factor_small", c.evolve.delta_factor_small);
    ev.get("delta_factor_large", c.evolve.delta_factor_large);
    ev.get("random_draws", c.evolve.random_draws);

    c.validate();
    return c;
}

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return from_toml(text, path);
}

}  // namespace dkn
