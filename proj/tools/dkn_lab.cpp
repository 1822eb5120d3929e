// dkn-lab: command-line front end for the experiment drivers.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dkn/experiments.hpp"

namespace fs = std::filesystem;
using namespace dkn;

namespace {

struct Options {
    std::string config;
    std::size_t jobs = 0;
    std::string out;
    std::vector<std::uint64_t> seeds;
    bool figure_data = false;
    bool dump_dendrogram = false;
};

struct Context {
    ExperimentConfig cfg;
    fs::path root;
    bool figure_data = false;
    bool dump_dendrogram = false;

    fs::path seed_dir(std::uint64_t s) const { return root / ("seed-" + std::to_string(s)); }
};

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    write_file(p.string(), text);
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

// CSV outputs carry their provenance on a leading comment line.
void write_csv(const fs::path& p, const nlohmann::json& prov, const std::string& body) {
    write_text(p, "# " + prov.dump() + "\n" + body);
}

nlohmann::json read_json(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) {
        throw MissingPrerequisite(p.string() + " not found; run `dkn-lab " + producer + "` first");
    }
    return nlohmann::json::parse(read_file(p.string()));
}

void check_stage(const nlohmann::json& j, const Context& c, const std::string& stage, const std::string& producer) {
    if (j.value("stage_hash", "") != c.cfg.stage_hash(stage)) {
        throw MissingPrerequisite("artifact from `dkn-lab " + producer +
                                  "` was built with a different configuration; rerun it");
    }
}

/// Data, model and vocabulary from a previous train run.
Lab open_lab(const Context& c, std::uint64_t seed) {
    const fs::path dir = c.seed_dir(seed);
    if (!fs::exists(dir / "data" / "facts.jsonl")) {
        throw MissingPrerequisite("no dataset under " + dir.string() + "; run `dkn-lab gen-corpus` first");
    }
    if (!fs::exists(dir / "model" / "manifest.json")) {
        throw MissingPrerequisite("no model under " + dir.string() + "; run `dkn-lab train` first");
    }
    World w = load_world(dir / "data");
    LoadedModel m = load_model(dir / "model");
    check_stage(m.manifest, c, "model", "train");
    if (m.vocab.words() != build_vocab(w).words()) throw Error("model vocabulary does not match the dataset");
    return Lab(c.cfg, seed, std::move(w), std::move(m.vocab), std::move(m.model));
}

void adopt_dkns(const Context& c, Lab& lab) {
    const auto report = read_json(c.seed_dir(lab.seed()) / "dkns.json", "locate");
    check_stage(report, c, "locate", "locate");
    adopt_locate_report(lab, report);
}

void write_manifest(const Context& c, std::uint64_t seed, const std::string& command, double seconds,
                    const std::vector<std::string>& outputs) {
    write_json(c.seed_dir(seed) / ("run-" + command + ".json"),
               {{"command", command},
                {"seed", seed},
                {"config_hash", c.cfg.hash()},
                {"wall_time_s", seconds},
                {"outputs", outputs},
                {"provenance", provenance(c.cfg, seed)}});
}

using Step = std::vector<std::string> (*)(const Context&, std::uint64_t);

std::vector<std::string> cmd_gen_corpus(const Context& c, std::uint64_t seed) {
    const World w = make_world(c.cfg, seed);
    const fs::path dir = c.seed_dir(seed) / "data";
    write_world(dir, w);
    write_json(dir / "dataset.json", {{"provenance", provenance(c.cfg, seed)},
                                      {"stage_hash", c.cfg.stage_hash("data")},
                                      {"facts", w.facts.size()},
                                      {"paraphrases", w.paraphrases.size()},
                                      {"q_new", w.q_new.size()},
                                      {"vocabulary", w.vocabulary.size()}});
    return {"data/facts.jsonl", "data/paraphrases.jsonl", "data/q_new.jsonl", "data/q_au.jsonl", "data/corpus.txt", "data/vocab.txt",
            "data/dataset.json"};
}

std::vector<std::string> cmd_train(const Context& c, std::uint64_t seed) {
    const fs::path dir = c.seed_dir(seed);
    const auto ds = read_json(dir / "data" / "dataset.json", "gen-corpus");
    check_stage(ds, c, "data", "gen-corpus");
    const World w = load_world(dir / "data");
    const Vocab v = build_vocab(w);
    const ModelConfig mc = c.cfg.model_config(v.size(), seed);
    TrainParams hp = c.cfg.train;
    hp.seed = seed;
    const TrainResult r = train(ToyTransformer::init(mc), encode_lines(v, w.corpus_lines), hp, FreezeMask::all(mc));
    save_model(dir / "model", r.model, v, std::string("toy-") + to_string(c.cfg.model), DType::float64,
               {{"stage_hash", c.cfg.stage_hash("model")}, {"provenance", provenance(c.cfg, seed)}});
    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < r.losses.size(); ++i) csv += std::to_string(i) + "," + std::to_string(r.losses[i]) + "\n";
    write_csv(dir / "train_loss.csv", provenance(c.cfg, seed), csv);
    const Lab lab(c.cfg, seed, w, v, r.model);
    write_json(dir / "train.json", {{"provenance", lab.provenance()},
                                    {"final_loss", r.losses.back()},
                                    {"parameters", mc.parameter_count()},
                                    {"mastered", lab.mastered().size()},
                                    {"facts", lab.queries().size()}});
    return {"model/manifest.json", "model/weights.bin", "train_loss.csv", "train.json"};
}

std::vector<std::string> cmd_locate(const Context& c, std::uint64_t seed) {
    Lab lab = open_lab(c, seed);
    write_json(c.seed_dir(seed) / "dkns.json", run_locate(lab, c.dump_dendrogram));
    return {"dkns.json"};
}

std::vector<std::string> cmd_sweep(const Context& c, std::uint64_t seed) {
    Lab lab = open_lab(c, seed);
    adopt_dkns(c, lab);
    const auto rep = run_degeneracy(lab);
    nlohmann::json facts = nlohmann::json::array();
    std::string csv;
    for (const auto& s : rep.sweeps) {
        facts.push_back(to_json(s, c.figure_data));
        const std::string body = to_csv(s);
        csv += csv.empty() ? body : body.substr(body.find('\n') + 1);
    }
    write_json(c.seed_dir(seed) / "sweep.json",
               {{"provenance", lab.provenance()}, {"summary", to_json(rep.summary)}, {"facts", facts}});
    write_csv(c.seed_dir(seed) / "sweep.csv", lab.provenance(), csv);
    return {"sweep.json", "sweep.csv"};
}

std::vector<std::string> cmd_perturb(const Context& c, std::uint64_t seed) {
    Lab lab = open_lab(c, seed);
    adopt_dkns(c, lab);
    const auto rep = run_robustness(lab);
    std::string all = nlohmann::json{{"provenance", lab.provenance()}}.dump() + "\n";
    std::size_t k = 0;
    for (const auto& p : rep.perturbed) {
        auto j = to_json(p, lab.vocab());
        j["fact"] = rep.perturbed_fact[k++];
        all += j.dump() + "\n";
    }
    write_text(c.seed_dir(seed) / "perturbed.jsonl", all);
    write_text(c.seed_dir(seed) / "q_err.jsonl",
               nlohmann::json{{"provenance", lab.provenance()}}.dump() + "\n" + errors_jsonl(rep.harvest, lab.vocab()));
    write_json(c.seed_dir(seed) / "robustness.json", {{"provenance", lab.provenance()}, {"results", to_json(rep)}});
    return {"perturbed.jsonl", "q_err.jsonl", "robustness.json"};
}

std::vector<std::string> cmd_factcheck(const Context& c, std::uint64_t seed) {
    Lab lab = open_lab(c, seed);
    adopt_dkns(c, lab);
    write_json(c.seed_dir(seed) / "factcheck.json",
               {{"provenance", lab.provenance()}, {"results", to_json(run_factcheck(lab))}});
    return {"factcheck.json"};
}

std::vector<std::string> cmd_evolve(const Context& c, std::uint64_t seed) {
    Lab lab = open_lab(c, seed);
    const auto rep = run_evolution(lab);
    write_json(c.seed_dir(seed) / "evolve.json", {{"provenance", lab.provenance()}, {"results", to_json(rep)}});
    write_csv(c.seed_dir(seed) / "overlap.csv", lab.provenance(), overlap_csv(rep));
    return {"evolve.json", "overlap.csv"};
}

int run_per_seed(const Context& c, const std::vector<std::uint64_t>& seeds, const std::string& name, Step step) {
    for (std::uint64_t seed : seeds) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto outputs = step(c, seed);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_manifest(c, seed, name, secs, outputs);
        std::cout << name << " seed " << seed << ": " << outputs.size() << " file(s) in " << c.seed_dir(seed).string()
                  << " (" << secs << " s)\n";
    }
    return 0;
}

int cmd_compare_sizes(const Context& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = compare_sizes(c.cfg);
    nlohmann::json js = nlohmann::json::array();
    std::string csv = "size,experiment,parameters,metrics\n";
    for (const auto& r : rows) {
        js.push_back(to_json(r));
        std::string m = r.metrics.dump();
        std::string quoted;
        for (char ch : m) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        csv += r.size + "," + r.experiment + "," + std::to_string(r.parameters) + ",\"" + quoted + "\"\n";
    }
    const auto prov = provenance(c.cfg, c.cfg.seeds.front());
    write_json(c.root / "compare_sizes.json", {{"provenance", prov}, {"rows", js}});
    write_csv(c.root / "compare_sizes.csv", prov, csv);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(c.root / "run-compare-sizes.json",
               {{"command", "compare-sizes"}, {"seed", c.cfg.seeds.front()}, {"config_hash", c.cfg.hash()},
                {"wall_time_s", secs}, {"outputs", {"compare_sizes.json", "compare_sizes.csv"}}, {"provenance", prov}});
    std::cout << "compare-sizes: " << rows.size() << " rows in " << c.root.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Degenerate knowledge neuron lab"};
    app.require_subcommand(1);
    Options opt;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "TOML experiment config")->required();
        sub->add_option("--jobs", opt.jobs, "worker threads (overrides run.jobs)")->check(CLI::PositiveNumber);
        sub->add_option("--out", opt.out, "output directory (overrides run.out)");
        sub->add_option("--seed", opt.seeds, "restrict to these seeds");
        sub->add_flag("--figure-data", opt.figure_data, "emit plotting series");
    };
    struct Cmd {
        const char* name;
        const char* help;
        Step step;
    };
    const std::vector<Cmd> cmds{
        {"gen-corpus", "write the dataset for each seed", cmd_gen_corpus},
        {"train", "train the toy model on the dataset", cmd_train},
        {"locate", "attribute, cluster and filter DKNs for every mastered fact", cmd_locate},
        {"sweep", "suppress every subset of each DKN set", cmd_sweep},
        {"perturb", "perturbed-query suppression and enhancement", cmd_perturb},
        {"factcheck", "relation and golden DKN fact checking", cmd_factcheck},
        {"evolve", "parameter-change overlap and freeze-masked fine-tuning", cmd_evolve},
    };
    std::vector<CLI::App*> subs;
    for (const auto& c : cmds) {
        subs.push_back(app.add_subcommand(c.name, c.help));
        common(subs.back());
    }
    subs[2]->add_flag("--dump-dendrogram", opt.dump_dendrogram, "include each fact's merge tree");
    CLI::App* compare = app.add_subcommand("compare-sizes", "run every suite on SMALL and LARGE");
    common(compare);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ErrorCode::config);
    }

    try {
        Context ctx;
        ctx.cfg = ExperimentConfig::load(opt.config);
        if (opt.jobs) ctx.cfg.jobs = opt.jobs;
        ctx.root = opt.out.empty() ? fs::path(ctx.cfg.out) : fs::path(opt.out);
        ctx.figure_data = opt.figure_data;
        ctx.dump_dendrogram = opt.dump_dendrogram;
        const auto seeds = opt.seeds.empty() ? ctx.cfg.seeds : opt.seeds;
        if (compare->parsed()) return cmd_compare_sizes(ctx);
        for (std::size_t i = 0; i < cmds.size(); ++i) {
            if (subs[i]->parsed()) return run_per_seed(ctx, seeds, cmds[i].name, cmds[i].step);
        }
        return 1;
    } catch (const dkn::Error& e) {
        std::cerr << "dkn-lab: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "dkn-lab: " << e.what() << "\n";
        return static_cast<int>(ErrorCode::generic);
    }
}
