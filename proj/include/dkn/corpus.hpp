#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/core.hpp"
#include "dkn/tokenizer.hpp"

namespace dkn {

inline constexpr const char* kBlank = "_X_";

/// One fact in TempLama layout. `query` holds exactly one blank marker; the
/// prompt fed to the model is the text before it.
struct FactRecord {
    std::string relation;
    std::string date;
    std::string query;
    std::string answer;
    std::string subject;        // optional
    std::string template_text;  // optional; placeholders {subject} and {date}

    void validate() const {
        const auto first = query.find(kBlank);
        if (first == std::string::npos || query.find(kBlank, first + 1) != std::string::npos) {
            throw Error("fact query must contain exactly one " + std::string(kBlank) + ": '" + query + "'");
        }
        if (split_words(answer).size() != 1) {
            throw Error("fact answer must be a single token: '" + answer + "'");
        }
    }

    std::string prompt() const {
        const auto pos = query.find(kBlank);
        std::string p = pos == std::string::npos ? query : query.substr(0, pos);
        while (!p.empty() && p.back() == ' ') p.pop_back();
        return p;
    }

    std::string id() const { return relation + "|" + date + "|" + query; }

    friend bool operator==(const FactRecord&, const FactRecord&) = default;
};

inline nlohmann::json to_json(const FactRecord& r) {
    nlohmann::json j{{"relation", r.relation}, {"date", r.date}, {"query", r.query}, {"answer", r.answer}};
    if (!r.subject.empty()) j["subject"] = r.subject;
    if (!r.template_text.empty()) j["template"] = r.template_text;
    return j;
}

inline FactRecord fact_from_json(const nlohmann::json& j) {
    FactRecord r;
    r.relation = j.at("relation").get<std::string>();
    r.date = j.contains("date") && !j["date"].is_null() ? j["date"].get<std::string>() : "";
    r.query = j.at("query").get<std::string>();
    // TempLama exports carry the answer as a list of {name} objects.
    const auto& a = j.at("answer");
    if (a.is_string()) {
        r.answer = a.get<std::string>();
    } else if (a.is_array() && !a.empty()) {
        r.answer = a[0].is_object() ? a[0].at("name").get<std::string>() : a[0].get<std::string>();
    } else {
        throw Error("fact record: unsupported answer field");
    }
    if (j.contains("subject")) r.subject = j["subject"].get<std::string>();
    if (j.contains("template")) r.template_text = j["template"].get<std::string>();
    r.validate();
    return r;
}

inline std::string to_jsonl(const std::vector<FactRecord>& records) {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
}

inline std::vector<FactRecord> parse_jsonl(const std::string& text) {
    std::vector<FactRecord> out;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
            out.push_back(fact_from_json(nlohmann::json::parse(line)));
        }
        start = end + 1;
    }
    return out;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << content;
}

inline std::vector<FactRecord> load_jsonl(const std::string& path) { return parse_jsonl(read_file(path)); }

// ---------------------------------------------------------------------------
// Synthetic corpus

struct CorpusSpec {
    std::size_t n_relations = 4;
    std::size_t n_subjects = 24;
    std::size_t n_answers = 6;               // answer pool per relation
    std::size_t templates_per_relation = 2;  // template 0 is canonical, others paraphrase
    std::size_t timestamp_updates = 2;       // updated facts per relation
    std::uint64_t seed = 1;

    void validate() const {
        if (n_relations < 1 || n_subjects < 1 || n_answers < 1 || templates_per_relation < 1) {
            throw ConfigError("corpus: counts must be >= 1");
        }
        if (n_relations > 12) throw ConfigError("corpus: at most 12 relations");
        if (templates_per_relation > 4) throw ConfigError("corpus: at most 4 templates per relation");
        if (timestamp_updates > n_subjects) throw ConfigError("corpus: more updates than subjects");
        if (timestamp_updates > 0 && n_answers < 2) {
            throw ConfigError("corpus: updates need at least 2 answers per relation");
        }
    }
};

/// Generated world: current knowledge, its paraphrases, and the
/// old -> new update set.
struct World {
    std::vector<FactRecord> facts;        // canonical template, pre-update knowledge
    std::vector<FactRecord> paraphrases;  // same facts under templates 1..K-1
    std::vector<FactRecord> q_new;        // updated facts, new date, canonical template
    std::vector<FactRecord> q_au;         // q_new under the first paraphrase template
    std::vector<std::size_t> updated;     // indices into `facts` that receive an update
    std::vector<std::string> corpus_lines;
    std::vector<std::string> vocabulary;  // every word the world can emit

    static std::string line(const FactRecord& r) { return r.prompt() + " " + r.answer; }
};

namespace detail {

inline const std::vector<std::vector<std::string>>& relation_words() {
    static const std::vector<std::vector<std::string>> words{
        {"capital", "seat", "hub", "centre"},        {"founder", "creator", "builder", "maker"},
        {"language", "tongue", "speech", "dialect"}, {"currency", "money", "coin", "tender"},
        {"leader", "chief", "ruler", "boss"},        {"sport", "game", "pastime", "match"},
        {"anthem", "song", "hymn", "tune"},          {"river", "stream", "brook", "creek"},
        {"export", "product", "good", "ware"},       {"religion", "faith", "creed", "belief"},
        {"climate", "weather", "season", "sky"},     {"mascot", "symbol", "emblem", "token"},
    };
    return words;
}

// Prompt patterns; every one ends with the blank.
inline const std::vector<std::string>& template_patterns() {
    static const std::vector<std::string> t{
        "in {date} the {rel} of {subject} is _X_",
        "in {date} {subject} has {rel} _X_",
        "{subject} {rel} in {date} was _X_",
        "the {rel} for {subject} in {date} is _X_",
    };
    return t;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
    return s;
}

inline const std::vector<std::string>& dates() {
    static const std::vector<std::string> d{"2017", "2018", "2019", "2020", "2021"};
    return d;
}

}  // namespace detail

inline FactRecord make_fact(std::size_t relation, std::size_t tmpl, const std::string& subject,
                            const std::string& date, const std::string& answer) {
    std::string t = detail::replace_all(detail::template_patterns()[tmpl], "{rel}",
                                        detail::relation_words()[relation][tmpl]);
    FactRecord r;
    r.relation = "P" + std::to_string(relation);
    r.date = date;
    r.subject = subject;
    r.template_text = t;
    r.query = detail::replace_all(detail::replace_all(t, "{subject}", subject), "{date}", date);
    r.answer = answer;
    return r;
}

inline std::string answer_token(std::size_t relation, std::size_t k) {
    return detail::relation_words()[relation][0] + "_" + std::to_string(k);
}

inline World gen_corpus(const CorpusSpec& spec) {
    spec.validate();
    Rng rng = make_rng(spec.seed, "corpus");
    const auto& dates = detail::dates();
    World w;
    std::set<std::string> vocab;

    for (std::size_t r = 0; r < spec.n_relations; ++r) {
        for (std::size_t k = 0; k < spec.n_answers; ++k) vocab.insert(answer_token(r, k));
        std::vector<std::size_t> order(spec.n_subjects);
        for (std::size_t s = 0; s < order.size(); ++s) order[s] = s;
        shuffle(order, rng);
        std::set<std::size_t> to_update(order.begin(), order.begin() + static_cast<long>(spec.timestamp_updates));

        for (std::size_t s = 0; s < spec.n_subjects; ++s) {
            const std::string subject = "ent" + std::to_string(s);
            const std::size_t ans = uniform_index(rng, spec.n_answers);
            const bool update = to_update.count(s) != 0;
            const std::string date = update ? dates[uniform_index(rng, 3)] : dates[uniform_index(rng, dates.size())];
            w.facts.push_back(make_fact(r, 0, subject, date, answer_token(r, ans)));
            for (std::size_t t = 1; t < spec.templates_per_relation; ++t) {
                w.paraphrases.push_back(make_fact(r, t, subject, date, answer_token(r, ans)));
            }
            if (update) {
                std::size_t fresh = uniform_index(rng, spec.n_answers - 1);
                if (fresh >= ans) ++fresh;
                const std::string new_date = dates[3 + uniform_index(rng, 2)];
                w.updated.push_back(w.facts.size() - 1);
                w.q_new.push_back(make_fact(r, 0, subject, new_date, answer_token(r, fresh)));
                w.q_au.push_back(make_fact(r, spec.templates_per_relation > 1 ? 1 : 0, subject, new_date,
                                           answer_token(r, fresh)));
            }
        }
    }
    for (const auto& f : w.facts) w.corpus_lines.push_back(World::line(f));
    for (const auto& f : w.paraphrases) w.corpus_lines.push_back(World::line(f));

    auto add_words = [&](const std::vector<FactRecord>& rs) {
        for (const auto& r : rs) {
            for (const auto& word : split_words(r.prompt())) vocab.insert(word);
            vocab.insert(r.answer);
        }
    };
    add_words(w.facts);
    add_words(w.paraphrases);
    add_words(w.q_new);
    add_words(w.q_au);
    for (const auto& reserved : {kEos, kPad, kReplace, kAdd}) {
        if (vocab.count(reserved)) throw Error("corpus word collides with reserved token");
    }
    w.vocabulary.assign(vocab.begin(), vocab.end());
    return w;
}

inline Vocab build_vocab(const World& w) { return Vocab(w.vocabulary); }

/// Tokenised prompt and single answer token for a fact.
struct EncodedFact {
    Tokens prompt;
    int answer = 0;
};

inline EncodedFact encode(const Vocab& vocab, const FactRecord& r) {
    r.validate();
    return {vocab.encode(r.prompt()), vocab.id(r.answer)};
}

inline std::vector<Tokens> encode_lines(const Vocab& vocab, const std::vector<std::string>& lines) {
    std::vector<Tokens> out;
    for (const auto& l : lines) out.push_back(vocab.encode(l));
    return out;
}

}  // namespace dkn
