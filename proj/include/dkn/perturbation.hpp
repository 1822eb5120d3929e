#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dkn/intervention.hpp"

namespace dkn {

enum class PerturbOp { replace, add, del };

inline const char* to_string(PerturbOp op) {
    switch (op) {
        case PerturbOp::replace: return "replace";
        case PerturbOp::add: return "add";
        case PerturbOp::del: return "delete";
    }
    return "?";
}

struct PerturbedQuery {
    Tokens original;
    Tokens perturbed;
    PerturbOp op = PerturbOp::replace;
    std::size_t position = 0;
    std::uint64_t seed = 0;
};

/// Applies one edit to a prompt. The prompt ends right before the blank, so
/// inserting after its last token (at the blank) is not allowed.
inline PerturbedQuery perturb(const Tokens& query, PerturbOp op, std::size_t position, std::uint64_t seed = 0) {
    if (query.empty()) throw Error("perturb: empty query");
    if (position >= query.size()) {
        throw Error("perturb: position " + std::to_string(position) + " is outside the prompt or on the blank");
    }
    if (op == PerturbOp::del && query.size() < 2) throw Error("perturb: delete needs at least 2 tokens");
    PerturbedQuery p{query, query, op, position, seed};
    const Vocab reserved;
    switch (op) {
        case PerturbOp::replace: p.perturbed[position] = reserved.replace_token(); break;
        case PerturbOp::add: p.perturbed.insert(p.perturbed.begin() + static_cast<long>(position), reserved.add_token()); break;
        case PerturbOp::del: p.perturbed.erase(p.perturbed.begin() + static_cast<long>(position)); break;
    }
    return p;
}

/// One perturbation drawn uniformly over every valid (op, position).
inline PerturbedQuery random_perturbation(const Tokens& query, Rng& rng, std::uint64_t seed) {
    const std::size_t n = query.size();
    const std::size_t deletable = n >= 2 ? n : 0;
    const std::size_t pick = uniform_index(rng, 2 * n + deletable);
    if (pick < n) return perturb(query, PerturbOp::replace, pick, seed);
    if (pick < 2 * n) return perturb(query, PerturbOp::add, pick - n, seed);
    return perturb(query, PerturbOp::del, pick - 2 * n, seed);
}

/// Each query gets its own substream so results do not depend on order.
inline std::vector<PerturbedQuery> perturb_all(const std::vector<LabelledQuery>& queries, std::uint64_t seed) {
    std::vector<PerturbedQuery> out;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        Rng rng = make_rng(seed, "perturb/" + std::to_string(i));
        out.push_back(random_perturbation(queries[i].prompt, rng, seed));
    }
    return out;
}

struct HarvestedError {
    std::size_t index = 0;  // into the input queries
    PerturbedQuery query;
    int answer = 0;
};

/// Perturbed queries the unedited model gets wrong although it answered the
/// clean version correctly.
inline std::vector<HarvestedError> harvest_errors(const ToyTransformer& m, const std::vector<LabelledQuery>& queries,
                                                  std::uint64_t seed, std::size_t jobs = 1) {
    const auto perturbed = perturb_all(queries, seed);
    const auto keep = parallel_map(queries.size(), jobs, [&](std::size_t i) {
        const int clean = predict_top1(m, queries[i].prompt);
        const int noisy = predict_top1(m, perturbed[i].perturbed);
        return clean == queries[i].answer && noisy != queries[i].answer ? 1 : 0;
    });
    std::vector<HarvestedError> out;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        if (keep[i]) out.push_back({i, perturbed[i], queries[i].answer});
    }
    return out;
}

inline std::vector<LabelledQuery> as_queries(const std::vector<HarvestedError>& errs) {
    std::vector<LabelledQuery> out;
    for (const auto& e : errs) out.push_back({e.query.perturbed, e.answer});
    return out;
}

inline nlohmann::json to_json(const PerturbedQuery& p, const Vocab& vocab) {
    return {{"original", vocab.decode(p.original)},
            {"perturbed", vocab.decode(p.perturbed)},
            {"op", to_string(p.op)},
            {"position", p.position},
            {"seed", p.seed}};
}

inline std::string errors_jsonl(const std::vector<HarvestedError>& errs, const Vocab& vocab) {
    std::string out;
    for (const auto& e : errs) {
        auto j = to_json(e.query, vocab);
        j["answer"] = vocab.word(e.answer);
        out += j.dump() + "\n";
    }
    return out;
}

}  // namespace dkn
