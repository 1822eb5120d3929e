#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dkn/core.hpp"

namespace dkn {

using Tokens = std::vector<int>;

inline constexpr const char* kEos = "<eos>";
inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kReplace = "[replace]";
inline constexpr const char* kAdd = "[add]";

inline std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

// Whitespace vocabulary. Ids 0..3 are always the reserved tokens, in the
// order <eos>, <pad>, [replace], [add].
class Vocab {
public:
    Vocab() {
        for (const char* s : {kEos, kPad, kReplace, kAdd}) add(s);
    }

    explicit Vocab(const std::vector<std::string>& words) : Vocab() {
        for (const auto& w : words) add(w);
    }

    int add(const std::string& word) {
        auto it = index_.find(word);
        if (it != index_.end()) return it->second;
        const int id = static_cast<int>(words_.size());
        words_.push_back(word);
        index_.emplace(word, id);
        return id;
    }

    void add_text(const std::string& text) {
        for (const auto& w : split_words(text)) add(w);
    }

    bool has(const std::string& word) const { return index_.count(word) != 0; }

    int id(const std::string& word) const {
        auto it = index_.find(word);
        if (it == index_.end()) throw Error("token not in vocabulary: '" + word + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
            throw Error("token id out of range: " + std::to_string(id));
        }
        return words_[static_cast<std::size_t>(id)];
    }

    Tokens encode(const std::string& text) const {
        Tokens out;
        for (const auto& w : split_words(text)) out.push_back(id(w));
        return out;
    }

    std::string decode(const Tokens& tokens) const {
        std::string out;
        for (int t : tokens) {
            if (!out.empty()) out += ' ';
            out += word(t);
        }
        return out;
    }

    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

    int eos() const { return 0; }
    int pad() const { return 1; }
    int replace_token() const { return 2; }
    int add_token() const { return 3; }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

}  // namespace dkn
