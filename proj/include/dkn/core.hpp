#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace dkn {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Exit codes shared by the CLI; exceptions carry one so the driver can map
// failures without string matching.
enum class ErrorCode : int {
    generic = 1,
    config = 2,
    missing_prerequisite = 3,
    numeric = 4,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, ErrorCode code = ErrorCode::generic)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what, ErrorCode::config) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(what, ErrorCode::numeric) {}
};

class MissingPrerequisite : public Error {
public:
    explicit MissingPrerequisite(const std::string& what)
        : Error(what, ErrorCode::missing_prerequisite) {}
};

/// Address of one MLP hidden unit.
struct NeuronId {
    std::size_t layer = 0;
    std::size_t pos = 0;

    friend bool operator==(const NeuronId&, const NeuronId&) = default;
    friend auto operator<=>(const NeuronId& a, const NeuronId& b) {
        return std::tie(a.layer, a.pos) <=> std::tie(b.layer, b.pos);
    }
};

inline std::string to_string(const NeuronId& n) {
    return "L" + std::to_string(n.layer) + "." + std::to_string(n.pos);
}

using NeuronSet = std::vector<NeuronId>;  // kept sorted and unique

inline void normalize_set(NeuronSet& s) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
}

inline bool contains(const NeuronSet& sorted, const NeuronId& n) {
    return std::binary_search(sorted.begin(), sorted.end(), n);
}

// ---------------------------------------------------------------------------
// Seeding. Every random decision draws from a named substream of one root
// seed so that, e.g., changing the perturbation seed never moves the model
// initialisation.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
    return splitmix64(root ^ fnv1a64(name));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view name) {
    return Rng(substream_seed(root, name));
}

// Uniform index in [0, n). Avoids std::uniform_int_distribution so draws are
// identical across standard library implementations.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) throw Error("uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = rng();
    while (x >= limit) x = rng();
    return static_cast<std::size_t>(x % n);
}

inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double normal(Rng& rng) {
    // Box-Muller; the second variate is discarded to keep the stream stateless.
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[uniform_index(rng, i)]);
    }
}

}  // namespace dkn
