#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace causaltrial {

// Keyed random streams.
//
// Every stochastic step draws from an engine seeded by hashing (master seed,
// key...). Streams are therefore independent of execution order and of the
// thread count. Distributions are implemented here rather than taken from
// <random> because the standard distributions are implementation-defined and
// reports must reproduce across toolchains.

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

/// Stream key component: either an integer or a short tag.
struct Key {
    std::uint64_t value;
    template <std::integral I>
    constexpr Key(I v) noexcept : value(static_cast<std::uint64_t>(v)) {}  // NOLINT
    constexpr Key(std::string_view tag) noexcept : value(detail::fnv1a(tag)) {}  // NOLINT
    constexpr Key(const char* tag) noexcept : Key(std::string_view(tag)) {}      // NOLINT
};

/// Derive a child seed from a parent seed and a key path.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<Key> path) noexcept {
    std::uint64_t h = detail::splitmix64(seed);
    for (const Key& k : path) h = detail::splitmix64(h ^ detail::splitmix64(k.value + 0x632BE59BD9B4E019ULL));
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::initializer_list<Key> path) : engine_(derive_seed(seed, path)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, bound) by rejection (unbiased).
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    /// Standard normal via the Marsaglia polar method.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Index drawn with probability proportional to weights (weights sum to ~1).
    std::size_t categorical(std::span<const double> probs) {
        const double u = uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return probs.size() - 1;
    }

    template <class T>
    void shuffle(std::span<T> xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(xs[i - 1], xs[j]);
        }
    }

    template <class T>
    void shuffle(std::vector<T>& xs) { shuffle(std::span<T>(xs)); }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        shuffle(idx);
        return idx;
    }

    /// n indices drawn uniformly with replacement from [0, n).
    std::vector<std::size_t> resample(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (auto& i : idx) i = below(n);
        return idx;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace causaltrial
