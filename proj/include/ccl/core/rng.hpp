#ifndef CCL_CORE_RNG_HPP
#define CCL_CORE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace ccl {

/// Deterministic 64-bit generator (xoshiro256++ seeded via splitmix64).
/// All distributions are implemented here so that streams are identical
/// across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
        has_spare_ = false;
        spare_ = 0.0;
    }

    std::uint64_t u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0,1).
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        // Lemire-style rejection to avoid modulo bias.
        std::uint64_t x = u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0ULL - n) % n;
            while (lo < threshold) {
                x = u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    int below_int(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Index drawn from unnormalized nonnegative weights.
    int categorical(const std::vector<double>& weights) {
        const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        if (total <= 0.0) throw std::invalid_argument("Rng::categorical: weights sum to zero");
        double u = uniform() * total;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    /// Independent child stream; same (parent seed, tag) always yields the
    /// same stream, which is what makes per-sample generation order-free.
    Rng fork(std::uint64_t tag) const {
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (auto word : state_) h = mix(h, word);
        h = mix(h, tag);
        return Rng(h);
    }

    Rng fork(std::string_view tag) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return fork(h);
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
        h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        std::uint64_t s = h;
        return splitmix64(s);
    }

    std::uint64_t state_[4];
    bool has_spare_;
    double spare_;
};

}  // namespace ccl

#endif  // CCL_CORE_RNG_HPP
