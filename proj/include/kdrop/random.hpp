#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string_view>

namespace kdrop {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace detail

constexpr std::uint64_t fnv1a(std::string_view bytes,
                              std::uint64_t hash = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

/// Counter-based random stream.
///
/// Output n is mix64(key + (n + 1) * golden), so a stream is fully determined by
/// its key and position. Keys are derived from (seed, k1, k2, ...) with
/// `Stream::keyed`, which lets every (instance, pass) pair own an independent
/// stream regardless of the order in which work is scheduled.
class Stream {
public:
    using result_type = std::uint64_t;

    constexpr explicit Stream(std::uint64_t key = 0) : key_(key) {}

    template <typename... Keys>
    static constexpr Stream keyed(std::uint64_t seed, Keys... keys) {
        std::uint64_t k = detail::mix64(seed ^ 0x6A09E667F3BCC909ULL);
        ((k = detail::mix64(k ^ detail::mix64(static_cast<std::uint64_t>(keys) + detail::kGolden))), ...);
        return Stream(k);
    }

    /// A child stream that does not overlap the parent.
    template <typename... Keys>
    constexpr Stream split(Keys... keys) const {
        return keyed(key_, keys...);
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    constexpr result_type operator()() {
        ++counter_;
        return detail::mix64(key_ + counter_ * detail::kGolden);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform double in (0, 1).
    double uniform_open() {
        double u;
        do {
            u = uniform();
        } while (u == 0.0);
        return u;
    }

    std::uint64_t below(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
        return dist(*this);
    }

    double normal() {
        std::normal_distribution<double> dist(0.0, 1.0);
        return dist(*this);
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t position() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// log of a Gamma(shape, 1) variate; stays finite for shapes far below 1.
inline double log_gamma_variate(double shape, Stream &rng) {
    if (shape >= 1.0) {
        std::gamma_distribution<double> dist(shape, 1.0);
        double g = dist(rng);
        while (g <= 0.0) g = dist(rng);
        return std::log(g);
    }
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    std::gamma_distribution<double> dist(shape + 1.0, 1.0);
    double g = dist(rng);
    while (g <= 0.0) g = dist(rng);
    return std::log(g) + std::log(rng.uniform_open()) / shape;
}

/// Beta(alpha, beta) draw computed through log-gamma variates so that tiny
/// shape parameters (1e-4) produce values at the 0/1 boundaries instead of NaN.
inline double beta_variate(double alpha, double beta, Stream &rng) {
    const double la = log_gamma_variate(alpha, rng);
    const double lb = log_gamma_variate(beta, rng);
    const double d = lb - la;
    if (d > 700.0) return 0.0;
    if (d < -700.0) return 1.0;
    return 1.0 / (1.0 + std::exp(d));
}

} // namespace kdrop
