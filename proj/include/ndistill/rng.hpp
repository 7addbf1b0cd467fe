#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "ndistill/tensor.hpp"

namespace nd {

inline std::uint64_t fnv1a64(const void* bytes, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = 14695981039346656037ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Deterministic 64-bit generator (SplitMix64 core), splittable by
/// (label, index) keys so every job / module / purpose owns an
/// independent stream derived from one global seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(detail::mix64(seed ^ 0xA5A5A5A55A5A5A5AULL)) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return detail::mix64(state_);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi].
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    /// Standard normal via Box-Muller; one fresh pair per call, spare unused.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Child generator keyed by (label, index); independent of parent draws.
    Rng split(std::string_view label, std::uint64_t index = 0) const {
        std::uint64_t h = fnv1a64(label);
        std::uint64_t s = detail::mix64(state_ ^ detail::mix64(h + 0x632BE59BD9B4E019ULL));
        return Rng(detail::mix64(s + detail::mix64(index ^ 0x9E3779B97F4A7C15ULL)));
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

/// I.i.d. normal draws; Box-Muller pairs consumed in flat order, any
/// trailing spare is dropped so output depends only on (rng-state, shape).
inline Tensor gaussian_sample(Rng& rng, std::vector<int> shape, double mean, double std) {
    Tensor t(std::move(shape));
    const std::size_t n = t.numel();
    std::size_t i = 0;
    while (i < n) {
        double u1 = 1.0 - rng.uniform();
        double u2 = rng.uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        t.data[i++] = static_cast<float>(mean + std * (r * std::cos(2.0 * M_PI * u2)));
        if (i < n) t.data[i++] = static_cast<float>(mean + std * (r * std::sin(2.0 * M_PI * u2)));
    }
    return t;
}

/// In-place Fisher-Yates shuffle with rng-supplied indices.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.next_u64() % i;
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace nd
