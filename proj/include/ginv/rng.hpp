#pragma once

#include <cmath>
#include <cstdint>

#include "ginv/tensor.hpp"

namespace ginv {

// splitmix64-based generator. Self-contained so that streams are bit-identical
// across standard libraries and platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one deviate per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::int64_t below(std::int64_t n) { return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n)); }

    Tensor uniform_tensor(Shape s, double lo, double hi) {
        Tensor t = Tensor::zeros(std::move(s));
        for (auto& v : t.data) v = uniform(lo, hi);
        return t;
    }

    Tensor normal_tensor(Shape s, double stddev = 1.0) {
        Tensor t = Tensor::zeros(std::move(s));
        for (auto& v : t.data) v = stddev * normal();
        return t;
    }

private:
    std::uint64_t state_;
};

// Decorrelated child seed for (seed, tag) pairs, e.g. per node or per restart.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t buf[2] = {seed, tag};
    return fnv1a64(buf, sizeof buf);
}

} // namespace ginv
