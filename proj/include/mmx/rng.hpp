#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace mmx {

// SplitMix64 generator. All randomness in the project flows through this so
// that shuffles, initializations and the toy-task generator are reproducible
// bit-for-bit across platforms (no std::random distributions anywhere).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53 bits of precision.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Derives an independent stream for a named purpose, so that consuming
    // draws in one subsystem never shifts another subsystem's sequence.
    Rng stream(std::string_view purpose) const {
        std::uint64_t h = 0xcbf29ce484222325ULL ^ state_;
        for (char c : purpose) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 0x100000001b3ULL;
        }
        return Rng(h);
    }

  private:
    std::uint64_t state_;
};

}  // namespace mmx
