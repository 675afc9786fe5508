#pragma once

#include <cstdint>
#include <random>

namespace bt {

/// SplitMix64 finalizer. Used to turn (seed, task index) pairs into
/// well-separated engine seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t task) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(task + 0x632BE59BD9B4E019ULL));
}

/// A named random stream. Each (seed, task) pair gives an independent,
/// reproducible stream; streams are never shared between concurrent tasks.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed, std::uint64_t task = 0)
        : seed_(seed), task_(task), engine_(derive_seed(seed, task)) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
    }

    /// Child stream for a sub-task; independent of the parent's position.
    RandomStream child(std::uint64_t sub_task) const {
        return RandomStream(derive_seed(seed_, task_), sub_task);
    }

    std::mt19937_64& engine() { return engine_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t task() const noexcept { return task_; }

private:
    std::uint64_t seed_;
    std::uint64_t task_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace bt
