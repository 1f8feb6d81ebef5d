#pragma once

#include <array>
#include <cstdint>
#include <limits>

#include "sere/tensor.hpp"

namespace sere {

// xoshiro256** seeded through splitmix64. State is four words so it can be
// checkpointed verbatim. Satisfies UniformRandomBitGenerator.
class Rng {
public:
    using result_type = std::uint64_t;
    using State = std::array<std::uint64_t, 4>;

    explicit Rng(std::uint64_t seed = 0x5e5eULL);

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()();

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal();
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }

    Tensor normal_tensor(std::size_t rows, std::size_t cols);
    Tensor uniform_tensor(std::size_t rows, std::size_t cols);

    // Independent child stream; derivation is deterministic in (state, tag).
    Rng split(std::uint64_t tag);

    const State& state() const { return s_; }
    void set_state(const State& s) { s_ = s; }

private:
    State s_{};
};

}  // namespace sere
