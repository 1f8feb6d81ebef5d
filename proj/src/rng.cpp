#include "sere/rng.hpp"

#include <cmath>
#include <numbers>

namespace sere {
namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
    for (auto& w : s_) w = splitmix64(seed);
}

Rng::result_type Rng::operator()() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

// Box-Muller, one value per call so the stream position is a pure function
// of the number of draws.
double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t v = (*this)();
    while (v >= limit) v = (*this)();
    return v % n;
}

Tensor Rng::normal_tensor(std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (auto& v : t.storage()) v = normal();
    return t;
}

Tensor Rng::uniform_tensor(std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (auto& v : t.storage()) v = uniform();
    return t;
}

Rng Rng::split(std::uint64_t tag) {
    std::uint64_t seed = (*this)() ^ (tag * 0xd1342543de82ef95ULL);
    return Rng(seed);
}

}  // namespace sere
