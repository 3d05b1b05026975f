#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace ouro {

// Deterministic RNG used everywhere a random draw happens. All sampling goes
// through the explicit transforms below (never std::*_distribution, whose
// outputs vary across standard library implementations), so equal seeds give
// bit-identical streams on any platform with IEEE doubles.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : gen_(seed), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit mantissa.
    double uniform();
    // Uniform in [lo, hi).
    double uniform(double lo, double hi);
    // Standard normal via Box-Muller; one spare value is cached between calls.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    void fill_normal(std::vector<double>& out, double mean, double stddev);
    // Derive an independent child stream; used to give each pipeline stage its
    // own stream so adding draws to one stage cannot shift another.
    SeededRng fork(std::uint64_t salt);

  private:
    std::mt19937_64 gen_;
    std::uint64_t seed_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ouro
