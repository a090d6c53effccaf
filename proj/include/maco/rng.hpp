#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace maco {

/// mt19937_64 with portable draws; the state round-trips through a string.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double normal();
    double truncated_normal(double sigma);  // resampled beyond 2 sigma
    std::uint64_t below(std::uint64_t n);   // [0, n)
    bool bernoulli(double p) { return uniform() < p; }

    std::string state() const;
    void set_state(const std::string& s);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Independent stream seed for (seed, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace maco
