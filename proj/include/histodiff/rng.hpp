#pragma once

#include <cstdint>
#include <random>

#include "histodiff/tensor.hpp"

namespace histodiff {

// splitmix64; used to derive independent child seeds from (seed, stream ids).
inline uint64_t mix_seed(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = mix_seed(seed);
    h = mix_seed(h ^ a);
    h = mix_seed(h ^ b);
    h = mix_seed(h ^ c);
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }  // [0,1)
    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
    }

    Tensor normal_tensor(std::vector<int> shape) {
        Tensor t(std::move(shape));
        for (size_t i = 0; i < t.size(); ++i) t[i] = normal();
        return t;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace histodiff
