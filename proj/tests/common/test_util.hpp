#pragma once

#include "tame/autodiff/ops.hpp"

#include <random>

namespace tame::testing {

inline ad::Matrix random_matrix(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    ad::Matrix m(rows, cols);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

inline ad::Index random_extent(std::mt19937_64& rng, ad::Index lo, ad::Index hi) {
    return std::uniform_int_distribution<ad::Index>(lo, hi)(rng);
}

// Contracts a tensor to a scalar with fixed random weights so every output
// coordinate contributes a distinct, well-scaled gradient.
inline ad::Var weighted_sum(const ad::Var& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    return ad::sum(ad::mul(y, ad::constant(random_matrix(rng, y.rows(), y.cols()))));
}

}  // namespace tame::testing
