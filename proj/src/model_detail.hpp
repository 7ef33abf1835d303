#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "shapreg/models.hpp"

// Cross-TU internals shared by the learner implementations.
namespace shapreg::detail {

Eigen::VectorXd predict_forest(const ForestParams& params, const Eigen::MatrixXd& rows);
Eigen::VectorXd predict_network(const NetworkParams& params, const Eigen::MatrixXd& rows);

// SplitMix64 step; decorrelates per-tree/per-rep engines derived from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace shapreg::detail
