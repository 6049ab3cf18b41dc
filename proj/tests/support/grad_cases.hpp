#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mhc/numerics.hpp"

namespace mhc::testing {

/// A scalar function of one tensor argument and the point to check it at.
struct GradCase {
  std::string name;
  std::function<Var<double>(const Var<double>&)> f;
  Tensor<double> point;
};

/// Fixed pseudo-random weights of `shape`, seeded by `salt`.
Tensor<double> probe_weights(const Shape& shape, std::uint64_t salt);

/// sum(v * probe_weights(v.shape)): a scalar that sees every output entry.
Var<double> probe(const Var<double>& v, std::uint64_t salt = 1);

/// One case per (differentiable op, differentiable input).
std::vector<GradCase> op_gradient_cases(std::uint64_t seed);

}  // namespace mhc::testing
