#pragma once

#include <random>

#include "mhc/tensor.hpp"

namespace mhc::init {

template <typename T, typename Gen>
Tensor<T> uniform(Shape shape, double bound, Gen& rng) {
  Tensor<T> out(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T, typename Gen>
Tensor<T> normal(Shape shape, double stddev, Gen& rng) {
  Tensor<T> out(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace mhc::init
