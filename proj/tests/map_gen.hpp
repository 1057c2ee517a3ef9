#pragma once

#include <random>
#include <vector>

#include "saga/attention.hpp"

namespace testgen {

/// Random normalised map; `levels` > 0 quantises raw values to force ties.
inline saga::attention::AttentionMap random_map(std::mt19937_64& rng, int rows, int cols, int levels = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> raw(static_cast<std::size_t>(rows * cols));
  for (auto& v : raw) v = levels > 0 ? static_cast<double>(std::uniform_int_distribution<int>(0, levels)(rng)) : u(rng);
  raw[0] += 1e-3;
  return saga::attention::normalize_spatial({rows, cols}, raw);
}

}  // namespace testgen
