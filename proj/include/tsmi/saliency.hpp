#pragma once

#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsmi/model.hpp"

namespace tsmi {

/// Mean attention each timestep receives from all query positions of one
/// head. Observational only: a high score marks a candidate for patching,
/// not evidence that the timestep matters causally.
struct SaliencyProfile {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> scores;  // length T, sums to 1
};

/// Column means of an attention matrix A [T, T] (rows = queries).
inline std::vector<double> column_means(const float* A, std::size_t T) {
  std::vector<double> s(T, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t t = 0; t < T; ++t) s[t] += A[i * T + t];
  for (auto& v : s) v /= static_cast<double>(T);
  return s;
}

inline SaliencyProfile attention_saliency(const ActivationCache<float>& cache, std::size_t layer,
                                          std::size_t head) {
  if (layer >= cache.attention.size() || cache.attention[layer].empty())
    throw std::out_of_range("activation cache has no attention for layer " + std::to_string(layer));
  const Tensor<float>& A = cache.attention[layer];
  if (head >= A.dim(0))
    throw std::out_of_range("activation cache has no attention for head " + std::to_string(head));
  const std::size_t T = A.dim(1);
  return {layer, head, column_means(A.data() + head * T * T, T)};
}

/// Plot-ready rows: t, each channel's value at t, S_t.
inline void write_saliency_overlay(const SaliencyProfile& profile, const Tensor<float>& instance,
                                   std::ostream& out) {
  const std::size_t C = instance.dim(0), T = instance.dim(1);
  if (profile.scores.size() != T)
    throw DimensionError("saliency profile length does not match instance length");
  out << "t";
  for (std::size_t c = 0; c < C; ++c) out << ",ch" << c;
  out << ",saliency\n";
  char buf[40];
  for (std::size_t t = 0; t < T; ++t) {
    out << t;
    for (std::size_t c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", instance[c * T + t]);
      out << ',' << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", profile.scores[t]);
    out << ',' << buf << '\n';
  }
}

}  // namespace tsmi
