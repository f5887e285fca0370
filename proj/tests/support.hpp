#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "tsmi/tsmi.hpp"

namespace tsmi::test {

template <typename Real = float>
Tensor<Real> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<Real> t(std::move(s));
  for (auto& v : t.storage()) v = static_cast<Real>(rng.normal() * scale);
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Relative error, except that absolute differences at or below `floor`
/// count as zero (structurally zero gradients leave only rounding noise).
inline double rel_error(double a, double n, double floor = 1e-8) {
  const double diff = std::abs(a - n);
  if (diff <= floor) return 0.0;
  return diff / std::max(std::abs(a), std::abs(n));
}

/// Central-difference check of every element of `params` against the tape
/// gradient of the scalar produced by `loss`.
inline GradCheckResult grad_check(std::vector<std::pair<std::string, Var<double>>> params,
                                  const std::function<Var<double>()>& loss, double h = 1e-6) {
  for (auto& [n, p] : params) p.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Var<double> l = loss();
    tape.backward(l);
  }
  GradCheckResult res;
  for (auto& [name, p] : params) {
    const Tensor<double> analytic = p.has_grad() ? p.grad() : Tensor<double>(p.shape());
    Tensor<double>& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double fp = loss().value()[0];
      w[i] = saved - h;
      const double fm = loss().value()[0];
      w[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double e = rel_error(analytic[i], numeric);
      ++res.checked;
      if (e > res.max_rel_error) {
        res.max_rel_error = e;
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic=%.6g numeric=%.6g", analytic[i], numeric);
        res.worst = name + "[" + std::to_string(i) + buf;
      }
    }
  }
  return res;
}

/// Config used wherever a test needs a small model.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.seq_len = 6;
  c.channels = 3;
  c.d_model = 8;
  c.layers = 3;
  c.heads = 2;
  c.classes = 3;
  c.mlp_hidden = 16;
  c.dropout = 0.1;
  return c;
}

/// Synthetic dataset whose class is encoded in the sign pattern of channel 0.
inline Dataset synthetic_dataset(const ModelConfig& cfg, std::size_t per_class, std::uint64_t seed) {
  Dataset ds;
  ds.name = "synthetic";
  ds.channels = cfg.channels;
  ds.seq_len = cfg.seq_len;
  for (std::size_t k = 0; k < cfg.classes; ++k) ds.class_labels.push_back("c" + std::to_string(k));
  Rng rng(seed, "synthetic");
  for (auto* split : {&ds.train, &ds.test}) {
    for (std::size_t i = 0; i < per_class * cfg.classes; ++i) {
      TimeSeriesInstance inst;
      inst.id = i;
      inst.label = static_cast<int>(i % cfg.classes);
      inst.original_length = cfg.seq_len;
      inst.values = random_tensor<float>({cfg.channels, cfg.seq_len}, rng, 0.3);
      for (std::size_t t = 0; t < cfg.seq_len; ++t)
        inst.values[t] += static_cast<float>(std::cos(static_cast<double>((inst.label + 1) * t)));
      split->push_back(std::move(inst));
    }
  }
  return ds;
}

}  // namespace tsmi::test
