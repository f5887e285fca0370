#pragma once

#include <algorithm>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "tsmi/model.hpp"
#include "tsmi/parallel.hpp"
#include "tsmi/trainer.hpp"

namespace tsmi {

/// Outcome of one intervention on the corrupt run. Probabilities are the
/// model's float outputs widened to double, so delta_p is exact.
struct PatchResult {
  std::vector<TapPoint> targets;
  double p_orig = 0.0;
  double p_patched = 0.0;
  double delta_p = 0.0;
  int predicted_after = 0;
};

enum class Granularity { Layer, Head, Position };

inline const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::Layer: return "layer";
    case Granularity::Head: return "head";
    case Granularity::Position: return "position";
  }
  return "?";
}

struct SweepReport {
  Granularity granularity = Granularity::Layer;
  std::optional<std::size_t> layer;  // fixed indices for position sweeps
  std::optional<std::size_t> head;
  std::vector<PatchResult> results;
};

/// Denoising setup for one clean/corrupt pair: the donor cache from the
/// clean run and the corrupt baseline are computed once; every delta_p call
/// is a single further forward. The model must not be trained while a
/// session is alive. Safe for concurrent delta_p calls.
class PatchSession {
 public:
  PatchSession(Model& model, const Tensor<float>& clean, const Tensor<float>& corrupt, int true_class)
      : model_(&model), corrupt_(corrupt), true_class_(true_class) {
    if (true_class < 0 || static_cast<std::size_t>(true_class) >= model.config().classes)
      throw std::out_of_range("true class " + std::to_string(true_class) + " out of range");
    model.predict(clean, &donor_);
    baseline_ = model.predict(corrupt_);
    p_orig_ = baseline_[static_cast<std::size_t>(true_class)];
  }

  PatchSession(Model& model, const TimeSeriesInstance& clean, const TimeSeriesInstance& corrupt)
      : PatchSession(model, clean.values, corrupt.values, corrupt.label) {
    if (clean.label != corrupt.label)
      throw std::invalid_argument("clean and corrupt instances must share a true class");
  }

  PatchResult delta_p(const std::vector<TapPoint>& targets) const {
    for (const auto& tp : targets) tp.validate(model_->config());
    PatchResult r;
    r.targets = targets;
    r.p_orig = p_orig_;
    Tensor<float> probs = targets.empty() ? baseline_ : forward_with_patches(*model_, corrupt_, donor_, targets);
    r.p_patched = probs[static_cast<std::size_t>(true_class_)];
    r.delta_p = r.p_patched - r.p_orig;
    r.predicted_after = argmax(probs);
    return r;
  }

  /// Corrupt-run probabilities with an arbitrary plan (e.g. SAE steering).
  Tensor<float> run_plan(const PatchPlan<float>& plan) const { return model_->predict(corrupt_, nullptr, &plan); }

  const ModelConfig& config() const { return model_->config(); }
  const ActivationCache<float>& donor() const { return donor_; }
  const Tensor<float>& baseline() const { return baseline_; }
  double p_orig() const { return p_orig_; }
  int true_class() const { return true_class_; }

 private:
  Model* model_;
  Tensor<float> corrupt_;
  int true_class_;
  ActivationCache<float> donor_;
  Tensor<float> baseline_;
  double p_orig_ = 0.0;
};

namespace detail {
inline SweepReport run_sweep(const PatchSession& s, Granularity g, std::vector<TapPoint> taps,
                             std::size_t jobs) {
  SweepReport rep;
  rep.granularity = g;
  rep.results.resize(taps.size());
  parallel_for(taps.size(), jobs, [&](std::size_t i) { rep.results[i] = s.delta_p({taps[i]}); });
  return rep;
}
}  // namespace detail

inline SweepReport sweep_layers(const PatchSession& s, std::size_t jobs = 1) {
  std::vector<TapPoint> taps;
  for (std::size_t l = 0; l < s.config().layers; ++l) taps.push_back(TapPoint::whole_layer(l));
  return detail::run_sweep(s, Granularity::Layer, std::move(taps), jobs);
}

inline SweepReport sweep_heads(const PatchSession& s, std::size_t jobs = 1) {
  std::vector<TapPoint> taps;
  for (std::size_t l = 0; l < s.config().layers; ++l)
    for (std::size_t h = 0; h < s.config().heads; ++h) taps.push_back(TapPoint::single_head(l, h));
  return detail::run_sweep(s, Granularity::Head, std::move(taps), jobs);
}

inline SweepReport sweep_positions(const PatchSession& s, std::size_t layer, std::size_t head,
                                   std::size_t jobs = 1) {
  TapPoint::single_head(layer, head).validate(s.config());
  std::vector<TapPoint> taps;
  for (std::size_t t = 0; t < s.config().seq_len; ++t) taps.push_back(TapPoint::head_pos(layer, head, t));
  SweepReport rep = detail::run_sweep(s, Granularity::Position, std::move(taps), jobs);
  rep.layer = layer;
  rep.head = head;
  return rep;
}

/// Position sweeps for every (layer, head), in (layer, head) order.
inline std::vector<SweepReport> sweep_all_positions(const PatchSession& s, std::size_t jobs = 1) {
  const auto& c = s.config();
  std::vector<TapPoint> taps;
  for (std::size_t l = 0; l < c.layers; ++l)
    for (std::size_t h = 0; h < c.heads; ++h)
      for (std::size_t t = 0; t < c.seq_len; ++t) taps.push_back(TapPoint::head_pos(l, h, t));
  SweepReport flat = detail::run_sweep(s, Granularity::Position, std::move(taps), jobs);
  std::vector<SweepReport> out;
  for (std::size_t l = 0; l < c.layers; ++l)
    for (std::size_t h = 0; h < c.heads; ++h) {
      SweepReport rep;
      rep.granularity = Granularity::Position;
      rep.layer = l;
      rep.head = h;
      const std::size_t base = (l * c.heads + h) * c.seq_len;
      rep.results.assign(flat.results.begin() + base, flat.results.begin() + base + c.seq_len);
      out.push_back(std::move(rep));
    }
  return out;
}

struct CriticalPatch {
  TapPoint tap;
  double delta_p = 0.0;
};

inline bool critical_before(const CriticalPatch& a, const CriticalPatch& b) {
  if (a.delta_p != b.delta_p) return a.delta_p > b.delta_p;
  return std::tie(a.tap.layer, a.tap.head, a.tap.pos, a.tap.kind) <
         std::tie(b.tap.layer, b.tap.head, b.tap.pos, b.tap.kind);
}

/// Singleton patches whose delta_p strictly exceeds `threshold`, ranked by
/// delta_p descending with ties broken by (layer, head, timestep).
inline std::vector<CriticalPatch> find_critical(const std::vector<SweepReport>& sweeps, double threshold) {
  if (threshold < 0.0) throw std::invalid_argument("critical-patch threshold must be >= 0");
  std::vector<CriticalPatch> out;
  for (const auto& s : sweeps)
    for (const auto& r : s.results)
      if (r.targets.size() == 1 && r.delta_p > threshold) out.push_back({r.targets.front(), r.delta_p});
  std::sort(out.begin(), out.end(), critical_before);
  return out;
}

/// Every singleton patch in the sweeps, ranked like find_critical.
inline std::vector<CriticalPatch> rank_all(const std::vector<SweepReport>& sweeps) {
  std::vector<CriticalPatch> out;
  for (const auto& s : sweeps)
    for (const auto& r : s.results)
      if (r.targets.size() == 1) out.push_back({r.targets.front(), r.delta_p});
  std::sort(out.begin(), out.end(), critical_before);
  return out;
}

struct TopkRow {
  std::size_t k = 0;
  double delta_p = 0.0;
  double p_final = 0.0;
};

/// Applies the top-1, top-2, ..., top-k_max ranked patches simultaneously.
/// Each row is an independent forward; dips are reported as-is.
inline std::vector<TopkRow> accumulate_topk(const PatchSession& s, const std::vector<CriticalPatch>& ranked,
                                            std::size_t k_max, std::size_t jobs = 1,
                                            std::ostream* notice = &std::cerr) {
  if (k_max > ranked.size()) {
    if (notice)
      *notice << "note: top-k requested " << k_max << " patches but only " << ranked.size()
              << " are available; truncating\n";
    k_max = ranked.size();
  }
  std::vector<TopkRow> rows(k_max);
  parallel_for(k_max, jobs, [&](std::size_t i) {
    std::vector<TapPoint> taps;
    for (std::size_t j = 0; j <= i; ++j) taps.push_back(ranked[j].tap);
    PatchResult r = s.delta_p(taps);
    rows[i] = {i + 1, r.delta_p, r.p_patched};
  });
  return rows;
}

}  // namespace tsmi
