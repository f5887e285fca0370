#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmi/autodiff.hpp"
#include "tsmi/ops.hpp"
#include "tsmi/optim.hpp"
#include "tsmi/rng.hpp"
#include "tsmi/tensor.hpp"

namespace tsmi {

struct ModelConfig {
  std::size_t seq_len = 25;
  std::size_t channels = 12;
  std::size_t d_model = 64;
  std::size_t layers = 3;
  std::size_t heads = 8;
  std::size_t classes = 9;
  std::size_t mlp_hidden = 256;
  double dropout = 0.1;

  std::size_t head_dim() const { return d_model / heads; }

  void validate() const {
    if (!seq_len || !channels || !layers || !heads || !classes || !mlp_hidden || !d_model)
      throw std::invalid_argument("model config: all sizes must be positive");
    if (d_model % 4 != 0) throw std::invalid_argument("model config: d_model must be divisible by 4");
    if (d_model % heads != 0)
      throw std::invalid_argument("model config: d_model must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("model config: dropout must be in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"seq_len", c.seq_len}, {"channels", c.channels}, {"d_model", c.d_model},
                     {"layers", c.layers},   {"heads", c.heads},       {"classes", c.classes},
                     {"mlp_hidden", c.mlp_hidden}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("seq_len").get_to(c.seq_len);
  j.at("channels").get_to(c.channels);
  j.at("d_model").get_to(c.d_model);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("classes").get_to(c.classes);
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  j.at("dropout").get_to(c.dropout);
}

enum class Mode { Train, Eval };

enum class TapKind : std::uint8_t { Layer = 0, Head = 1, HeadPos = 2, MlpOut = 3 };

/// Address of an internal activation. Layer/Head/HeadPos address slices of
/// the per-head attention context (the attention-weighted value mix, taken
/// before the output projection); MlpOut addresses the second MLP linear's
/// output for every timestep.
struct TapPoint {
  TapKind kind = TapKind::Layer;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t pos = 0;

  static TapPoint whole_layer(std::size_t l) { return {TapKind::Layer, l, 0, 0}; }
  static TapPoint single_head(std::size_t l, std::size_t h) { return {TapKind::Head, l, h, 0}; }
  static TapPoint head_pos(std::size_t l, std::size_t h, std::size_t t) {
    return {TapKind::HeadPos, l, h, t};
  }
  static TapPoint mlp_out(std::size_t l) { return {TapKind::MlpOut, l, 0, 0}; }

  void validate(const ModelConfig& cfg) const {
    auto bad = [&](const char* what, std::size_t v, std::size_t lim) {
      throw std::out_of_range("tap point " + to_string() + ": " + what + " index " +
                              std::to_string(v) + " outside [0," + std::to_string(lim) + ")");
    };
    if (layer >= cfg.layers) bad("layer", layer, cfg.layers);
    if ((kind == TapKind::Head || kind == TapKind::HeadPos) && head >= cfg.heads)
      bad("head", head, cfg.heads);
    if (kind == TapKind::HeadPos && pos >= cfg.seq_len) bad("timestep", pos, cfg.seq_len);
  }

  std::string to_string() const {
    const std::string l = "L" + std::to_string(layer);
    switch (kind) {
      case TapKind::Layer: return l;
      case TapKind::Head: return l + "H" + std::to_string(head);
      case TapKind::HeadPos: return l + "H" + std::to_string(head) + "T" + std::to_string(pos);
      case TapKind::MlpOut: return "MLP" + std::to_string(layer);
    }
    return l;
  }

  friend auto operator<=>(const TapPoint&, const TapPoint&) = default;
};

/// Activations captured during one single-instance forward pass.
template <typename Real>
struct ActivationCache {
  ModelConfig config;
  std::vector<Tensor<Real>> head_context;  // per layer: [H, T, d/H]
  std::vector<Tensor<Real>> attention;     // per layer: [H, T, T]
  std::vector<Tensor<Real>> mlp_out;       // per layer: [T, d]
  Tensor<Real> probs;                      // [K]
};

/// Concrete overwrite instructions for one forward pass.
template <typename Real>
struct PatchPlan {
  struct LayerPatch {
    std::vector<std::uint8_t> context_mask;  // [T * d], empty = untouched
    Tensor<Real> context_values;             // [1, T, d]
    std::optional<Tensor<Real>> mlp_values;  // [1, T, d]
  };
  std::vector<LayerPatch> layers;

  bool empty() const {
    for (const auto& l : layers)
      if (!l.context_mask.empty() || l.mlp_values) return false;
    return true;
  }
};

/// Translates tap-point targets against a donor cache into a PatchPlan.
template <typename Real>
PatchPlan<Real> make_patch_plan(const ModelConfig& cfg, const ActivationCache<Real>& donor,
                                const std::vector<TapPoint>& targets) {
  if (!(donor.config == cfg))
    throw std::invalid_argument("donor activation cache was produced by a different model config");
  const std::size_t T = cfg.seq_len, d = cfg.d_model, dh = cfg.head_dim(), H = cfg.heads;
  PatchPlan<Real> plan;
  plan.layers.resize(cfg.layers);
  auto ensure_ctx = [&](std::size_t l) -> typename PatchPlan<Real>::LayerPatch& {
    auto& lp = plan.layers[l];
    if (lp.context_mask.empty()) {
      lp.context_mask.assign(T * d, 0);
      lp.context_values = Tensor<Real>({1, T, d});
      const Tensor<Real>& src = donor.head_context.at(l);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < dh; ++c)
            lp.context_values[t * d + h * dh + c] = src[(h * T + t) * dh + c];
    }
    return lp;
  };
  auto mark = [&](std::size_t l, std::size_t h, std::size_t t) {
    auto& lp = ensure_ctx(l);
    for (std::size_t c = 0; c < dh; ++c) lp.context_mask[t * d + h * dh + c] = 1;
  };
  for (const TapPoint& tp : targets) {
    tp.validate(cfg);
    switch (tp.kind) {
      case TapKind::Layer:
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t t = 0; t < T; ++t) mark(tp.layer, h, t);
        break;
      case TapKind::Head:
        for (std::size_t t = 0; t < T; ++t) mark(tp.layer, tp.head, t);
        break;
      case TapKind::HeadPos:
        mark(tp.layer, tp.head, tp.pos);
        break;
      case TapKind::MlpOut:
        plan.layers[tp.layer].mlp_values = donor.mlp_out.at(tp.layer).reshaped({1, T, d});
        break;
    }
  }
  return plan;
}

template <typename Real>
class TstModel {
 public:
  struct ConvBlock {
    Var<Real> weight, bias, bn_gamma, bn_beta;
    ops::BatchNormStats<Real> bn_stats;
    std::size_t kernel = 1;
  };
  struct EncoderLayer {
    Var<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    Var<Real> ln1_gamma, ln1_beta;
    Var<Real> w1, b1, w2, b2;
    Var<Real> ln2_gamma, ln2_beta;
  };

  static constexpr std::size_t kKernels[3] = {5, 3, 3};

  /// Fresh model with seeded initialization (stream "init").
  explicit TstModel(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, "init");
    const std::size_t d = cfg_.d_model;
    const std::size_t widths[4] = {cfg_.channels, d / 4, d / 2, d};
    for (std::size_t i = 0; i < 3; ++i) {
      ConvBlock cb;
      cb.kernel = kKernels[i];
      const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i] * cb.kernel));
      cb.weight = uniform_param({widths[i + 1], widths[i], cb.kernel}, bound, rng);
      cb.bias = uniform_param({widths[i + 1]}, bound, rng);
      cb.bn_gamma = const_param({widths[i + 1]}, 1);
      cb.bn_beta = const_param({widths[i + 1]}, 0);
      cb.bn_stats = ops::BatchNormStats<Real>(widths[i + 1]);
      conv_.push_back(std::move(cb));
    }
    Tensor<Real> pos({cfg_.seq_len, d});
    for (auto& v : pos.storage()) v = static_cast<Real>(0.02 * rng.normal());
    pos_ = Var<Real>(std::move(pos), true);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      EncoderLayer e;
      const double bd = 1.0 / std::sqrt(static_cast<double>(d));
      e.wq = uniform_param({d, d}, bd, rng);
      e.bq = uniform_param({d}, bd, rng);
      e.wk = uniform_param({d, d}, bd, rng);
      e.bk = uniform_param({d}, bd, rng);
      e.wv = uniform_param({d, d}, bd, rng);
      e.bv = uniform_param({d}, bd, rng);
      e.wo = uniform_param({d, d}, bd, rng);
      e.bo = uniform_param({d}, bd, rng);
      e.ln1_gamma = const_param({d}, 1);
      e.ln1_beta = const_param({d}, 0);
      e.w1 = uniform_param({d, cfg_.mlp_hidden}, bd, rng);
      e.b1 = uniform_param({cfg_.mlp_hidden}, bd, rng);
      const double bh = 1.0 / std::sqrt(static_cast<double>(cfg_.mlp_hidden));
      e.w2 = uniform_param({cfg_.mlp_hidden, d}, bh, rng);
      e.b2 = uniform_param({d}, bh, rng);
      e.ln2_gamma = const_param({d}, 1);
      e.ln2_beta = const_param({d}, 0);
      layers_.push_back(std::move(e));
    }
    const double bd = 1.0 / std::sqrt(static_cast<double>(d));
    head_w_ = uniform_param({d, cfg_.classes}, bd, rng);
    head_b_ = uniform_param({cfg_.classes}, bd, rng);
  }

  TstModel(TstModel&&) noexcept = default;
  TstModel& operator=(TstModel&&) noexcept = default;
  TstModel(const TstModel&) = delete;
  TstModel& operator=(const TstModel&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// Visits every persistent tensor (parameters and batch-norm running
  /// statistics) in a fixed order with stable names.
  template <typename F>
  void visit_tensors(F&& f) {
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      auto& c = conv_[i];
      const std::string p = "conv" + std::to_string(i) + ".";
      f(p + "weight", c.weight.mutable_value(), true);
      f(p + "bias", c.bias.mutable_value(), true);
      f(p + "bn.gamma", c.bn_gamma.mutable_value(), true);
      f(p + "bn.beta", c.bn_beta.mutable_value(), true);
      f(p + "bn.running_mean", c.bn_stats.running_mean, false);
      f(p + "bn.running_var", c.bn_stats.running_var, false);
    }
    f(std::string("pos_embedding"), pos_.mutable_value(), true);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& e = layers_[l];
      const std::string p = "encoder" + std::to_string(l) + ".";
      f(p + "attn.wq", e.wq.mutable_value(), true);
      f(p + "attn.bq", e.bq.mutable_value(), true);
      f(p + "attn.wk", e.wk.mutable_value(), true);
      f(p + "attn.bk", e.bk.mutable_value(), true);
      f(p + "attn.wv", e.wv.mutable_value(), true);
      f(p + "attn.bv", e.bv.mutable_value(), true);
      f(p + "attn.wo", e.wo.mutable_value(), true);
      f(p + "attn.bo", e.bo.mutable_value(), true);
      f(p + "ln1.gamma", e.ln1_gamma.mutable_value(), true);
      f(p + "ln1.beta", e.ln1_beta.mutable_value(), true);
      f(p + "mlp.w1", e.w1.mutable_value(), true);
      f(p + "mlp.b1", e.b1.mutable_value(), true);
      f(p + "mlp.w2", e.w2.mutable_value(), true);
      f(p + "mlp.b2", e.b2.mutable_value(), true);
      f(p + "ln2.gamma", e.ln2_gamma.mutable_value(), true);
      f(p + "ln2.beta", e.ln2_beta.mutable_value(), true);
    }
    f(std::string("head.weight"), head_w_.mutable_value(), true);
    f(std::string("head.bias"), head_b_.mutable_value(), true);
  }

  template <typename F>
  void visit_tensors(F&& f) const {
    const_cast<TstModel*>(this)->visit_tensors(
        [&](const std::string& name, Tensor<Real>& t, bool is_param) {
          f(name, static_cast<const Tensor<Real>&>(t), is_param);
        });
  }

  std::vector<NamedParam<Real>> parameters() {
    std::vector<NamedParam<Real>> out;
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      const std::string p = "conv" + std::to_string(i) + ".";
      out.push_back({p + "weight", conv_[i].weight});
      out.push_back({p + "bias", conv_[i].bias});
      out.push_back({p + "bn.gamma", conv_[i].bn_gamma});
      out.push_back({p + "bn.beta", conv_[i].bn_beta});
    }
    out.push_back({"pos_embedding", pos_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& e = layers_[l];
      const std::string p = "encoder" + std::to_string(l) + ".";
      for (auto [n, v] : {std::pair{"attn.wq", &e.wq}, {"attn.bq", &e.bq}, {"attn.wk", &e.wk},
                          {"attn.bk", &e.bk}, {"attn.wv", &e.wv}, {"attn.bv", &e.bv},
                          {"attn.wo", &e.wo}, {"attn.bo", &e.bo}, {"ln1.gamma", &e.ln1_gamma},
                          {"ln1.beta", &e.ln1_beta}, {"mlp.w1", &e.w1}, {"mlp.b1", &e.b1},
                          {"mlp.w2", &e.w2}, {"mlp.b2", &e.b2}, {"ln2.gamma", &e.ln2_gamma},
                          {"ln2.beta", &e.ln2_beta}})
        out.push_back({p + n, *v});
    }
    out.push_back({"head.weight", head_w_});
    out.push_back({"head.bias", head_b_});
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.size();
    return n;
  }

  /// Deep copy, optionally into another scalar type.
  template <typename Other = Real>
  TstModel<Other> clone_as() const {
    TstModel<Other> out(cfg_);
    std::vector<const Tensor<Real>*> src;
    visit_tensors([&](const std::string&, const Tensor<Real>& t, bool) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit_tensors([&](const std::string&, Tensor<Other>& t, bool) { t = src[i++]->template cast<Other>(); });
    return out;
  }
  TstModel clone() const { return clone_as<Real>(); }

  /// Batched forward to logits. x: [B, C, T]. Capture and patching require
  /// B == 1. In training mode `dropout_rng` must be supplied.
  Var<Real> forward_logits(const Tensor<Real>& x, Mode mode, Rng* dropout_rng = nullptr,
                           ActivationCache<Real>* capture = nullptr,
                           const PatchPlan<Real>* patches = nullptr) {
    require_rank(x.shape(), 3, "model input");
    const std::size_t B = x.dim(0), T = cfg_.seq_len, d = cfg_.d_model;
    if (x.dim(1) != cfg_.channels || x.dim(2) != T)
      throw DimensionError("model input: expected [B x " + std::to_string(cfg_.channels) + " x " +
                           std::to_string(T) + "], got " + shape_str(x.shape()));
    if ((capture || patches) && B != 1)
      throw DimensionError("activation capture and patching need a single instance, got batch " +
                           std::to_string(B));
    if (patches && patches->layers.size() != cfg_.layers)
      throw std::invalid_argument("patch plan layer count does not match the model");
    const bool training = mode == Mode::Train;
    if (training && !dropout_rng) throw std::invalid_argument("training forward needs a dropout rng");
    Rng no_rng;
    Rng& drng = dropout_rng ? *dropout_rng : no_rng;
    const double p = cfg_.dropout;

    Var<Real> h(x);
    for (auto& c : conv_) {
      h = ops::conv1d(h, c.weight, c.bias, c.kernel / 2);
      h = ops::batchnorm1d(h, c.bn_gamma, c.bn_beta, c.bn_stats, training);
      h = ops::relu(h);
    }
    h = ops::transpose_last2(h);  // [B, T, d]
    h = ops::add_tiled(h, pos_);
    h = ops::dropout(h, p, drng, training);

    if (capture) {
      capture->config = cfg_;
      capture->head_context.assign(cfg_.layers, Tensor<Real>());
      capture->attention.assign(cfg_.layers, Tensor<Real>());
      capture->mlp_out.assign(cfg_.layers, Tensor<Real>());
    }
    const std::size_t H = cfg_.heads, dh = cfg_.head_dim();
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      auto& e = layers_[l];
      const auto* lp = patches ? &patches->layers[l] : nullptr;
      Var<Real> q = ops::linear(h, e.wq, e.bq);
      Var<Real> k = ops::linear(h, e.wk, e.bk);
      Var<Real> v = ops::linear(h, e.wv, e.bv);
      Tensor<Real> probs;
      Var<Real> ctx = ops::attention(q, k, v, H, capture ? &probs : nullptr);
      if (lp && !lp->context_mask.empty()) ctx = ops::overwrite(ctx, lp->context_mask, lp->context_values);
      if (capture) {
        capture->attention[l] = probs.reshaped({H, T, T});
        Tensor<Real> hc({H, T, dh});
        for (std::size_t hh = 0; hh < H; ++hh)
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < dh; ++c)
              hc[(hh * T + t) * dh + c] = ctx.value()[t * d + hh * dh + c];
        capture->head_context[l] = std::move(hc);
      }
      Var<Real> attn = ops::linear(ctx, e.wo, e.bo);
      attn = ops::dropout(attn, p, drng, training);
      h = ops::layer_norm(ops::add(h, attn), e.ln1_gamma, e.ln1_beta);

      Var<Real> m = ops::relu(ops::linear(h, e.w1, e.b1));
      m = ops::dropout(m, p, drng, training);
      m = ops::linear(m, e.w2, e.b2);
      if (lp && lp->mlp_values) {
        const std::vector<std::uint8_t> all(m.size(), 1);
        m = ops::overwrite(m, all, *lp->mlp_values);
      }
      if (capture) capture->mlp_out[l] = m.value().reshaped({T, d});
      m = ops::dropout(m, p, drng, training);
      h = ops::layer_norm(ops::add(h, m), e.ln2_gamma, e.ln2_beta);
    }
    Var<Real> pooled = ops::max_pool_over_time(h);
    Var<Real> logits = ops::linear(pooled, head_w_, head_b_);
    if (capture) capture->probs = ops::softmax(logits).value().reshaped({cfg_.classes});
    (void)B;
    return logits;
  }

  /// Eval-mode probabilities for a single instance x: [C, T].
  Tensor<Real> predict(const Tensor<Real>& x, ActivationCache<Real>* capture = nullptr,
                       const PatchPlan<Real>* patches = nullptr) {
    check_instance(x);
    Tensor<Real> xb = x.reshaped({1, x.dim(0), x.dim(1)});
    Var<Real> logits = forward_logits(xb, Mode::Eval, nullptr, capture, patches);
    return ops::softmax(logits).value().reshaped({cfg_.classes});
  }

  void check_instance(const Tensor<Real>& x) const {
    if (x.rank() != 2 || x.dim(0) != cfg_.channels || x.dim(1) != cfg_.seq_len)
      throw DimensionError("model input: expected " +
                           shape_str({cfg_.channels, cfg_.seq_len}) + ", got " +
                           shape_str(x.shape()));
  }

 private:
  static Var<Real> uniform_param(Shape s, double bound, Rng& rng) {
    Tensor<Real> t(std::move(s));
    for (auto& v : t.storage()) v = static_cast<Real>(rng.uniform(-bound, bound));
    return Var<Real>(std::move(t), true);
  }
  static Var<Real> const_param(Shape s, double v) {
    return Var<Real>(Tensor<Real>(std::move(s), static_cast<Real>(v)), true);
  }

  ModelConfig cfg_;
  std::vector<ConvBlock> conv_;
  Var<Real> pos_;
  std::vector<EncoderLayer> layers_;
  Var<Real> head_w_, head_b_;
};

using Model = TstModel<float>;

template <typename Real>
struct ForwardResult {
  Tensor<Real> probs;
  std::optional<ActivationCache<Real>> cache;
};

/// Single-instance forward. Training mode draws dropout from `rng`.
template <typename Real>
ForwardResult<Real> forward(TstModel<Real>& model, const Tensor<Real>& x, Mode mode, bool capture,
                            Rng* rng = nullptr) {
  ForwardResult<Real> r;
  if (capture) r.cache.emplace();
  if (mode == Mode::Eval) {
    r.probs = model.predict(x, capture ? &*r.cache : nullptr);
  } else {
    model.check_instance(x);
    Tensor<Real> xb = x.reshaped({1, x.dim(0), x.dim(1)});
    auto logits = model.forward_logits(xb, mode, rng, capture ? &*r.cache : nullptr);
    r.probs = ops::softmax(logits).value().reshaped({model.config().classes});
  }
  return r;
}

/// Eval-mode forward of `x` with the activations at `targets` overwritten by
/// the donor's. Multiple targets apply simultaneously.
template <typename Real>
Tensor<Real> forward_with_patches(TstModel<Real>& model, const Tensor<Real>& x,
                                  const ActivationCache<Real>& donor,
                                  const std::vector<TapPoint>& targets) {
  PatchPlan<Real> plan = make_patch_plan(model.config(), donor, targets);
  return model.predict(x, nullptr, &plan);
}

}  // namespace tsmi
