#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmi/autodiff.hpp"
#include "tsmi/checkpoint.hpp"
#include "tsmi/dataset.hpp"
#include "tsmi/model.hpp"
#include "tsmi/ops.hpp"
#include "tsmi/optim.hpp"
#include "tsmi/parallel.hpp"
#include "tsmi/rng.hpp"
#include "tsmi/trainer.hpp"

namespace tsmi {

inline constexpr double kActiveThreshold = 1e-6;
inline constexpr double kDeadThreshold = 1e-6;

struct SaeConfig {
  std::size_t input_dim = 64;
  std::size_t code_dim = 128;
  double lambda = 1e-3;
  double lr = 1e-3;
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  bool center = true;
  std::size_t layer = 0;  // encoder layer whose MLP output is modelled

  void validate() const {
    if (!input_dim || !code_dim) throw std::invalid_argument("SAE dims must be >= 1");
    if (lambda < 0.0) throw std::invalid_argument("SAE lambda must be >= 0");
    if (lr <= 0.0 || !batch_size) throw std::invalid_argument("SAE lr and batch size must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SaeConfig& c) {
  j = {{"input_dim", c.input_dim}, {"code_dim", c.code_dim}, {"lambda", c.lambda},
       {"lr", c.lr},               {"epochs", c.epochs},     {"batch_size", c.batch_size},
       {"seed", c.seed},           {"center", c.center},     {"layer", c.layer}};
}

inline void from_json(const nlohmann::json& j, SaeConfig& c) {
  j.at("input_dim").get_to(c.input_dim);
  j.at("code_dim").get_to(c.code_dim);
  j.at("lambda").get_to(c.lambda);
  j.at("lr").get_to(c.lr);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  j.at("center").get_to(c.center);
  j.at("layer").get_to(c.layer);
}

/// Row-per-(instance, timestep) activations from one tap, instance-major.
struct ActivationSet {
  struct Origin {
    std::size_t instance = 0;
    std::size_t timestep = 0;
    int label = 0;
  };
  Tensor<float> rows;  // [N, d]
  std::vector<Origin> origin;
};

inline ActivationSet collect_activations(Model& model, const std::vector<TimeSeriesInstance>& split,
                                         std::size_t layer = 0, std::size_t jobs = 1) {
  const auto& cfg = model.config();
  TapPoint::mlp_out(layer).validate(cfg);
  const std::size_t T = cfg.seq_len, d = cfg.d_model;
  ActivationSet set;
  set.rows = Tensor<float>({split.size() * T, d});
  set.origin.resize(split.size() * T);
  parallel_for(split.size(), jobs, [&](std::size_t i) {
    ActivationCache<float> cache;
    model.predict(split[i].values, &cache);
    const Tensor<float>& m = cache.mlp_out[layer];
    std::copy(m.data(), m.data() + T * d, set.rows.data() + i * T * d);
    for (std::size_t t = 0; t < T; ++t) set.origin[i * T + t] = {split[i].id, t, split[i].label};
  });
  return set;
}

/// Encoder z = relu((x - mu) W_enc + b_enc), decoder x_hat = z W_dec + b_dec + mu.
class SparseAutoencoder {
 public:
  explicit SparseAutoencoder(const SaeConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed, "sae_init");
    const std::size_t d = cfg_.input_dim, h = cfg_.code_dim;
    auto uni = [&](Shape s, double bound) {
      Tensor<float> t(std::move(s));
      for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-bound, bound));
      return Var<float>(std::move(t), true);
    };
    w_enc_ = uni({d, h}, 1.0 / std::sqrt(static_cast<double>(d)));
    b_enc_ = Var<float>(Tensor<float>({h}), true);
    w_dec_ = uni({h, d}, 1.0 / std::sqrt(static_cast<double>(h)));
    b_dec_ = Var<float>(Tensor<float>({d}), true);
    mean_ = Tensor<float>({d});
  }

  const SaeConfig& config() const { return cfg_; }
  const Tensor<float>& mean() const { return mean_; }
  void set_mean(Tensor<float> m) {
    require_shape(m.shape(), {cfg_.input_dim}, "SAE mean");
    mean_ = std::move(m);
  }

  std::vector<NamedParam<float>> parameters() {
    return {{"w_enc", w_enc_}, {"b_enc", b_enc_}, {"w_dec", w_dec_}, {"b_dec", b_dec_}};
  }

  struct Graph {
    Var<float> code, recon, loss;
  };

  /// Differentiable loss on a batch x [B, d]:
  ///   (1/B) * sum_rows( ||x - x_hat||^2 + lambda * sum_j |z_j| )
  Graph forward(const Tensor<float>& x) {
    require_rank(x.shape(), 2, "SAE input");
    if (x.dim(1) != cfg_.input_dim) throw DimensionError("SAE input width mismatch: " + shape_str(x.shape()));
    const std::size_t B = x.dim(0);
    Var<float> xc(centered(x));
    Graph g;
    g.code = ops::relu(ops::linear(xc, w_enc_, b_enc_));
    g.recon = ops::linear(g.code, w_dec_, b_dec_);  // centered reconstruction
    Var<float> err = ops::sum_squares(ops::sub(g.recon, xc));
    Var<float> pen = ops::scale(ops::abs_sum(g.code), static_cast<float>(cfg_.lambda));
    g.loss = ops::scale(ops::add(err, pen), 1.0f / static_cast<float>(B));
    return g;
  }

  Tensor<float> encode(const Tensor<float>& x) {
    return forward(x).code.value();
  }

  Tensor<float> decode(const Tensor<float>& z) {
    Var<float> r = ops::linear(Var<float>(z), w_dec_, b_dec_);
    Tensor<float> out = r.value();
    const std::size_t d = cfg_.input_dim;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += mean_[i % d];
    return out;
  }

  const Tensor<float>& w_enc() const { return w_enc_.value(); }
  const Tensor<float>& b_enc() const { return b_enc_.value(); }
  const Tensor<float>& w_dec() const { return w_dec_.value(); }
  const Tensor<float>& b_dec() const { return b_dec_.value(); }

  TensorContainer to_container() const {
    TensorContainer c;
    c.format = "sae";
    c.config = cfg_;
    c.tensors = {{"w_enc", w_enc_.value()}, {"b_enc", b_enc_.value()}, {"w_dec", w_dec_.value()},
                 {"b_dec", b_dec_.value()}, {"mean", mean_}};
    return c;
  }

  static SparseAutoencoder from_container(const TensorContainer& c) {
    if (c.format != "sae") throw CheckpointError("expected an sae checkpoint, found '" + c.format + "'");
    SparseAutoencoder s(c.config.get<SaeConfig>());
    auto load = [&](Var<float>& v, const char* name) {
      const Tensor<float>& t = c.get(name);
      if (t.shape() != v.shape())
        throw CheckpointError(std::string("SAE tensor '") + name + "' has shape " + shape_str(t.shape()));
      v.mutable_value() = t;
    };
    load(s.w_enc_, "w_enc");
    load(s.b_enc_, "b_enc");
    load(s.w_dec_, "w_dec");
    load(s.b_dec_, "b_dec");
    s.set_mean(c.get("mean"));
    return s;
  }

 private:
  Tensor<float> centered(const Tensor<float>& x) const {
    Tensor<float> xc = x;
    const std::size_t d = cfg_.input_dim;
    for (std::size_t i = 0; i < xc.size(); ++i) xc[i] -= mean_[i % d];
    return xc;
  }

  SaeConfig cfg_;
  Var<float> w_enc_, b_enc_, w_dec_, b_dec_;
  Tensor<float> mean_;
};

inline void save_sae(const SparseAutoencoder& sae, const std::filesystem::path& path) {
  write_container(path, sae.to_container());
}

inline SparseAutoencoder load_sae(const std::filesystem::path& path) {
  return SparseAutoencoder::from_container(read_container(path));
}

/// Same objective as SparseAutoencoder::forward, evaluated with plain loops
/// in double precision and no shared code path.
inline double sae_loss_direct(const SparseAutoencoder& sae, const Tensor<float>& x) {
  const std::size_t B = x.dim(0), d = sae.config().input_dim, h = sae.config().code_dim;
  const auto& We = sae.w_enc();
  const auto& be = sae.b_enc();
  const auto& Wd = sae.w_dec();
  const auto& bd = sae.b_dec();
  const auto& mu = sae.mean();
  double total = 0.0;
  std::vector<double> z(h);
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      double a = be[j];
      for (std::size_t i = 0; i < d; ++i) a += (static_cast<double>(x[r * d + i]) - mu[i]) * We[i * h + j];
      z[j] = a > 0.0 ? a : 0.0;
      total += sae.config().lambda * std::abs(z[j]);
    }
    for (std::size_t i = 0; i < d; ++i) {
      double xh = static_cast<double>(bd[i]) + mu[i];
      for (std::size_t j = 0; j < h; ++j) xh += z[j] * Wd[j * d + i];
      const double e = static_cast<double>(x[r * d + i]) - xh;
      total += e * e;
    }
  }
  return total / static_cast<double>(B);
}

struct SaeTrainResult {
  std::vector<double> loss_curve;  // mean batch loss per epoch
  double active_fraction = 0.0;    // fraction of code entries > 1e-6
  double reconstruction_mse = 0.0;  // per element
  double input_variance = 0.0;     // mean per-feature variance
};

struct SaeStats {
  double active_fraction = 0.0;
  double reconstruction_mse = 0.0;
  double input_variance = 0.0;
};

inline SaeStats sae_stats(SparseAutoencoder& sae, const Tensor<float>& x) {
  const std::size_t N = x.dim(0), d = x.dim(1);
  Tensor<float> z = sae.encode(x);
  Tensor<float> xh = sae.decode(z);
  SaeStats s;
  std::size_t active = 0;
  for (float v : z.values()) active += v > kActiveThreshold;
  s.active_fraction = static_cast<double>(active) / static_cast<double>(z.size());
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (static_cast<double>(x[i]) - xh[i]) * (x[i] - xh[i]);
  s.reconstruction_mse = se / static_cast<double>(x.size());
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double m = 0.0;
    for (std::size_t r = 0; r < N; ++r) m += x[r * d + i];
    m /= static_cast<double>(N);
    double v = 0.0;
    for (std::size_t r = 0; r < N; ++r) v += (x[r * d + i] - m) * (x[r * d + i] - m);
    var += v / static_cast<double>(N);
  }
  s.input_variance = var / static_cast<double>(d);
  return s;
}

inline SparseAutoencoder train_sae(const Tensor<float>& x, SaeConfig cfg, SaeTrainResult* result = nullptr) {
  require_rank(x.shape(), 2, "SAE training data");
  cfg.input_dim = x.dim(1);
  SparseAutoencoder sae(cfg);
  const std::size_t N = x.dim(0), d = x.dim(1);
  if (cfg.center) {
    Tensor<float> mu({d});
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < N; ++r) s += x[r * d + i];
      mu[i] = static_cast<float>(s / static_cast<double>(N));
    }
    sae.set_mean(std::move(mu));
  }
  RAdamOptions ro;
  ro.lr = cfg.lr;
  RAdam<float> opt(sae.parameters(), ro);
  Rng rng(cfg.seed, "sae_shuffle");
  std::vector<std::size_t> order(N);
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, N - start);
      Tensor<float> xb({B, d});
      for (std::size_t b = 0; b < B; ++b)
        std::copy(x.data() + order[start + b] * d, x.data() + (order[start + b] + 1) * d, xb.data() + b * d);
      Tape<float> tape;
      {
        TapeScope<float> scope(tape);
        auto g = sae.forward(xb);
        const double lv = g.loss.value()[0];
        if (!std::isfinite(lv))
          throw TrainingDiverged("SAE training diverged at epoch " + std::to_string(epoch + 1));
        sum += lv;
        tape.backward(g.loss);
      }
      opt.step();
      opt.zero_grad();
      ++batches;
    }
    curve.push_back(sum / static_cast<double>(batches));
  }
  if (result) {
    SaeStats st = sae_stats(sae, x);
    result->loss_curve = std::move(curve);
    result->active_fraction = st.active_fraction;
    result->reconstruction_mse = st.reconstruction_mse;
    result->input_variance = st.input_variance;
  }
  return sae;
}

struct NeuronReport {
  struct Entry {
    std::size_t instance = 0;
    std::size_t timestep = 0;
    double activation = 0.0;
    int label = 0;
  };
  std::size_t neuron = 0;
  bool dead = false;
  double max_activation = 0.0;
  double mean_activation = 0.0;
  double active_fraction = 0.0;
  int dominant_class = -1;         // most common label among entries
  double dominant_share = 0.0;     // its share of the entries
  std::vector<Entry> entries;      // descending activation
};

/// Codes for every row of an activation set: [N, H].
inline Tensor<float> encode_all(SparseAutoencoder& sae, const ActivationSet& acts) {
  return sae.encode(acts.rows);
}

inline NeuronReport top_activating(const Tensor<float>& codes, const ActivationSet& acts,
                                   std::size_t neuron, std::size_t top_n) {
  const std::size_t N = codes.dim(0), H = codes.dim(1);
  if (neuron >= H)
    throw std::out_of_range("SAE neuron " + std::to_string(neuron) + " outside [0," + std::to_string(H) + ")");
  NeuronReport rep;
  rep.neuron = neuron;
  std::vector<std::size_t> idx;
  double sum = 0.0;
  std::size_t active = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const double a = codes[r * H + neuron];
    rep.max_activation = std::max(rep.max_activation, a);
    sum += a;
    if (a > kActiveThreshold) {
      ++active;
      idx.push_back(r);
    }
  }
  rep.mean_activation = N ? sum / static_cast<double>(N) : 0.0;
  rep.active_fraction = N ? static_cast<double>(active) / static_cast<double>(N) : 0.0;
  rep.dead = rep.max_activation < kDeadThreshold;
  if (rep.dead) return rep;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return codes[a * H + neuron] > codes[b * H + neuron];
  });
  if (idx.size() > top_n) idx.resize(top_n);
  std::map<int, std::size_t> counts;
  for (std::size_t r : idx) {
    const auto& o = acts.origin[r];
    rep.entries.push_back({o.instance, o.timestep, codes[r * H + neuron], o.label});
    ++counts[o.label];
  }
  for (const auto& [label, n] : counts)
    if (static_cast<double>(n) / idx.size() > rep.dominant_share) {
      rep.dominant_class = label;
      rep.dominant_share = static_cast<double>(n) / idx.size();
    }
  return rep;
}

/// Code values for one instance, laid out [H_sae, T] (neurons x timesteps).
inline Tensor<float> activation_heatmap(Model& model, SparseAutoencoder& sae, const Tensor<float>& instance) {
  ActivationCache<float> cache;
  model.predict(instance, &cache);
  const std::size_t layer = sae.config().layer;
  if (layer >= cache.mlp_out.size()) throw std::out_of_range("SAE layer outside model");
  Tensor<float> z = sae.encode(cache.mlp_out[layer]);  // [T, H]
  const std::size_t T = z.dim(0), H = z.dim(1);
  Tensor<float> out({H, T});
  kernels::transpose(T, H, z.data(), out.data());
  return out;
}

inline void write_heatmap_csv(const Tensor<float>& heat, std::ostream& out) {
  const std::size_t H = heat.dim(0), T = heat.dim(1);
  out << "neuron";
  for (std::size_t t = 0; t < T; ++t) out << ",t" << t;
  out << '\n';
  char buf[32];
  for (std::size_t j = 0; j < H; ++j) {
    out << j;
    for (std::size_t t = 0; t < T; ++t) {
      std::snprintf(buf, sizeof buf, "%.9g", heat[j * T + t]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

struct SteerResult {
  std::size_t neuron = 0;
  double gain = 1.0;
  std::vector<double> probs_before;
  std::vector<double> probs_after;
  std::vector<double> delta;  // after - before, per class
};

/// Scales code unit `neuron` by `gain` at every timestep of the instance's
/// MLP output, decodes, and substitutes the reconstruction for that MLP
/// output in a fresh forward.
inline SteerResult sae_steer_patch(Model& model, SparseAutoencoder& sae, const Tensor<float>& instance,
                                   std::size_t neuron, double gain) {
  if (neuron >= sae.config().code_dim)
    throw std::out_of_range("SAE neuron " + std::to_string(neuron) + " outside [0," +
                            std::to_string(sae.config().code_dim) + ")");
  const auto& cfg = model.config();
  const std::size_t layer = sae.config().layer;
  ActivationCache<float> cache;
  Tensor<float> before = model.predict(instance, &cache);
  Tensor<float> z = sae.encode(cache.mlp_out.at(layer));
  const std::size_t H = z.dim(1);
  for (std::size_t t = 0; t < z.dim(0); ++t) z[t * H + neuron] *= static_cast<float>(gain);
  Tensor<float> xh = sae.decode(z);
  PatchPlan<float> plan;
  plan.layers.resize(cfg.layers);
  plan.layers[layer].mlp_values = xh.reshaped({1, cfg.seq_len, cfg.d_model});
  Tensor<float> after = model.predict(instance, nullptr, &plan);
  SteerResult r;
  r.neuron = neuron;
  r.gain = gain;
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    r.probs_before.push_back(before[k]);
    r.probs_after.push_back(after[k]);
    r.delta.push_back(static_cast<double>(after[k]) - before[k]);
  }
  return r;
}

}  // namespace tsmi
