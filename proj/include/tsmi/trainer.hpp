#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "tsmi/autodiff.hpp"
#include "tsmi/dataset.hpp"
#include "tsmi/model.hpp"
#include "tsmi/ops.hpp"
#include "tsmi/optim.hpp"
#include "tsmi/parallel.hpp"
#include "tsmi/rng.hpp"

namespace tsmi {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    if (!epochs || !batch_size || lr <= 0.0 || weight_decay < 0.0)
      throw std::invalid_argument("train config: epochs, batch_size and lr must be positive");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Eval-mode class probabilities for every instance of a split.
inline std::vector<Tensor<float>> predict_split(Model& model,
                                                const std::vector<TimeSeriesInstance>& split,
                                                std::size_t jobs = 1) {
  std::vector<Tensor<float>> out(split.size());
  parallel_for(split.size(), jobs, [&](std::size_t i) { out[i] = model.predict(split[i].values); });
  return out;
}

inline int argmax(const Tensor<float>& p) {
  return static_cast<int>(std::max_element(p.storage().begin(), p.storage().end()) -
                          p.storage().begin());
}

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t total = 0;
};

inline EvalResult evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                       std::size_t classes) {
  if (truth.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalResult r;
  r.total = truth.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++r.confusion.at(truth[i]).at(pred[i]);
    hits += truth[i] == pred[i];
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.total);
  return r;
}

inline EvalResult evaluate(Model& model, const std::vector<TimeSeriesInstance>& split,
                           std::size_t jobs = 1) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  auto probs = predict_split(model, split, jobs);
  std::vector<int> truth, pred;
  for (std::size_t i = 0; i < split.size(); ++i) {
    truth.push_back(split[i].label);
    pred.push_back(argmax(probs[i]));
  }
  return evaluate_predictions(truth, pred, model.config().classes);
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Minibatch RAdam training with cross-entropy. Shuffling and dropout draw
/// from the "shuffle" and "dropout" streams of cfg.seed. The last epoch's
/// weights are kept.
inline std::vector<EpochMetrics> train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                                       const EpochCallback& on_epoch = {}, std::size_t eval_jobs = 1) {
  cfg.validate();
  if (ds.train.empty()) throw std::invalid_argument("train: empty training split");
  const ModelConfig& mc = model.config();
  RAdamOptions ro;
  ro.lr = cfg.lr;
  ro.weight_decay = cfg.weight_decay;
  RAdam<float> opt(model.parameters(), ro);
  Rng shuffle_rng(cfg.seed, "shuffle");
  Rng dropout_rng(cfg.seed, "dropout");
  std::vector<std::size_t> order(ds.train.size());
  std::vector<EpochMetrics> log;
  const std::size_t C = mc.channels, T = mc.seq_len;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - start);
      Tensor<float> x({B, C, T});
      std::vector<int> labels(B);
      for (std::size_t b = 0; b < B; ++b) {
        const auto& inst = ds.train[order[start + b]];
        std::copy(inst.values.data(), inst.values.data() + C * T, x.data() + b * C * T);
        labels[b] = inst.label;
      }
      Tape<float> tape;
      double loss_value;
      {
        TapeScope<float> scope(tape);
        Var<float> logits = model.forward_logits(x, Mode::Train, &dropout_rng);
        Var<float> loss = ops::cross_entropy(logits, labels);
        loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) {
          std::ostringstream os;
          os << "training diverged: non-finite loss at epoch " << epoch << ", step " << step;
          throw TrainingDiverged(os.str());
        }
        tape.backward(loss);
      }
      opt.step();
      opt.zero_grad();
      loss_sum += loss_value * static_cast<double>(B);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.test_acc = ds.test.empty() ? 0.0 : evaluate(model, ds.test, eval_jobs).accuracy;
    log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return log;
}

struct InstanceScore {
  std::size_t id = 0;
  int true_class = 0;
  int predicted = 0;
  double p_true = 0.0;
};

struct InstancePair {
  InstanceScore clean;
  InstanceScore corrupt;
  int true_class = 0;
};

inline constexpr double kCleanThreshold = 0.95;
inline constexpr double kCorruptThreshold = 0.50;

inline bool is_clean(const InstanceScore& s) {
  return s.predicted == s.true_class && s.p_true > kCleanThreshold;
}
inline bool is_corrupt(const InstanceScore& s) { return s.p_true < kCorruptThreshold; }

inline std::vector<InstanceScore> score_split(Model& model, const std::vector<TimeSeriesInstance>& split,
                                              std::size_t jobs = 1) {
  auto probs = predict_split(model, split, jobs);
  std::vector<InstanceScore> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    out.push_back({split[i].id, split[i].label, argmax(probs[i]),
                   static_cast<double>(probs[i][static_cast<std::size_t>(split[i].label)])});
  return out;
}

/// Every (clean, corrupt) same-class combination, ranked by clean P
/// descending, then corrupt P ascending, then ids ascending. An empty
/// result means no class has both a clean and a corrupt instance.
inline std::vector<InstancePair> select_pairs(const std::vector<InstanceScore>& scores) {
  std::vector<InstancePair> pairs;
  for (const auto& c : scores) {
    if (!is_clean(c)) continue;
    for (const auto& k : scores)
      if (k.true_class == c.true_class && is_corrupt(k) && k.id != c.id)
        pairs.push_back({c, k, c.true_class});
  }
  std::sort(pairs.begin(), pairs.end(), [](const InstancePair& a, const InstancePair& b) {
    return std::make_tuple(-a.clean.p_true, a.corrupt.p_true, a.clean.id, a.corrupt.id) <
           std::make_tuple(-b.clean.p_true, b.corrupt.p_true, b.clean.id, b.corrupt.id);
  });
  return pairs;
}

inline std::vector<InstancePair> select_pairs(Model& model,
                                              const std::vector<TimeSeriesInstance>& test,
                                              std::size_t jobs = 1) {
  return select_pairs(score_split(model, test, jobs));
}

}  // namespace tsmi
