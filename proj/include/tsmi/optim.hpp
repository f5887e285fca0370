#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsmi/autodiff.hpp"

namespace tsmi {

template <typename Real>
struct NamedParam {
  std::string name;
  Var<Real> var;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RAdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Rectified Adam. Weight decay shrinks parameters by lr * wd before the
/// moment update, as in the original RAdam code. While the variance
/// rectification term rho_t is <= 4 the step falls back to bias-corrected
/// momentum without the adaptive denominator. As in the reference code, eps
/// is added to sqrt(v) before bias correction.
template <typename Real>
class RAdam {
 public:
  RAdam(std::vector<NamedParam<Real>> params, RAdamOptions opt)
      : params_(std::move(params)), opt_(opt) {
    for (auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  /// rho_t for a given (1-based) step count.
  static double rho(std::int64_t t, double beta2) {
    const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    const double b2t = std::pow(beta2, static_cast<double>(t));
    return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
  }

  void step() {
    for (const auto& p : params_) {
      if (!p.var.has_grad()) continue;
      for (Real g : p.var.grad().values())
        if (!std::isfinite(static_cast<double>(g)))
          throw NonFiniteGradient("non-finite gradient in parameter '" + p.name + "'");
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(opt_.beta1, t);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t);
    const double rho_inf = 2.0 / (1.0 - opt_.beta2) - 1.0;
    const double rho_t = rho(step_, opt_.beta2);
    const bool rectified = rho_t > 4.0;
    double rect = 0.0;
    if (rectified)
      rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    const Real b1 = static_cast<Real>(opt_.beta1), b2 = static_cast<Real>(opt_.beta2);
    const Real decay = static_cast<Real>(1.0 - opt_.lr * opt_.weight_decay);
    const Real momentum_lr = static_cast<Real>(opt_.lr / bc1);
    const Real adaptive_lr = static_cast<Real>(opt_.lr * rect * std::sqrt(bc2) / bc1);
    const Real eps = static_cast<Real>(opt_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var<Real>& var = params_[k].var;
      if (!var.has_grad()) continue;
      Tensor<Real>& w = var.mutable_value();
      const Tensor<Real>& g = var.grad();
      Tensor<Real>& m = m_[k];
      Tensor<Real>& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (opt_.weight_decay != 0.0) w[i] *= decay;
        m[i] = b1 * m[i] + (Real(1) - b1) * g[i];
        v[i] = b2 * v[i] + (Real(1) - b2) * g[i] * g[i];
        if (rectified)
          w[i] -= adaptive_lr * m[i] / (std::sqrt(v[i]) + eps);
        else
          w[i] -= momentum_lr * m[i];
      }
    }
  }

  std::int64_t step_count() const { return step_; }
  const RAdamOptions& options() const { return opt_; }
  const Tensor<Real>& first_moment(std::size_t k) const { return m_[k]; }
  const Tensor<Real>& second_moment(std::size_t k) const { return v_[k]; }

 private:
  std::vector<NamedParam<Real>> params_;
  RAdamOptions opt_;
  std::vector<Tensor<Real>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace tsmi
