#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "memreg/tensor.hpp"

namespace memreg {

/// Polynomial learning-rate decay: base_lr * (1 - iter/total)^power.
struct PolySchedule {
  double base_lr = 0.0;
  std::size_t total_iters = 0;
  double power = 0.9;

  double lr(std::size_t iter) const {
    if (total_iters == 0) throw std::invalid_argument("poly schedule: total_iters must be > 0");
    if (iter > total_iters)
      throw std::out_of_range("poly schedule: iter " + std::to_string(iter) +
                              " past horizon " + std::to_string(total_iters));
    double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total_iters);
    return base_lr * std::pow(frac, power);
  }
};

/// SGD with classical momentum:
///   v <- mu * v + g;  p <- p - lr * v
template <typename T = float>
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
    for (auto& [name, p] : params) {
      if (!p.has_grad())
        throw std::logic_error("optimizer step: parameter '" + name + "' has no gradient");
      auto& v = velocity_[name];
      if (v.size() != p.numel()) v.assign(p.numel(), T(0));
      auto g = p.grad();
      auto d = p.data();
      T mu = static_cast<T>(momentum_);
      T eta = static_cast<T>(lr);
      for (std::size_t i = 0; i < d.size(); ++i) {
        v[i] = mu * v[i] + g[i];
        d[i] -= eta * v[i];
      }
    }
    ++step_count_;
  }

  std::size_t step_count() const { return step_count_; }
  double momentum() const { return momentum_; }

  std::unordered_map<std::string, std::vector<T>>& state() { return velocity_; }
  const std::unordered_map<std::string, std::vector<T>>& state() const { return velocity_; }
  void set_step_count(std::size_t n) { step_count_ = n; }

 private:
  double momentum_;
  std::size_t step_count_ = 0;
  std::unordered_map<std::string, std::vector<T>> velocity_;
};

/// Adam with bias correction (Kingma & Ba defaults).
template <typename T = float>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
    ++step_count_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (auto& [name, p] : params) {
      if (!p.has_grad())
        throw std::logic_error("optimizer step: parameter '" + name + "' has no gradient");
      auto& s = slots_[name];
      if (s.m.size() != p.numel()) {
        s.m.assign(p.numel(), T(0));
        s.v.assign(p.numel(), T(0));
      }
      auto g = p.grad();
      auto d = p.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        s.m[i] = static_cast<T>(beta1_) * s.m[i] + static_cast<T>(1.0 - beta1_) * g[i];
        s.v[i] = static_cast<T>(beta2_) * s.v[i] + static_cast<T>(1.0 - beta2_) * g[i] * g[i];
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        d[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  struct Slot {
    std::vector<T> m, v;
  };

  std::size_t step_count() const { return step_count_; }
  std::unordered_map<std::string, Slot>& state() { return slots_; }
  const std::unordered_map<std::string, Slot>& state() const { return slots_; }
  void set_step_count(std::size_t n) { step_count_ = n; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t step_count_ = 0;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace memreg
