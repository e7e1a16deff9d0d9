#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/tensor.hpp"

namespace textseg {

// Adam with decoupled weight decay. With zero gradients the parameters move
// only by the weight-decay term.
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg)
      : cfg_(cfg) {
    for (auto& [name, t] : params) {
      if (!t.requires_grad()) continue;
      slots_.push_back(Slot{name, t, std::vector<double>(t.numel(), 0.0),
                            std::vector<double>(t.numel(), 0.0)});
    }
  }

  std::size_t step_count() const { return t_; }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto& p = s.param.mutable_values();
      const bool has_grad = s.param.has_grad();
      const std::vector<double>* g = has_grad ? &s.param.grad() : nullptr;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? (*g)[i] : 0.0;
        p[i] -= lr * cfg_.weight_decay * p[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        if (!std::isfinite(p[i])) {
          throw NumericError("AdamW: parameter " + s.name +
                             " became non-finite at step " +
                             std::to_string(t_));
        }
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

// Linear warm-up to base_lr over the leading fraction of total steps,
// constant afterwards.
inline double warmup_lr(double base_lr, std::size_t step,
                        std::size_t total_steps, double warmup_frac = 0.25) {
  std::size_t warm = static_cast<std::size_t>(
      std::ceil(warmup_frac * static_cast<double>(total_steps)));
  if (warm == 0) warm = 1;
  if (step + 1 >= warm) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
}

}  // namespace textseg
