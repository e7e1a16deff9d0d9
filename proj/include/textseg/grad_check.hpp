#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "textseg/tensor.hpp"

namespace textseg {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;   // over entries with gradient magnitude >= mag_floor
  double max_abs_err = 0.0;   // over entries below the floor
  std::size_t checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double worst_rel_err = 0.0;
  bool all_pass = true;

  const GradCheckEntry* find(const std::string& name) const {
    for (const auto& e : params)
      if (e.name == name) return &e;
    return nullptr;
  }
};

// Central finite differences (f(x+eps) - f(x-eps)) / (2 eps) against the
// analytic gradients of fn(). fn must be scalar-valued and must read the
// current values of the listed parameters on every call. Entries whose
// gradient magnitude is below mag_floor are compared with an absolute
// tolerance instead of a relative one (both near-zero gradients would make
// the relative error meaningless).
inline GradCheckReport grad_check(
    const std::function<Tensor()>& fn,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double eps = 1e-5, double tol = 1e-4, double abs_tol = 1e-7,
    double mag_floor = 1e-6) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be > 0");

  // Analytic pass.
  for (auto& [name, t] : params) {
    (void)name;
    const_cast<Tensor&>(t).zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = fn();
    if (loss.numel() != 1) {
      throw ContractError("grad_check: function must be scalar-valued");
    }
    tape.backward(loss);
    for (const auto& [name, t] : params) {
      (void)name;
      analytic.push_back(t.has_grad()
                             ? t.grad()
                             : std::vector<double>(t.numel(), 0.0));
    }
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, t] = params[pi];
    GradCheckEntry entry;
    entry.name = name;
    auto& data = const_cast<Tensor&>(t).mutable_values();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double f_plus = fn().item();
      data[i] = saved - eps;
      const double f_minus = fn().item();
      data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double mag = std::max(std::fabs(a), std::fabs(numeric));
      const double abs_err = std::fabs(a - numeric);
      ++entry.checked;
      if (mag < mag_floor) {
        entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
        if (abs_err >= abs_tol) entry.pass = false;
      } else {
        const double rel = abs_err / mag;
        entry.max_rel_err = std::max(entry.max_rel_err, rel);
        if (rel >= tol) entry.pass = false;
      }
    }
    report.worst_rel_err = std::max(report.worst_rel_err, entry.max_rel_err);
    report.all_pass = report.all_pass && entry.pass;
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace textseg
