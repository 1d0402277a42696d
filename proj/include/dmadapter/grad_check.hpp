#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dmadapter/tensor.hpp"

namespace dmadapter {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  // Optional discrete-state signature (e.g. expert selections) read right after
  // each evaluation of f. Entries whose +/-eps evaluations change it straddle a
  // kink and are skipped instead of compared.
  std::function<std::vector<std::size_t>()> signature;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool non_finite = false;
  bool passed = false;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of the scalar f against central differences
// for every entry of every trainable parameter in `params`.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Parameter*>& params,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  std::vector<Parameter*> live;
  for (auto* p : params)
    if (p->trainable) live.push_back(p);

  std::vector<std::size_t> base_signature;
  {
    TapeScope scope;
    for (auto* p : live) p->tensor.zero_grad();
    Tensor loss = f();
    if (opt.signature) base_signature = opt.signature();
    if (!std::isfinite(loss.item())) {
      report.non_finite = true;
      return report;
    }
    backward(loss);
  }

  auto eval = [&](std::vector<std::size_t>* sig) {
    NoGradGuard no_grad;
    const double v = f().item();
    if (sig && opt.signature) *sig = opt.signature();
    return v;
  };

  for (auto* p : live) {
    const std::vector<double> analytic =
        p->tensor.has_grad() ? p->tensor.grad() : std::vector<double>(p->tensor.size(), 0.0);
    auto& data = p->tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      std::vector<std::size_t> sig_plus, sig_minus;
      data[i] = saved + opt.eps;
      const double f_plus = eval(&sig_plus);
      data[i] = saved - opt.eps;
      const double f_minus = eval(&sig_minus);
      data[i] = saved;
      if (opt.signature && (sig_plus != base_signature || sig_minus != base_signature)) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * opt.eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        report.non_finite = true;
        report.worst_param = p->name;
        report.worst_index = i;
        report.passed = false;
        return report;
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.abs_floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        if (rel >= report.max_rel_error) {
          report.worst_param = p->name;
          report.worst_index = i;
          report.worst_analytic = analytic[i];
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.passed = !report.non_finite && report.max_rel_error < opt.tol;
  return report;
}

}  // namespace dmadapter
