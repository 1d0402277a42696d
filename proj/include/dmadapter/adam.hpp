#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dmadapter/tensor.hpp"

namespace dmadapter {

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// Adam with bias correction. Only trainable parameters are ever written.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // single_precision rounds updated values and moments to float.
  void step(const std::vector<Parameter*>& params, bool single_precision = false) {
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double c1 = 1.0 - std::pow(beta1_, t);
    const double c2 = 1.0 - std::pow(beta2_, t);
    for (auto* p : params) {
      if (!p->trainable || !p->tensor.has_grad()) continue;
      auto& data = p->tensor.mutable_data();
      const auto& g = p->tensor.grad();
      auto& m = state_.m[p->name];
      auto& v = state_.v[p->name];
      if (m.empty()) m.assign(data.size(), 0.0);
      if (v.empty()) v.assign(data.size(), 0.0);
      for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        if (single_precision) {
          data[i] = static_cast<float>(data[i]);
          m[i] = static_cast<float>(m[i]);
          v[i] = static_cast<float>(v[i]);
        }
      }
    }
  }

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  AdamState state_;
};

}  // namespace dmadapter
