#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "dmadapter/ops.hpp"
#include "dmadapter/tensor.hpp"

namespace dmadapter {

struct SdmConfig {
  double tau = 0.02;
  double epsilon = 1e-8;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("sdm: tau must be > 0");
    if (!(epsilon >= 0.0)) throw ConfigError("sdm: epsilon must be >= 0");
  }
};

// q[i][j] = 1[id_i == id_j] / |{k : id_k == id_i}|, as an [N, N] constant.
inline Tensor match_distribution(const std::vector<int>& ids) {
  if (ids.empty()) throw ArgumentError("match_distribution: empty batch");
  const std::size_t n = ids.size();
  std::map<int, double> counts;
  for (int id : ids) counts[id] += 1.0;
  std::vector<double> q(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (ids[i] == ids[j]) q[i * n + j] = 1.0 / counts[ids[i]];
  return Tensor({n, n}, std::move(q));
}

namespace detail {

inline void require_unit_rows(const char* what, const Tensor& x) {
  constexpr double tol = 1e-6;
  const std::size_t r = x.dim(0), c = x.dim(1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x.at(i, j) * x.at(i, j);
    if (std::abs(std::sqrt(s) - 1.0) > tol) {
      throw ContractViolation(std::string("sdm: ") + what + " row " + std::to_string(i) + " has norm " +
                              std::to_string(std::sqrt(s)) + ", expected unit rows");
    }
  }
}

}  // namespace detail

// (1/N) sum_i sum_j p_ij log(p_ij / (q_ij + eps)), p_i. = softmax_j(V_i . T_j / tau).
inline Tensor sdm_i2t(const Tensor& v, const Tensor& t, const Tensor& q, const SdmConfig& cfg = {}) {
  cfg.validate();
  if (v.rank() != 2 || t.rank() != 2 || v.shape() != t.shape()) {
    throw DimensionError("sdm: feature shapes " + shape_str(v.shape()) + " and " + shape_str(t.shape()) +
                         " must be equal [N, d]");
  }
  const std::size_t n = v.dim(0);
  if (q.rank() != 2 || q.dim(0) != n || q.dim(1) != n) {
    throw DimensionError("sdm: q " + shape_str(q.shape()) + " is not [N, N] for N=" + std::to_string(n));
  }
  detail::require_unit_rows("image/query", v);
  detail::require_unit_rows("text/gallery", t);
  Tensor logits = scale(matmul(v, transpose(t)), 1.0 / cfg.tau);
  Tensor p = softmax(logits, 1);
  Tensor log_p = log_softmax(logits, 1);
  std::vector<double> log_q(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    const double qe = q[i] + cfg.epsilon;
    log_q[i] = qe > 0.0 ? std::log(qe) : -std::numeric_limits<double>::infinity();
  }
  Tensor kl = mul(p, sub(log_p, Tensor({n, n}, std::move(log_q))));
  return scale(sum(kl), 1.0 / static_cast<double>(n));
}

// i2t plus t2i, the latter built from the transposed match matrix.
inline Tensor sdm_bidirectional(const Tensor& v, const Tensor& t, const Tensor& q, const SdmConfig& cfg = {}) {
  const std::size_t n = q.dim(0);
  std::vector<double> qt(q.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) qt[j * n + i] = q[i * n + j];
  return add(sdm_i2t(v, t, q, cfg), sdm_i2t(t, v, Tensor(q.shape(), std::move(qt)), cfg));
}

// sdm + alpha * (lb_image + lb_text)
inline Tensor total_loss(const Tensor& sdm, const Tensor& lb_image, const Tensor& lb_text, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("total_loss: alpha must be >= 0");
  if (alpha == 0.0) return sdm;
  return add(sdm, scale(add(lb_image, lb_text), alpha));
}

}  // namespace dmadapter
