#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dmadapter/ops.hpp"
#include "dmadapter/tensor.hpp"

namespace dmadapter {

// none: no gate, valid only for a single expert (plain adapter).
enum class RouterMode { none, standard, domain };

inline const char* router_mode_name(RouterMode m) {
  switch (m) {
    case RouterMode::none: return "none";
    case RouterMode::standard: return "standard";
    case RouterMode::domain: return "domain";
  }
  return "?";
}

inline RouterMode parse_router_mode(const std::string& s) {
  if (s == "none") return RouterMode::none;
  if (s == "standard") return RouterMode::standard;
  if (s == "domain" || s == "domain_aware") return RouterMode::domain;
  throw ConfigError("unknown router mode '" + s + "' (expected none, standard or domain)");
}

// Whether experts read the residual stream x or LN(x).
enum class AdapterInput { residual, normed };

struct MoeConfig {
  std::size_t n = 6;
  std::size_t top_k = 2;
  std::size_t reduction = 8;
  std::size_t prompts = 4;  // m_p
  RouterMode router = RouterMode::domain;
  AdapterInput input = AdapterInput::residual;
  double init_std = 0.02;

  std::size_t bottleneck(std::size_t d) const { return d / reduction; }

  void validate(std::size_t d) const {
    if (n == 0) throw ConfigError("moe: n must be >= 1");
    if (top_k < 1 || top_k > n)
      throw ConfigError("moe: top_k=" + std::to_string(top_k) + " must lie in [1, n=" + std::to_string(n) + "]");
    if (reduction == 0 || d / reduction < 1)
      throw ConfigError("moe: reduction " + std::to_string(reduction) + " leaves no bottleneck for d=" +
                        std::to_string(d));
    if (router == RouterMode::none && n != 1) throw ConfigError("moe: router 'none' requires n = 1");
    if (router == RouterMode::domain && prompts == 0) throw ConfigError("moe: domain router needs >= 1 prompt");
    if (!(init_std >= 0.0)) throw ConfigError("moe: init_std must be >= 0");
  }
};

// Bottleneck adapter: relu(x W_down + b_down) W_up + b_up.
struct AdapterExpert {
  Parameter* w_down = nullptr;  // [d, m]
  Parameter* b_down = nullptr;  // [m]
  Parameter* w_up = nullptr;    // [m, d]
  Parameter* b_up = nullptr;    // [d]
  std::size_t bottleneck() const { return w_down->tensor.dim(1); }
};

struct DomainRouter {
  Parameter* w = nullptr;        // [d, n]
  Parameter* w_domain = nullptr;  // [d, n], domain mode only
  Parameter* prompts = nullptr;  // [m_p, d], domain mode only
  std::size_t top_k = 1;
  std::size_t n = 1;
  RouterMode mode = RouterMode::standard;
};

struct RoutingOutcome {
  std::vector<IndexList> indices;  // per token, selected experts in descending logit order
  Tensor weights;                  // [T, n], zero off the selected set
  Tensor logits;                   // [T, n]; unset in router-less mode
  std::vector<double> f;           // assignment fractions, constant
  Tensor p_avg;                    // [n], mean routing weight (differentiable)
  std::size_t tokens() const { return indices.size(); }
};

// Contribution of one expert for each row of x ([T, d]); the residual add is the caller's.
inline Tensor adapter_forward(const Tensor& x, const AdapterExpert& e) {
  return linear(relu(linear(x, e.w_down->tensor, e.b_down->tensor)), e.w_up->tensor, e.b_up->tensor);
}

// Domain shift s = mean_j(p_j) W_d, one [n] vector shared by every token.
inline Tensor domain_shift(const DomainRouter& r) {
  const std::size_t d = r.prompts->tensor.dim(1);
  Tensor pooled = reshape(mean_rows(r.prompts->tensor), {1, d});
  return reshape(matmul(pooled, r.w_domain->tensor), {r.n});
}

// f_i = |{t : i selected}| / T.
inline std::vector<double> assignment_fractions(const std::vector<IndexList>& indices, std::size_t n) {
  std::vector<double> f(n, 0.0);
  for (const auto& sel : indices)
    for (auto i : sel) f.at(i) += 1.0;
  for (auto& v : f) v /= static_cast<double>(indices.size());
  return f;
}

// Top-K gate over the rows of x ([T, d]).
inline RoutingOutcome gate(const Tensor& x, const DomainRouter& r) {
  if (r.top_k < 1 || r.top_k > r.n) {
    throw ConfigError("gate: K=" + std::to_string(r.top_k) + " exceeds n=" + std::to_string(r.n));
  }
  if (x.rank() != 2) throw DimensionError("gate: expected [T, d] tokens, got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), n = r.n;
  RoutingOutcome out;
  if (r.mode == RouterMode::none) {
    if (n != 1) throw ConfigError("gate: router-less mode requires n = 1");
    out.indices.assign(t, IndexList{0});
    out.weights = Tensor::full({t, 1}, 1.0);
    out.f = {1.0};
    out.p_avg = Tensor::vector({1.0});
    return out;
  }
  Tensor logits = matmul(x, r.w->tensor);
  if (r.mode == RouterMode::domain) {
    if (!r.w_domain || !r.prompts) throw ConfigError("gate: domain mode needs W_d and prompts");
    logits = add_bias(logits, domain_shift(r));
  }
  out.indices.resize(t);
  for (std::size_t i = 0; i < t; ++i) {
    out.indices[i] = topk_indices(std::span<const double>(logits.data().data() + i * n, n), r.top_k);
  }
  Tensor selected = softmax(gather_cols(logits, out.indices), 1);
  out.weights = scatter_cols(selected, out.indices, n);
  out.logits = logits;
  out.f = assignment_fractions(out.indices, n);
  out.p_avg = mean_rows(out.weights);
  return out;
}

// Single-token convenience: x is [d] or [1, d].
inline RoutingOutcome gate_token(const Tensor& x, const DomainRouter& r) {
  return gate(reshape(x, {1, x.size()}), r);
}

// y = h_o + sum over selected experts of weight_i * Adapter_i(x). Only selected
// (token, expert) pairs are evaluated; each token's contributions are added in
// descending-logit order.
inline std::pair<Tensor, RoutingOutcome> sma_forward(const Tensor& x, const Tensor& h_o,
                                                     const std::vector<AdapterExpert>& experts,
                                                     const DomainRouter& r) {
  if (experts.size() != r.n) {
    throw ConfigError("sma_forward: " + std::to_string(experts.size()) + " experts but router n=" +
                      std::to_string(r.n));
  }
  if (x.shape() != h_o.shape()) {
    throw DimensionError("sma_forward: x " + shape_str(x.shape()) + " and h_o " + shape_str(h_o.shape()) +
                         " differ");
  }
  RoutingOutcome outcome = gate(x, r);
  Tensor y = h_o;
  const std::size_t k = outcome.indices.empty() ? 0 : outcome.indices.front().size();
  for (std::size_t rank = 0; rank < k; ++rank) {
    for (std::size_t e = 0; e < experts.size(); ++e) {
      IndexList rows;
      for (std::size_t t = 0; t < outcome.indices.size(); ++t)
        if (outcome.indices[t][rank] == e) rows.push_back(t);
      if (rows.empty()) continue;
      Tensor contrib = adapter_forward(gather_rows(x, rows), experts[e]);
      y = index_add_rows(y, rows, scale_rows(contrib, gather_entries(outcome.weights, rows, e)));
    }
  }
  return {y, std::move(outcome)};
}

// (f, p_avg) from per-token weights [T, n]; an expert counts as selected where
// its weight is positive.
inline std::pair<std::vector<double>, std::vector<double>> routing_stats(const Tensor& weights) {
  if (weights.rank() != 2) throw DimensionError("routing_stats: expected [T, n] weights");
  const std::size_t t = weights.dim(0), n = weights.dim(1);
  std::vector<double> f(n, 0.0), p(n, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double w = weights.at(i, j);
      if (w > 0.0) f[j] += 1.0;
      p[j] += w;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    f[j] /= static_cast<double>(t);
    p[j] /= static_cast<double>(t);
  }
  return {f, p};
}

// sum_i f_i * p_avg_i, unscaled; f carries no gradient.
inline Tensor load_balance_loss(const RoutingOutcome& outcome) {
  if (outcome.tokens() == 0) throw ArgumentError("load_balance_loss: no tokens");
  return sum(mul(outcome.p_avg, Tensor::vector(outcome.f)));
}

inline Tensor load_balance_loss(const std::vector<double>& f, const Tensor& p_avg) {
  return sum(mul(p_avg, Tensor::vector(f)));
}

// Shannon entropy (natural log) of a probability vector.
inline double usage_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// ---------------------------------------------------------------------------
// Per-(branch, layer) block of experts plus router.

struct DmAdapterLayer {
  std::vector<AdapterExpert> experts;
  DomainRouter router;

  static DmAdapterLayer create(ParameterStore& store, const std::string& prefix, std::size_t d,
                               const MoeConfig& cfg, std::mt19937_64& rng) {
    cfg.validate(d);
    const std::size_t m = cfg.bottleneck(d);
    std::normal_distribution<double> normal(0.0, cfg.init_std);
    auto gaussian = [&](Shape shape) {
      std::vector<double> v(numel(shape));
      for (auto& x : v) x = normal(rng);
      return Tensor(std::move(shape), std::move(v));
    };
    DmAdapterLayer layer;
    for (std::size_t e = 0; e < cfg.n; ++e) {
      const std::string p = prefix + "expert" + std::to_string(e) + ".";
      AdapterExpert ex;
      ex.w_down = &store.add(p + "W_down", gaussian({d, m}), true);
      ex.b_down = &store.add(p + "b_down", Tensor::zeros({m}), true);
      ex.w_up = &store.add(p + "W_up", Tensor::zeros({m, d}), true);
      ex.b_up = &store.add(p + "b_up", Tensor::zeros({d}), true);
      layer.experts.push_back(ex);
    }
    layer.router.n = cfg.n;
    layer.router.top_k = cfg.top_k;
    layer.router.mode = cfg.router;
    if (cfg.router != RouterMode::none) {
      layer.router.w = &store.add(prefix + "router.W", gaussian({d, cfg.n}), true);
    }
    if (cfg.router == RouterMode::domain) {
      layer.router.w_domain = &store.add(prefix + "router.W_d", gaussian({d, cfg.n}), true);
      layer.router.prompts = &store.add(prefix + "router.prompts", gaussian({cfg.prompts, d}), true);
    }
    return layer;
  }

  std::pair<Tensor, RoutingOutcome> forward(const Tensor& x, const Tensor& h_o) const {
    return sma_forward(x, h_o, experts, router);
  }
};

// ---------------------------------------------------------------------------
// Counting

struct BranchShape {
  std::size_t d = 0;
  std::size_t layers = 0;
};

struct ParamCountConfig {
  std::vector<BranchShape> branches;
  std::size_t reduction = 8;
  std::size_t n = 6;
  std::size_t prompts = 4;
  RouterMode router = RouterMode::domain;
};

struct ParamBreakdown {
  std::size_t adapters = 0;
  std::size_t router = 0;
  std::size_t domain_router = 0;
  std::size_t prompts = 0;
  std::size_t total() const { return adapters + router + domain_router + prompts; }
};

// Closed-form trainable-parameter count of DM-Adapter blocks on every layer of
// every branch.
inline ParamBreakdown count_trainable_params(const ParamCountConfig& cfg) {
  ParamBreakdown b;
  for (const auto& br : cfg.branches) {
    const std::size_t d = br.d, m = d / cfg.reduction;
    if (m < 1) throw ConfigError("count_trainable_params: bottleneck is empty for d=" + std::to_string(d));
    b.adapters += br.layers * cfg.n * (d * m + m + m * d + d);
    if (cfg.router != RouterMode::none) b.router += br.layers * d * cfg.n;
    if (cfg.router == RouterMode::domain) {
      b.domain_router += br.layers * d * cfg.n;
      b.prompts += br.layers * cfg.prompts * d;
    }
  }
  return b;
}

// ViT-B/16 + CLIP text transformer scale: d_v=768, d_t=512, 12+12 layers.
inline ParamCountConfig paper_clip_b16_counts() {
  return {{{768, 12}, {512, 12}}, 8, 6, 4, RouterMode::domain};
}

struct FlopCount {
  std::uint64_t expert_flops = 0;          // per token
  std::uint64_t router_flops = 0;          // per token
  std::uint64_t domain_flops_per_layer = 0;  // once per layer per batch
};

// Multiply-add counted as 2 flops.
inline FlopCount flop_count_per_token(std::size_t d, std::size_t m, std::size_t n, std::size_t k,
                                      RouterMode mode) {
  FlopCount f;
  f.expert_flops = static_cast<std::uint64_t>(k) * 2 * (2 * d * m);
  if (mode != RouterMode::none) f.router_flops = 2 * static_cast<std::uint64_t>(d) * n;
  if (mode == RouterMode::domain) f.domain_flops_per_layer = 2 * static_cast<std::uint64_t>(d) * n;
  return f;
}

}  // namespace dmadapter
