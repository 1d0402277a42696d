#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dmadapter/grad_check.hpp"
#include "dmadapter/trainer.hpp"

namespace dmadapter {

// ---------------------------------------------------------------------------
// Ablation arms. Each arm touches only n, top_k, router mode and alpha.

struct ArmSpec {
  std::string name;
  std::size_t n;
  std::size_t top_k;
  RouterMode router;
  double alpha;
};

inline std::vector<ArmSpec> ablation_arms() {
  return {
      {"MLP-Adapter", 1, 1, RouterMode::none, 0.0},
      {"SMA w/o LB", 6, 2, RouterMode::standard, 0.0},
      {"SMA w/ LB", 6, 2, RouterMode::standard, 0.5},
      {"DM-Adapter", 6, 2, RouterMode::domain, 0.5},
  };
}

inline RunConfig apply_arm(RunConfig cfg, const ArmSpec& arm) {
  cfg.moe.n = arm.n;
  cfg.moe.top_k = arm.top_k;
  cfg.moe.router = arm.router;
  cfg.loss.alpha = arm.alpha;
  return cfg;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct RunSummary {
  std::string arm;
  std::uint64_t seed = 0;
  double rank1 = 0.0;
  double map = 0.0;
  double entropy_image = 0.0;
  double entropy_text = 0.0;
  double entropy() const { return 0.5 * (entropy_image + entropy_text); }
};

struct ArmSummary {
  std::string arm;
  double median_rank1 = 0.0;
  double min_rank1 = 0.0;
  double max_rank1 = 0.0;
  double median_entropy = 0.0;
  double min_entropy = 0.0;
  double max_entropy = 0.0;
};

struct AblationTable {
  std::vector<RunSummary> runs;
  std::vector<ArmSummary> arms;

  const ArmSummary& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.arm == name) return a;
    throw ArgumentError("no ablation arm named '" + name + "'");
  }

  // Per-run rows first, then one median row per arm.
  std::string to_csv() const {
    using detail::fmt_double;
    std::ostringstream os;
    os << "arm,seed,rank1,map,entropy_image,entropy_text,rank1_min,rank1_max,entropy_min,entropy_max\n";
    for (const auto& r : runs) {
      os << r.arm << ',' << r.seed << ',' << fmt_double(r.rank1) << ',' << fmt_double(r.map) << ','
         << fmt_double(r.entropy_image) << ',' << fmt_double(r.entropy_text) << ",,,,\n";
    }
    for (const auto& a : arms) {
      os << a.arm << ",median," << fmt_double(a.median_rank1) << ",,," << ',' << fmt_double(a.min_rank1) << ','
         << fmt_double(a.max_rank1) << ',' << fmt_double(a.min_entropy) << ',' << fmt_double(a.max_entropy) << '\n';
    }
    return os.str();
  }
};

// Trains one config and summarizes its final epoch.
inline RunSummary train_and_summarize(const RunConfig& cfg, const std::string& label) {
  Trainer trainer(cfg);
  trainer.run();
  RunSummary s;
  s.arm = label;
  s.seed = cfg.seed;
  const auto e = trainer.evaluate(trainer.dataset().test);
  s.rank1 = e.report.rank1;
  s.map = e.report.map;
  s.entropy_image = e.entropy_image;
  s.entropy_text = e.entropy_text;
  return s;
}

inline ArmSummary summarize_arm(const std::string& name, const std::vector<RunSummary>& runs) {
  std::vector<double> r1, ent;
  for (const auto& r : runs) {
    if (r.arm != name) continue;
    r1.push_back(r.rank1);
    ent.push_back(r.entropy());
  }
  ArmSummary a;
  a.arm = name;
  a.median_rank1 = median(r1);
  a.median_entropy = median(ent);
  if (!r1.empty()) {
    a.min_rank1 = *std::min_element(r1.begin(), r1.end());
    a.max_rank1 = *std::max_element(r1.begin(), r1.end());
    a.min_entropy = *std::min_element(ent.begin(), ent.end());
    a.max_entropy = *std::max_element(ent.begin(), ent.end());
  }
  return a;
}

inline AblationTable run_ablation_suite(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                        std::size_t min_seeds = 5) {
  if (seeds.size() < min_seeds) {
    throw ArgumentError("ablation needs at least " + std::to_string(min_seeds) + " seeds, got " +
                        std::to_string(seeds.size()));
  }
  AblationTable table;
  for (const auto& arm : ablation_arms()) {
    for (auto seed : seeds) {
      RunConfig cfg = apply_arm(base, arm);
      cfg.seed = seed;
      table.runs.push_back(train_and_summarize(cfg, arm.name));
    }
  }
  for (const auto& arm : ablation_arms()) table.arms.push_back(summarize_arm(arm.name, table.runs));
  return table;
}

// ---------------------------------------------------------------------------
// Hyper-parameter sweeps

enum class SweepParam { n_experts, top_k };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "n_experts" || s == "n-experts" || s == "n") return SweepParam::n_experts;
  if (s == "top_k" || s == "top-k" || s == "k") return SweepParam::top_k;
  throw ArgumentError("unknown sweep parameter '" + s + "' (expected n_experts or top_k)");
}

inline const char* sweep_param_name(SweepParam p) { return p == SweepParam::n_experts ? "n_experts" : "top_k"; }

struct SweepPoint {
  std::size_t value = 0;
  double median_rank1 = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> rank1;  // one per seed
  std::size_t trainable_params = 0;
  std::uint64_t expert_flops = 0;
};

struct SweepTable {
  SweepParam param = SweepParam::n_experts;
  std::vector<SweepPoint> points;

  std::string to_csv() const {
    std::ostringstream os;
    os << sweep_param_name(param) << ",median_rank1,trainable_params,expert_flops_per_token\n";
    for (const auto& p : points) {
      os << p.value << ',' << detail::fmt_double(p.median_rank1) << ',' << p.trainable_params << ','
         << p.expert_flops << '\n';
    }
    return os.str();
  }
};

inline RunConfig apply_sweep_value(RunConfig cfg, SweepParam param, std::size_t value) {
  (param == SweepParam::n_experts ? cfg.moe.n : cfg.moe.top_k) = value;
  return cfg;
}

// Trainable DM-Adapter parameters of the configured toy model.
inline std::size_t trainable_param_count(const RunConfig& cfg) {
  cfg.moe.validate(cfg.backbone.d_model);
  ParamCountConfig pc;
  pc.branches = {{cfg.backbone.d_model, cfg.backbone.n_layers}, {cfg.backbone.d_model, cfg.backbone.n_layers}};
  pc.reduction = cfg.moe.reduction;
  pc.n = cfg.moe.n;
  pc.prompts = cfg.moe.prompts;
  pc.router = cfg.moe.router;
  return count_trainable_params(pc).total();
}

// An empty seed list computes costs only.
inline SweepTable run_hyperparam_sweep(const RunConfig& base, SweepParam param,
                                       const std::vector<std::size_t>& values,
                                       const std::vector<std::uint64_t>& seeds) {
  if (values.empty()) throw ArgumentError("sweep needs at least one value");
  SweepTable table;
  table.param = param;
  for (auto value : values) {
    const RunConfig cfg = apply_sweep_value(base, param, value);
    cfg.validate();
    SweepPoint pt;
    pt.value = value;
    pt.trainable_params = trainable_param_count(cfg);
    const std::size_t d = cfg.backbone.d_model;
    pt.expert_flops = flop_count_per_token(d, cfg.moe.bottleneck(d), cfg.moe.n, cfg.moe.top_k, cfg.moe.router).expert_flops;
    for (auto seed : seeds) {
      RunConfig run = cfg;
      run.seed = seed;
      pt.rank1.push_back(train_and_summarize(run, sweep_param_name(param)).rank1);
    }
    pt.median_rank1 = median(pt.rank1);
    table.points.push_back(std::move(pt));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Gradient check on a small two-layer model with the domain router.

struct ToyGradCheck {
  GradCheckReport report;
  std::size_t parameters = 0;
};

inline RunConfig toy_gradcheck_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.backbone.d_model = 8;
  cfg.backbone.n_heads = 2;
  cfg.backbone.n_layers = 2;
  cfg.backbone.mlp_ratio = 2;
  cfg.backbone.image_h = 4;
  cfg.backbone.image_w = 8;
  cfg.backbone.channels = 1;
  cfg.backbone.patch = 4;
  cfg.backbone.vocab_size = 8;
  cfg.backbone.text_len = 4;
  cfg.backbone.seed = seed;
  cfg.backbone.init_std = 0.5;
  cfg.moe.n = 3;
  cfg.moe.top_k = 2;
  cfg.moe.reduction = 2;
  cfg.moe.prompts = 2;
  cfg.moe.router = RouterMode::domain;
  cfg.moe.init_std = 0.5;
  cfg.loss.alpha = 0.5;
  cfg.loss.tau = 0.5;
  return cfg;
}

// Step 1e-4 rather than 1e-5: adapter gradients here are as small as 1e-7
// while the loss is O(10), so a smaller step is dominated by roundoff.
inline GradCheckOptions toy_gradcheck_options() {
  GradCheckOptions opt;
  opt.eps = 1e-4;
  opt.tol = 1e-4;
  return opt;
}

// Every adapter parameter (W_up included) is randomized so that no gradient is
// trivially zero; two image patches and two caption tokens per pair.
inline ToyGradCheck grad_check_toy(std::uint64_t seed, const GradCheckOptions& base_opt = toy_gradcheck_options()) {
  const RunConfig cfg = toy_gradcheck_config(seed);
  DmAdapterModel model(cfg.backbone, cfg.moe, seed);
  model.freeze_backbone();
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (auto* p : model.params().trainable())
    for (auto& v : p->tensor.mutable_data()) v = normal(rng);

  std::vector<Tensor> images;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> px(cfg.backbone.channels * cfg.backbone.image_h * cfg.backbone.image_w);
    for (auto& v : px) v = normal(rng);
    images.emplace_back(Shape{cfg.backbone.image_h, cfg.backbone.image_w, cfg.backbone.channels}, std::move(px));
  }
  const std::vector<std::vector<int>> captions = {{1, 5}, {6, 2}};
  const Tensor q = match_distribution({0, 1});

  std::vector<std::size_t> signature;
  auto loss = [&]() {
    auto v = model.encode_images(images);
    auto t = model.encode_texts(captions);
    signature.clear();
    Tensor lb_i = load_balance_loss(v.routing[0]);
    Tensor lb_t = load_balance_loss(t.routing[0]);
    for (std::size_t l = 1; l < v.routing.size(); ++l) {
      lb_i = add(lb_i, load_balance_loss(v.routing[l]));
      lb_t = add(lb_t, load_balance_loss(t.routing[l]));
    }
    for (const auto* routing : {&v.routing, &t.routing})
      for (const auto& r : *routing)
        for (const auto& idx : r.indices) signature.insert(signature.end(), idx.begin(), idx.end());
    const double layers = static_cast<double>(v.routing.size());
    return total_loss(sdm_bidirectional(v.features, t.features, q, cfg.loss.sdm()), scale(lb_i, 1.0 / layers),
                      scale(lb_t, 1.0 / layers), cfg.loss.alpha);
  };
  GradCheckOptions opt = base_opt;
  opt.signature = [&] { return signature; };
  ToyGradCheck out;
  out.parameters = model.params().count_trainable();
  out.report = grad_check(loss, model.params().trainable(), opt);
  return out;
}

}  // namespace dmadapter
