#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dmadapter/checkpoint.hpp"
#include "dmadapter/config.hpp"
#include "dmadapter/data.hpp"
#include "dmadapter/experiments.hpp"
#include "dmadapter/heatmap.hpp"
#include "dmadapter/trainer.hpp"

namespace dmadapter {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

namespace cli_detail {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_experts;
  std::optional<std::size_t> top_k;
  std::optional<double> alpha;
  std::optional<std::string> router;
  std::optional<std::size_t> epochs;
  std::string out = "out";
};

inline void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "Run configuration file");
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--n-experts", o.n_experts, "Number of adapter experts");
  cmd->add_option("--top-k", o.top_k, "Experts activated per token");
  cmd->add_option("--alpha", o.alpha, "Load-balance loss weight");
  cmd->add_option("--router", o.router, "Router mode")->check(CLI::IsMember({"standard", "domain", "none"}));
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--out", o.out, "Output directory");
}

inline RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.n_experts) cfg.moe.n = *o.n_experts;
  if (o.top_k) cfg.moe.top_k = *o.top_k;
  if (o.alpha) cfg.loss.alpha = *o.alpha;
  if (o.router) cfg.moe.router = parse_router_mode(*o.router);
  if (o.epochs) cfg.optim.epochs = *o.epochs;
  cfg.validate();
  return cfg;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  os << text;
}

inline void print_report(std::ostream& out, const RetrievalReport& r) {
  out << "rank1: " << detail::fmt_double(r.rank1) << '\n'
      << "rank5: " << detail::fmt_double(r.rank5) << '\n'
      << "rank10: " << detail::fmt_double(r.rank10) << '\n'
      << "map: " << detail::fmt_double(r.map) << '\n'
      << "queries: " << r.n_queries << "  gallery: " << r.n_gallery << '\n';
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(cell, &pos));
      if (pos != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ArgumentError("expected a comma-separated integer list, got '" + s + "'");
    }
  }
  return out;
}

}  // namespace cli_detail

// Runs the tool; all output goes to `out`, diagnostics to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Frozen dual encoder with mixture-of-adapter blocks: training, evaluation and experiments"};
  app.name(argc > 0 ? std::filesystem::path(argv[0]).filename().string() : "dmadapter");
  app.require_subcommand(1);

  Overrides o;
  std::string resume, checkpoint_path, split = "test", preset, param = "n_experts", branch = "text", tokens;
  std::optional<std::uint64_t> max_steps;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> sample;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<std::size_t> values;
  bool full = false;

  auto* train = app.add_subcommand("train", "Train adapters on the synthetic dataset");
  add_common(train, o);
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  train->add_flag("--full-checkpoint", full, "Also store frozen backbone weights");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, o);
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* ablate = app.add_subcommand("ablate", "Run the four ablation arms over several seeds");
  add_common(ablate, o);
  ablate->add_option("--seeds", seeds, "Seeds (at least 5)")->delimiter(',');

  auto* sweep = app.add_subcommand("sweep", "Sweep the expert count or Top-K");
  add_common(sweep, o);
  sweep->add_option("--param", param, "n_experts or top_k");
  sweep->add_option("--values", values, "Values to sweep")->delimiter(',');
  sweep->add_option("--seeds", seeds, "Seeds; empty string computes costs only")->delimiter(',');

  auto* heat = app.add_subcommand("heatmap", "Export expert-weight heatmap of one layer");
  add_common(heat, o);
  heat->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  heat->add_option("--branch", branch, "vision or text");
  heat->add_option("--layer", layer, "Layer index (default: last)");
  heat->add_option("--tokens", tokens, "Comma-separated caption token ids (text branch)");
  heat->add_option("--sample", sample, "Test-split sample index used when no tokens are given");

  auto* count = app.add_subcommand("count-params", "Count trainable adapter parameters");
  add_common(count, o);
  count->add_option("--preset", preset, "Named model shape")->check(CLI::IsMember({"paper-clip-b16"}));

  auto* gcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check of a small model");
  add_common(gcheck, o);

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset and manifest");
  add_common(gen, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitValidation;
  }

  try {
    const std::filesystem::path out_dir = o.out;
    if (train->parsed()) {
      std::optional<TrainResult> result;
      if (resume.empty()) {
        const RunConfig cfg = resolve_config(o);
        if (!max_steps) {
          result = dmadapter::train(cfg, out_dir);
        } else {
          std::filesystem::create_directories(out_dir);
          std::filesystem::remove(out_dir / "metrics.csv");
          Trainer trainer(cfg);
          MetricsWriter writer(out_dir / "metrics.csv");
          trainer.run(&writer, max_steps);
          result = TrainResult{trainer.checkpoint(full), out_dir / "metrics.csv", trainer.last_row()};
          save_checkpoint(out_dir / "checkpoint.bin", result->checkpoint);
        }
      } else {
        Trainer trainer(load_checkpoint(resume));
        std::filesystem::create_directories(out_dir);
        MetricsWriter writer(out_dir / "metrics.csv");
        trainer.run(&writer, max_steps);
        result = TrainResult{trainer.checkpoint(full), out_dir / "metrics.csv", trainer.last_row()};
        save_checkpoint(out_dir / "checkpoint.bin", result->checkpoint);
      }
      out << "steps: " << result->checkpoint.global_step << '\n';
      if (result->final_row) {
        const auto& r = *result->final_row;
        out << "epoch: " << r.epoch << '\n'
            << "loss_total: " << detail::fmt_double(r.loss_total) << '\n'
            << "rank1: " << detail::fmt_double(r.rank1) << '\n'
            << "map: " << detail::fmt_double(r.map) << '\n';
      }
      out << "metrics: " << result->metrics_path.string() << '\n'
          << "checkpoint: " << (out_dir / "checkpoint.bin").string() << '\n';
    } else if (eval->parsed()) {
      const auto e = evaluate_checkpoint(load_checkpoint(checkpoint_path), split);
      out << "split: " << split << '\n';
      print_report(out, e.report);
      out << "expert_usage_entropy_image: " << detail::fmt_double(e.entropy_image) << '\n'
          << "expert_usage_entropy_text: " << detail::fmt_double(e.entropy_text) << '\n';
    } else if (ablate->parsed()) {
      const auto table = run_ablation_suite(resolve_config(o), seeds);
      write_text(out_dir / "ablation.csv", table.to_csv());
      for (const auto& a : table.arms) {
        out << a.arm << ": median rank1 " << detail::fmt_double(a.median_rank1) << " [" << detail::fmt_double(a.min_rank1)
            << ", " << detail::fmt_double(a.max_rank1) << "], median entropy " << detail::fmt_double(a.median_entropy)
            << '\n';
      }
      out << "table: " << (out_dir / "ablation.csv").string() << '\n';
    } else if (sweep->parsed()) {
      const SweepParam p = parse_sweep_param(param);
      if (values.empty()) values = p == SweepParam::n_experts ? std::vector<std::size_t>{2, 4, 6, 8, 10}
                                                              : std::vector<std::size_t>{1, 2, 3, 4, 5, 6};
      const auto table = run_hyperparam_sweep(resolve_config(o), p, values, seeds);
      const auto csv = table.to_csv();
      write_text(out_dir / (std::string("sweep_") + sweep_param_name(p) + ".csv"), csv);
      out << csv;
    } else if (heat->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint_path);
      const Branch b = parse_branch(branch);
      HeatmapSource src;
      if (!tokens.empty()) {
        if (b != Branch::text) throw ArgumentError("--tokens applies to the text branch only");
        src.token_ids = parse_int_list(tokens);
      } else {
        const Dataset ds = generate_dataset(ck.config.data_config());
        const std::size_t i = sample.value_or(0);
        if (i >= ds.test.pairs.size()) throw ArgumentError("--sample " + std::to_string(i) + " is out of range");
        src.token_ids = ds.test.pairs[i].token_ids;
        src.image = ds.test.images[ds.test.pairs[i].image_index];
      }
      const auto h = export_expert_heatmap(ck, src, layer, b, out_dir);
      out << "tokens: " << h.weights.dim(0) << "  experts: " << h.weights.dim(1) << "  layer: " << h.layer << '\n'
          << "grid: " << h.csv_path.string() << '\n'
          << "svg: " << h.svg_path.string() << '\n';
    } else if (count->parsed()) {
      ParamBreakdown pb;
      if (preset == "paper-clip-b16") {
        pb = count_trainable_params(paper_clip_b16_counts());
        out << "preset: paper-clip-b16 (d_vision=768, d_text=512, 12+12 layers, r=8, n=6, prompts=4, domain router)\n";
      } else {
        const RunConfig cfg = resolve_config(o);
        ParamCountConfig pc;
        pc.branches = {{cfg.backbone.d_model, cfg.backbone.n_layers}, {cfg.backbone.d_model, cfg.backbone.n_layers}};
        pc.reduction = cfg.moe.reduction;
        pc.n = cfg.moe.n;
        pc.prompts = cfg.moe.prompts;
        pc.router = cfg.moe.router;
        pb = count_trainable_params(pc);
        out << "config: d_model=" << cfg.backbone.d_model << ", " << cfg.backbone.n_layers << "+" << cfg.backbone.n_layers
            << " layers, n=" << cfg.moe.n << ", router=" << router_mode_name(cfg.moe.router) << '\n';
      }
      char millions[32];
      std::snprintf(millions, sizeof millions, "%.3fM", static_cast<double>(pb.total()) / 1e6);
      out << "adapters: " << pb.adapters << '\n'
          << "router: " << pb.router << '\n'
          << "domain_router: " << pb.domain_router << '\n'
          << "prompts: " << pb.prompts << '\n'
          << "total: " << pb.total() << " (" << millions << ")\n";
    } else if (gcheck->parsed()) {
      const auto res = grad_check_toy(o.seed.value_or(0));
      const auto& r = res.report;
      out << "parameters: " << res.parameters << "  checked: " << r.checked << "  skipped_kinks: " << r.skipped_kinks
          << '\n'
          << "max_rel_error: " << detail::fmt_double(r.max_rel_error) << " (worst " << r.worst_param << "["
          << r.worst_index << "])\n"
          << (r.passed ? "PASS" : "FAIL") << " at tol 1e-4\n";
      return r.passed ? kExitOk : kExitRuntime;
    } else if (gen->parsed()) {
      const RunConfig cfg = resolve_config(o);
      const Dataset ds = generate_dataset(cfg.data_config());
      const std::size_t rows = export_manifest(ds, out_dir);
      out << "identities: " << ds.identities.size() << "  train pairs: " << ds.train.pairs.size()
          << "  test pairs: " << ds.test.pairs.size() << '\n'
          << "manifest: " << (out_dir / "manifest.jsonl").string() << " (" << rows << " rows)\n";
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dmadapter
