#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dmadapter/adam.hpp"
#include "dmadapter/checkpoint.hpp"
#include "dmadapter/config.hpp"
#include "dmadapter/data.hpp"
#include "dmadapter/metrics.hpp"
#include "dmadapter/model.hpp"
#include "dmadapter/objectives.hpp"

namespace dmadapter {

struct MetricsRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double loss_total = 0.0;
  double loss_sdm = 0.0;
  double loss_lb_image = 0.0;
  double loss_lb_text = 0.0;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  double expert_usage_entropy_image = 0.0;
  double expert_usage_entropy_text = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,loss_total,loss_sdm,loss_lb_image,loss_lb_text,rank1,rank5,rank10,map,"
    "expert_usage_entropy_image,expert_usage_entropy_text";

inline std::string format_metrics_row(const MetricsRow& r) {
  using detail::fmt_double;
  std::ostringstream os;
  os << r.epoch << ',' << r.step << ',' << fmt_double(r.loss_total) << ',' << fmt_double(r.loss_sdm) << ','
     << fmt_double(r.loss_lb_image) << ',' << fmt_double(r.loss_lb_text) << ',' << fmt_double(r.rank1) << ','
     << fmt_double(r.rank5) << ',' << fmt_double(r.rank10) << ',' << fmt_double(r.map) << ','
     << fmt_double(r.expert_usage_entropy_image) << ',' << fmt_double(r.expert_usage_entropy_text);
  return os.str();
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("metrics file not found: '" + path.string() + "'");
  std::string line;
  std::getline(is, line);
  if (line != kMetricsHeader) throw DataError("metrics file '" + path.string() + "' has an unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 12) throw DataError("metrics row with " + std::to_string(cells.size()) + " fields");
    MetricsRow r;
    r.epoch = std::stoul(cells[0]);
    r.step = std::stoull(cells[1]);
    double* fields[] = {&r.loss_total, &r.loss_sdm, &r.loss_lb_image, &r.loss_lb_text, &r.rank1, &r.rank5,
                        &r.rank10, &r.map, &r.expert_usage_entropy_image, &r.expert_usage_entropy_text};
    for (std::size_t i = 0; i < 10; ++i) *fields[i] = std::stod(cells[i + 2]);
    rows.push_back(r);
  }
  return rows;
}

// Append-only CSV; each row is flushed whole.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    os_.open(path, std::ios::app);
    if (!os_) throw Error("cannot open metrics file '" + path.string() + "'");
    if (fresh) os_ << kMetricsHeader << '\n' << std::flush;
  }
  void write(const MetricsRow& row) { os_ << format_metrics_row(row) << '\n' << std::flush; }

 private:
  std::ofstream os_;
};

struct StepLosses {
  double total = 0.0;
  double sdm = 0.0;
  double lb_image = 0.0;
  double lb_text = 0.0;
};

struct EvalResult {
  RetrievalReport report;
  double entropy_image = 0.0;
  double entropy_text = 0.0;
};

// Mean over hooked layers of the Shannon entropy of each layer's mean routing
// weights.
inline double mean_layer_entropy(const std::vector<RoutingOutcome>& routing) {
  if (routing.empty()) return 0.0;
  double h = 0.0;
  for (const auto& r : routing) h += usage_entropy(r.p_avg.data());
  return h / static_cast<double>(routing.size());
}

// Copies checkpointed tensors into a model, failing on any name or shape mismatch.
inline void load_parameters(DmAdapterModel& model, const Checkpoint& ck) {
  for (const auto& [name, t] : ck.parameters) {
    Parameter* p = model.params().find(name);
    if (!p) throw IntegrityError("checkpoint parameter '" + name + "' does not exist in the configured model");
    if (p->tensor.shape() != t.shape()) {
      throw IntegrityError("checkpoint parameter '" + name + "' has shape " + shape_str(t.shape()) +
                           " but the model expects " + shape_str(p->tensor.shape()));
    }
    p->tensor.mutable_data() = t.data();
  }
  for (auto* p : model.params().trainable()) {
    if (!ck.find(p->name)) throw IntegrityError("checkpoint lacks trainable parameter '" + p->name + "'");
  }
}

// Owns one training run: data, model, optimizer, and the batch schedule.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg) : cfg_(validated(cfg)), rng_(shuffle_seed(cfg)) { init(); }

  explicit Trainer(const Checkpoint& ck) : cfg_(validated(ck.config)), rng_(shuffle_seed(ck.config)) {
    init();
    load_parameters(*model_, ck);
    adam_.state() = ck.optimizer;
    step_ = ck.global_step;
    accum_ = ck.epoch_accum;
    if (accum_.size() != 5) throw IntegrityError("checkpoint epoch accumulator is malformed");
    std::istringstream is(ck.rng_state);
    is >> rng_;
    if (!is) throw IntegrityError("checkpoint rng state is unreadable");
  }

  const RunConfig& config() const { return cfg_; }
  DmAdapterModel& model() { return *model_; }
  const DmAdapterModel& model() const { return *model_; }
  const Dataset& dataset() const { return data_; }
  std::uint64_t global_step() const { return step_; }
  std::size_t steps_per_epoch() const {
    return (data_.train.pairs.size() + cfg_.optim.batch_size - 1) / cfg_.optim.batch_size;
  }
  std::uint64_t total_steps() const { return steps_per_epoch() * cfg_.optim.epochs; }

  // Forward pass of the training objective on a batch of train pairs.
  StepLosses batch_losses(const std::vector<std::size_t>& pair_indices, Tensor* total_out = nullptr) const {
    std::vector<Tensor> images;
    std::vector<std::vector<int>> captions;
    std::vector<int> ids;
    for (auto i : pair_indices) {
      const auto& p = data_.train.pairs[i];
      images.push_back(data_.train.images[p.image_index]);
      captions.push_back(p.token_ids);
      ids.push_back(p.identity);
    }
    auto v = model_->encode_images(images);
    auto t = model_->encode_texts(captions);
    Tensor sdm = sdm_bidirectional(v.features, t.features, match_distribution(ids), cfg_.loss.sdm());
    Tensor lb_i = branch_lb(v.routing);
    Tensor lb_t = branch_lb(t.routing);
    Tensor total = total_loss(sdm, lb_i, lb_t, cfg_.loss.alpha);
    if (total_out) *total_out = total;
    return {total.item(), sdm.item(), lb_i.item(), lb_t.item()};
  }

  // One Adam step on the next batch of the schedule.
  StepLosses step() {
    const auto batch = next_batch();
    StepLosses losses;
    {
      TapeScope scope;
      Tensor total;
      losses = batch_losses(batch, &total);
      if (!std::isfinite(losses.total)) diagnose_non_finite(batch);
      model_->params().zero_grad();
      backward(total);
    }
    adam_.step(model_->params().trainable(), cfg_.precision == 32);
    model_->params().zero_grad();
    accum_[0] += losses.total;
    accum_[1] += losses.sdm;
    accum_[2] += losses.lb_image;
    accum_[3] += losses.lb_text;
    accum_[4] += 1.0;
    ++step_;
    if (step_ % steps_per_epoch() == 0) order_.clear();
    return losses;
  }

  EvalResult evaluate(const Split& split) const {
    NoGradGuard no_grad;
    auto gallery = model_->encode_images(split.images);
    auto queries = model_->encode_texts(split.captions());
    Tensor sim = matmul(queries.features, transpose(gallery.features));
    EvalResult out;
    out.report = retrieval_report(sim, split.caption_identity(), split.image_identity, cfg_.seed);
    out.entropy_image = mean_layer_entropy(gallery.routing);
    out.entropy_text = mean_layer_entropy(queries.routing);
    return out;
  }

  // Trains until stop_step (default: all epochs), writing a row at step 0 of a
  // fresh run and at the end of every epoch.
  void run(MetricsWriter* writer = nullptr, std::optional<std::uint64_t> stop_step = {}) {
    const std::uint64_t stop = std::min(stop_step.value_or(total_steps()), total_steps());
    if (writer && step_ == 0) writer->write(initial_row());
    while (step_ < stop) {
      step();
      if (step_ % steps_per_epoch() == 0) {
        MetricsRow row = eval_row(step_ / steps_per_epoch());
        const double n = std::max(accum_[4], 1.0);
        row.loss_total = accum_[0] / n;
        row.loss_sdm = accum_[1] / n;
        row.loss_lb_image = accum_[2] / n;
        row.loss_lb_text = accum_[3] / n;
        std::fill(accum_.begin(), accum_.end(), 0.0);
        last_row_ = row;
        if (writer) writer->write(row);
      }
    }
  }

  const std::optional<MetricsRow>& last_row() const { return last_row_; }

  Checkpoint checkpoint(bool full = false) const {
    Checkpoint ck;
    ck.config = cfg_;
    ck.full = full;
    for (auto* p : model_->params().all())
      if (full || p->trainable) ck.parameters.emplace_back(p->name, p->tensor.clone());
    ck.optimizer = adam_.state();
    ck.global_step = step_;
    ck.epoch_accum = accum_;
    if (order_.empty()) {
      std::ostringstream os;
      os << rng_;
      ck.rng_state = os.str();
    } else {
      ck.rng_state = epoch_rng_state_;
    }
    return ck;
  }

 private:
  static RunConfig validated(const RunConfig& cfg) {
    cfg.validate();
    return cfg;
  }
  static std::uint64_t shuffle_seed(const RunConfig& cfg) { return cfg.seed * 0x2545F4914F6CDD1DULL + 17; }

  void init() {
    data_ = generate_dataset(cfg_.data_config());
    model_ = std::make_unique<DmAdapterModel>(cfg_.backbone, cfg_.moe, cfg_.seed);
    model_->freeze_backbone();
    adam_ = Adam(cfg_.optim.lr, cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.eps);
  }

  Tensor branch_lb(const std::vector<RoutingOutcome>& routing) const {
    if (routing.empty()) return Tensor::scalar(0.0);
    Tensor acc = load_balance_loss(routing.front());
    for (std::size_t i = 1; i < routing.size(); ++i) acc = add(acc, load_balance_loss(routing[i]));
    return scale(acc, 1.0 / static_cast<double>(routing.size()));
  }

  std::vector<std::size_t> next_batch() {
    if (order_.empty()) {
      std::ostringstream os;
      os << rng_;
      epoch_rng_state_ = os.str();
      order_.resize(data_.train.pairs.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      for (std::size_t i = order_.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order_[i - 1], order_[pick(rng_)]);
      }
    }
    const std::size_t offset = (step_ % steps_per_epoch()) * cfg_.optim.batch_size;
    const std::size_t end = std::min(offset + cfg_.optim.batch_size, order_.size());
    return {order_.begin() + static_cast<std::ptrdiff_t>(offset), order_.begin() + static_cast<std::ptrdiff_t>(end)};
  }

  [[noreturn]] void diagnose_non_finite(const std::vector<std::size_t>& batch) const {
    std::string op = "unknown";
    try {
      NoGradGuard no_grad;
      FiniteCheckGuard guard;
      batch_losses(batch);
    } catch (const NonFiniteError& e) {
      op = e.op;
    }
    throw TrainingError("non-finite loss at step " + std::to_string(step_) +
                        "; first non-finite value produced by op '" + op + "'");
  }

  MetricsRow initial_row() const {
    MetricsRow row = eval_row(0);
    NoGradGuard no_grad;
    StepLosses acc;
    const std::size_t n = data_.train.pairs.size(), b = cfg_.optim.batch_size;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += b, ++batches) {
      std::vector<std::size_t> idx;
      for (std::size_t i = s; i < std::min(s + b, n); ++i) idx.push_back(i);
      const auto l = batch_losses(idx);
      acc.total += l.total;
      acc.sdm += l.sdm;
      acc.lb_image += l.lb_image;
      acc.lb_text += l.lb_text;
    }
    row.loss_total = acc.total / static_cast<double>(batches);
    row.loss_sdm = acc.sdm / static_cast<double>(batches);
    row.loss_lb_image = acc.lb_image / static_cast<double>(batches);
    row.loss_lb_text = acc.lb_text / static_cast<double>(batches);
    return row;
  }

  MetricsRow eval_row(std::size_t epoch) const {
    const auto e = evaluate(data_.test);
    MetricsRow row;
    row.epoch = epoch;
    row.step = step_;
    row.rank1 = e.report.rank1;
    row.rank5 = e.report.rank5;
    row.rank10 = e.report.rank10;
    row.map = e.report.map;
    row.expert_usage_entropy_image = e.entropy_image;
    row.expert_usage_entropy_text = e.entropy_text;
    return row;
  }

  RunConfig cfg_;
  Dataset data_;
  std::unique_ptr<DmAdapterModel> model_;
  Adam adam_{3e-4, 0.9, 0.999, 1e-8};
  std::mt19937_64 rng_;
  std::string epoch_rng_state_;
  std::vector<std::size_t> order_;
  std::uint64_t step_ = 0;
  std::vector<double> accum_ = std::vector<double>(5, 0.0);
  std::optional<MetricsRow> last_row_;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::filesystem::path metrics_path;
  std::optional<MetricsRow> final_row;
};

// Full run into out_dir: metrics.csv plus checkpoint.bin.
inline TrainResult train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto metrics = out_dir / "metrics.csv";
  std::filesystem::remove(metrics);
  Trainer trainer(cfg);
  MetricsWriter writer(metrics);
  trainer.run(&writer);
  TrainResult result{trainer.checkpoint(), metrics, trainer.last_row()};
  save_checkpoint(out_dir / "checkpoint.bin", result.checkpoint);
  return result;
}

// Rebuilds the configured model, loads the checkpoint, and scores a split.
inline EvalResult evaluate_checkpoint(const Checkpoint& ck, const std::string& split) {
  if (split != "test" && split != "train") throw ArgumentError("unknown split '" + split + "' (expected train or test)");
  Trainer trainer(ck);
  return trainer.evaluate(split == "test" ? trainer.dataset().test : trainer.dataset().train);
}

}  // namespace dmadapter
