#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmadapter/errors.hpp"

namespace dmadapter {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  // Position of the producing node on the tape, valid while tape_generation
  // matches the thread's tape.
  std::size_t node_index = 0;
  std::size_t tape_generation = 0;
  bool has_node = false;
};

}  // namespace detail

// Dense row-major array with an optional gradient slot. Copies share storage.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->shape = {1};
    impl_->data = {0.0};
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape.empty()) shape = {1};
    for (auto s : shape) {
      if (s == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
    }
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false) {
    if (rows.empty() || rows.front().empty()) throw DimensionError("empty matrix literal");
    std::vector<double> flat;
    for (const auto& r : rows) {
      if (r.size() != rows.front().size()) throw DimensionError("ragged matrix literal");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), rows.front().size()}, std::move(flat), requires_grad);
  }
  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  bool is_scalar() const { return impl_->data.size() == 1; }

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }
  double item() const {
    if (!is_scalar()) throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Detached deep copy.
  Tensor clone() const { return Tensor(shape(), data(), false); }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Grad buffers handed to a node's local-gradient rule; nullptr for inputs that
// do not need a gradient.
class GradSink {
 public:
  explicit GradSink(std::vector<double*> slots) : slots_(std::move(slots)) {}
  double* operator[](std::size_t input) const { return slots_[input]; }
  bool any() const {
    for (auto* s : slots_)
      if (s) return true;
    return false;
  }

 private:
  std::vector<double*> slots_;
};

// Local-gradient rule: receives the op's output, dL/d(output), and the input
// grad buffers to accumulate into.
using BackwardRule =
    std::function<void(const Tensor& output, std::span<const double> grad_out, const GradSink& grads)>;

struct TapeNode {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardRule rule;
};

// Define-by-run record of differentiable operations for the current thread.
class Tape {
 public:
  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  bool active() const { return active_ && suspend_depth_ == 0; }
  void set_active(bool on) { active_ = on; }

  // Drops all recorded nodes; tensors recorded earlier become disconnected.
  void reset() {
    nodes_.clear();
    ++generation_;
  }

  std::size_t generation() const { return generation_; }
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  void record(std::string op, std::vector<Tensor> inputs, const Tensor& output, BackwardRule rule) {
    auto* impl = output.impl();
    impl->has_node = true;
    impl->node_index = nodes_.size();
    impl->tape_generation = generation_;
    nodes_.push_back({std::move(op), std::move(inputs), output, std::move(rule)});
  }

  bool is_recorded(const Tensor& t) const {
    return t.impl()->has_node && t.impl()->tape_generation == generation_;
  }

  void suspend() { ++suspend_depth_; }
  void resume() { --suspend_depth_; }

  // When on, every op checks its output for NaN/Inf and throws NonFiniteError
  // naming itself.
  bool check_finite = false;

 private:
  std::vector<TapeNode> nodes_;
  std::size_t generation_ = 1;
  bool active_ = true;
  int suspend_depth_ = 0;
};

// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { Tape::current().suspend(); }
  ~NoGradGuard() { Tape::current().resume(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Resets the tape on entry and exit.
class TapeScope {
 public:
  TapeScope() { Tape::current().reset(); }
  ~TapeScope() { Tape::current().reset(); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

class FiniteCheckGuard {
 public:
  FiniteCheckGuard() : prev_(Tape::current().check_finite) { Tape::current().check_finite = true; }
  ~FiniteCheckGuard() { Tape::current().check_finite = prev_; }
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

// Builds an op result and records it on the tape when any input needs a
// gradient.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, BackwardRule rule) {
  auto& tape = Tape::current();
  if (tape.check_finite) {
    for (double v : data) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(op, std::string("non-finite value produced by op '") + op + "'");
      }
    }
  }
  bool needs_grad = false;
  if (tape.active()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  Tensor out(std::move(shape), std::move(data), needs_grad);
  if (needs_grad) tape.record(op, std::move(inputs), out, std::move(rule));
  return out;
}

}  // namespace detail

// Reverse sweep over the tape from a scalar loss. Leaf tensors accumulate into
// their grad; intermediate tensors receive this sweep's gradient.
inline void backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // constant: nothing to write
  auto& tape = Tape::current();
  const bool loss_is_leaf = !loss.impl()->has_node;
  if (loss_is_leaf) {
    auto& g = loss.impl()->grad;
    if (g.empty()) g.assign(1, 0.0);
    g[0] += 1.0;
    return;
  }
  if (!tape.is_recorded(loss)) {
    throw ArgumentError("loss is not connected to the active tape");
  }
  const auto& nodes = tape.nodes();
  std::vector<std::vector<double>> local(nodes.size());
  local[loss.impl()->node_index].assign(1, 1.0);

  auto slot_for = [&](const Tensor& in) -> double* {
    if (!in.requires_grad()) return nullptr;
    auto* impl = in.impl();
    if (tape.is_recorded(in)) {
      auto& buf = local[impl->node_index];
      if (buf.empty()) buf.assign(impl->data.size(), 0.0);
      return buf.data();
    }
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    return impl->grad.data();
  };

  for (std::size_t i = loss.impl()->node_index + 1; i-- > 0;) {
    if (local[i].empty()) continue;
    const auto& node = nodes[i];
    std::vector<double*> slots;
    slots.reserve(node.inputs.size());
    for (const auto& in : node.inputs) slots.push_back(slot_for(in));
    GradSink sink(std::move(slots));
    if (sink.any()) node.rule(node.output, local[i], sink);
    node.output.impl()->grad = std::move(local[i]);
  }
}

// Named tensor with a trainable flag. Frozen parameters never carry a grad.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;

  void set_trainable(bool on) {
    trainable = on;
    tensor.set_requires_grad(on);
    if (!on) tensor.zero_grad();
  }
};

// Ordered name -> Parameter registry; pointers stay valid while the store lives.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Tensor tensor, bool trainable) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(trainable);
    auto p = std::make_unique<Parameter>(Parameter{name, std::move(tensor), trainable});
    index_[name] = p.get();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }
  Parameter& get(const std::string& name) const {
    auto* p = find(name);
    if (!p) throw ArgumentError("unknown parameter '" + name + "'");
    return *p;
  }

  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<Parameter*> trainable() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }
  std::size_t count_trainable() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p->trainable) n += p->tensor.size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
  }
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

}  // namespace dmadapter
