#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mokt/common.hpp"

namespace mokt {

template <typename S>
struct Node;

// Dense row-major tensor with reverse-mode autodiff. Handles share state:
// copying a Tensor copies a reference, not the buffer. Data buffers are
// treated as immutable once a tensor has entered a graph; mutable_values()
// exists for initializers, optimizers (between steps) and finite differencing,
// which uphold that contract at their call sites.
template <typename S>
class Tensor {
 public:
  Tensor() = default;  // null handle; doubles as "no bias" in op signatures

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), {});
  }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape), {});
    auto& v = *t.impl_->data;
    std::fill(v.begin(), v.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values) {
    check(numel(shape) == static_cast<std::int64_t>(values.size()),
          "tensor init: " + shape_str(shape) + " needs " +
              std::to_string(numel(shape)) + " values, got " +
              std::to_string(values.size()));
    return Tensor(std::move(shape), std::move(values));
  }

  static Tensor scalar(S value) { return from({}, {value}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t size() const {
    return static_cast<std::int64_t>(impl_->data->size());
  }
  int extent(int axis) const {
    return impl_->shape[resolve_axis(axis, rank())];
  }

  const std::vector<S>& values() const { return *impl_->data; }
  S operator[](std::int64_t i) const { return (*impl_->data)[i]; }
  S item() const {
    check(size() == 1, "item: tensor has " + std::to_string(size()) +
                           " elements, expected 1");
    return (*impl_->data)[0];
  }

  std::vector<S>& mutable_values() { return *impl_->data; }

  Tensor& set_requires_grad(bool v = true) {
    impl_->requires_grad = v;
    return *this;
  }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool has_producer() const { return impl_ && impl_->producer != nullptr; }
  // True when backward must deliver a gradient here.
  bool needs_grad() const { return requires_grad() || has_producer(); }

  bool has_grad() const { return impl_ && impl_->grad_present; }
  Tensor grad() const {
    check(has_grad(), "grad: no gradient present (was backward run?)");
    return Tensor(impl_->shape, impl_->grad);
  }
  // Borrowed view of the gradient buffer; valid while this handle's storage
  // lives (unlike grad(), which copies).
  const std::vector<S>& grad_ref() const {
    check(has_grad(), "grad: no gradient present (was backward run?)");
    return impl_->grad;
  }
  // Accumulator, zero-initialized on first access.
  std::vector<S>& grad_values() {
    if (!impl_->grad_present) {
      impl_->grad.assign(impl_->data->size(), S(0));
      impl_->grad_present = true;
    }
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_) {
      impl_->grad.clear();
      impl_->grad_present = false;
    }
  }

  std::shared_ptr<Node<S>> producer() const { return impl_->producer; }
  // Stable identity for graph bookkeeping.
  const void* id() const { return impl_.get(); }

  // A handle to the same buffer under a different shape (no copy). Used by
  // reshape; safe because buffers are immutable inside graphs.
  Tensor aliased_as(Shape shape) const {
    check(numel(shape) == size(), "aliased_as: " + shape_str(shape) +
                                      " incompatible with " +
                                      std::to_string(size()) + " elements");
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = impl_->data;
    return t;
  }

  Tensor clone() const { return Tensor(impl_->shape, *impl_->data); }

 private:
  struct Impl {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    bool requires_grad = false;
    std::vector<S> grad;
    bool grad_present = false;
    std::shared_ptr<Node<S>> producer;
  };

  Tensor(Shape shape, std::vector<S> values) {
    impl_ = std::make_shared<Impl>();
    std::int64_t n = numel(shape);
    for (int e : shape)
      check(e >= 0, "tensor init: negative extent in " + shape_str(shape));
    impl_->shape = std::move(shape);
    if (values.empty() && n != 0) values.assign(static_cast<std::size_t>(n), S(0));
    impl_->data = std::make_shared<std::vector<S>>(std::move(values));
  }

  template <typename T>
  friend Tensor<T> record(std::string, std::vector<Tensor<T>>, Tensor<T>,
                          std::function<void(const Tensor<T>&)>,
                          std::function<std::vector<T>()>);

  std::shared_ptr<Impl> impl_;
};

// One recorded op application. backward() reads the output gradient and
// accumulates into the inputs' gradients; replay() recomputes the forward
// buffer from the inputs' current values.
template <typename S>
struct Node {
  std::string op;
  std::vector<Tensor<S>> inputs;
  std::function<void(const Tensor<S>& out)> backward;
  std::function<std::vector<S>()> replay;
};

// Thread-local recording switch (RAII). Inference paths use it to skip graph
// construction entirely.
inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_recording_flag()) {
    grad_recording_flag() = false;
  }
  ~NoGradGuard() { grad_recording_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Attaches a node to `out` when recording is on and some input needs a
// gradient; otherwise returns `out` as a plain tensor.
template <typename S>
Tensor<S> record(std::string op, std::vector<Tensor<S>> inputs, Tensor<S> out,
                 std::function<void(const Tensor<S>&)> backward,
                 std::function<std::vector<S>()> replay) {
  if (!grad_recording_flag()) return out;
  bool need = false;
  for (const auto& in : inputs)
    if (in.defined() && in.needs_grad()) need = true;
  if (!need) return out;
  auto node = std::make_shared<Node<S>>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->replay = std::move(replay);
  out.impl_->producer = std::move(node);
  return out;
}

template <typename S>
void accumulate_grad(Tensor<S> t, const std::vector<S>& contribution) {
  if (!t.defined() || !t.needs_grad()) return;
  auto& g = t.grad_values();
  check(g.size() == contribution.size(), "grad accumulate: size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

// The traced graph below a root tensor: nodes in topological order (every
// node appears after the producers of its inputs).
template <typename S>
class Graph {
 public:
  struct Entry {
    std::shared_ptr<Node<S>> node;
    Tensor<S> output;
  };

  static Graph trace(const Tensor<S>& root) {
    Graph g;
    g.root_ = root;
    if (!root.defined() || !root.has_producer()) return g;
    // Iterative post-order DFS over producer edges; post-order emission
    // yields a topological order with inputs before consumers.
    std::unordered_set<const void*> visited;
    struct Frame {
      Tensor<S> tensor;
      std::size_t next_input = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root});
    visited.insert(root.id());
    while (!stack.empty()) {
      Frame& top = stack.back();
      auto node = top.tensor.producer();
      if (!node) {
        stack.pop_back();
        continue;
      }
      if (top.next_input < node->inputs.size()) {
        Tensor<S> in = node->inputs[top.next_input++];
        if (in.defined() && in.has_producer() && !visited.count(in.id())) {
          visited.insert(in.id());
          stack.push_back({in});
        }
      } else {
        g.entries_.push_back({node, top.tensor});
        stack.pop_back();
      }
    }
    return g;
  }

  const std::vector<Entry>& order() const { return entries_; }

  // Distinct requires_grad leaves reachable from the root, in trace order.
  std::vector<Tensor<S>> leaves() const {
    std::vector<Tensor<S>> out;
    std::unordered_set<const void*> seen;
    for (const auto& e : entries_)
      for (const auto& in : e.node->inputs)
        if (in.defined() && in.requires_grad() && !in.has_producer() &&
            seen.insert(in.id()).second)
          out.push_back(in);
    return out;
  }

  // Reverse-mode sweep. Seeds the (scalar) root with gradient 1 and walks the
  // topological order backwards; gradients accumulate across multiple uses.
  void backward() {
    check(root_.defined(), "backward: undefined root");
    check(root_.size() == 1, "backward: root must be scalar, got " +
                                 shape_str(root_.shape()));
    if (entries_.empty()) return;
    root_.grad_values()[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->output.has_grad()) it->node->backward(it->output);
  }

  // Re-runs every recorded forward against the inputs' current values and
  // compares with the recorded output buffers, bit for bit.
  bool replay_matches(std::string* first_mismatch = nullptr) const {
    for (const auto& e : entries_) {
      std::vector<S> fresh = e.node->replay();
      const std::vector<S>& recorded = e.output.values();
      if (fresh.size() != recorded.size() ||
          std::memcmp(fresh.data(), recorded.data(),
                      fresh.size() * sizeof(S)) != 0) {
        if (first_mismatch) *first_mismatch = e.node->op;
        return false;
      }
    }
    return true;
  }

 private:
  Tensor<S> root_;
  std::vector<Entry> entries_;
};

// Convenience: trace from `loss` and run the reverse sweep.
template <typename S>
void backward(const Tensor<S>& loss) {
  Graph<S>::trace(loss).backward();
}

}  // namespace mokt
