#pragma once
/*
 * Dense float64 tensor with a reverse-mode differentiation tape.
 *
 * Every op that sees at least one input with requires_grad (while grad mode
 * is enabled) records a Node holding its inputs and an adjoint closure. The
 * engine in backward()/gradients() walks the recorded DAG in reverse
 * topological order. Intermediate adjoints live in a per-call scratch map, so
 * only leaves ever carry persistent .grad buffers.
 */

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace attnhybrid {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl;

// One slot per op input; nullptr when that input needs no adjoint.
using GradSlots = std::vector<std::vector<double>*>;

using BackwardFn = std::function<void(const TensorImpl& out,
                                      std::span<const double> grad_out,
                                      GradSlots& grad_in)>;

struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto extent : shape) {
      if (extent == 0) {
        throw std::invalid_argument("Tensor: zero extent in shape " +
                                    shape_str(shape));
      }
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match " +
                                  std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double at(std::size_t i) const { return impl_->data.at(i); }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item() on tensor of shape " +
                                  shape_str(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    if (impl_->grad_fn) {
      throw std::logic_error("set_requires_grad on a non-leaf tensor");
    }
    impl_->requires_grad = value;
    return *this;
  }
  bool is_leaf() const { return !impl_->grad_fn; }
  const char* op_name() const {
    return impl_->grad_fn ? impl_->grad_fn->op : "leaf";
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  /// New leaf holding a copy of the values, cut from any tape.
  Tensor detach() const {
    return Tensor(impl_->shape, impl_->data, false);
  }

  const detail::TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline bool any_requires_grad(std::span<const Tensor> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    return t.defined() && t.requires_grad();
  });
}

/// Wraps an op's output and, when needed, records the adjoint on the tape.
/// Undefined tensors in `inputs` (absent optional operands) get a nullptr slot.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, const char* op,
                          BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  if (any_requires_grad(inputs)) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    auto& impl = *out.impl();
    impl.requires_grad = true;
    impl.grad_fn = std::move(node);
  }
  return out;
}

inline std::vector<TensorImpl*> topo_order(TensorImpl* root) {
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->grad_fn.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }
  return order;
}

/// Runs the reverse sweep. Leaves reached by the sweep are handed to
/// `on_leaf` together with their adjoint.
template <typename LeafSink>
void run_backward(const Tensor& loss, LeafSink&& on_leaf) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument(
        "backward: loss must be a scalar, got shape " +
        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  TensorImpl* root = loss.impl().get();
  const auto order = topo_order(root);
  std::unordered_map<TensorImpl*, std::vector<double>> adjoints;
  adjoints[root] = std::vector<double>{1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    auto found = adjoints.find(impl);
    if (found == adjoints.end()) continue;
    if (!impl->grad_fn) {
      on_leaf(*impl, std::span<const double>(found->second));
      adjoints.erase(found);
      continue;
    }
    const Node& node = *impl->grad_fn;
    GradSlots slots(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      TensorImpl* in = node.inputs[j].get();
      if (!in || !in->requires_grad) continue;
      auto& buf = adjoints[in];
      if (buf.empty()) buf.assign(in->data.size(), 0.0);
      slots[j] = &buf;
    }
    node.backward(*impl, found->second, slots);
    adjoints.erase(impl);
  }
}

}  // namespace detail

/// Accumulates d(loss)/d(leaf) into the .grad buffer of every requires_grad
/// leaf. Repeated calls add up; clear with Tensor::zero_grad().
inline void backward(const Tensor& loss) {
  detail::run_backward(loss, [](detail::TensorImpl& leaf,
                                std::span<const double> g) {
    if (leaf.grad.empty()) leaf.grad.assign(leaf.data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) leaf.grad[i] += g[i];
  });
}

/// Adjoints of `loss` with respect to the given leaves, returned by value.
/// Leaf .grad buffers are left untouched, so concurrent callers sharing
/// parameters do not race on gradient state.
inline std::vector<std::vector<double>> gradients(
    const Tensor& loss, std::span<const Tensor> wrt) {
  std::vector<std::vector<double>> result(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    result[i].assign(wrt[i].numel(), 0.0);
  }
  detail::run_backward(loss, [&](detail::TensorImpl& leaf,
                                 std::span<const double> g) {
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      if (wrt[i].id() != &leaf) continue;
      for (std::size_t k = 0; k < g.size(); ++k) result[i][k] += g[k];
    }
  });
  return result;
}

}  // namespace attnhybrid
