#pragma once

// Dense tensors of doubles with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle to a node. Primitives (see ops.hpp) create new
// nodes that remember their inputs whenever any input requires a gradient,
// so the expression that produced a loss forms a DAG rooted at that loss.
// backward() traces that DAG into a Graph (topological order), walks it once
// in reverse and returns gradients for every leaf that requires one.
//
// Gradient buffers live in the backward pass, not in the nodes: several
// graphs sharing the same parameter leaves can be differentiated on separate
// threads without synchronisation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mcammd/errors.hpp"

namespace mcammd {

using Shape = std::vector<std::size_t>;

enum class OpId : std::uint8_t {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  exp,
  log,
  tanh,
  relu,
  softplus,
  softmax,
  log_sum_exp,
  sum,
  mean,
  concat,
  add_row,
  transpose,
  gather_rows,
  reshape,
};

inline std::string_view op_name(OpId op) {
  switch (op) {
    case OpId::leaf: return "leaf";
    case OpId::matmul: return "matmul";
    case OpId::add: return "add";
    case OpId::sub: return "sub";
    case OpId::mul: return "mul";
    case OpId::scale: return "scale";
    case OpId::exp: return "exp";
    case OpId::log: return "log";
    case OpId::tanh: return "tanh";
    case OpId::relu: return "relu";
    case OpId::softplus: return "softplus";
    case OpId::softmax: return "softmax";
    case OpId::log_sum_exp: return "log_sum_exp";
    case OpId::sum: return "sum";
    case OpId::mean: return "mean";
    case OpId::concat: return "concat";
    case OpId::add_row: return "add_row";
    case OpId::transpose: return "transpose";
    case OpId::gather_rows: return "gather_rows";
    case OpId::reshape: return "reshape";
  }
  return "unknown";
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node;

// Propagates `grad_out` (gradient w.r.t. the node's value) into the input
// gradient buffers. A null entry in `grad_in` means that input needs none.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

struct Node {
  std::uint64_t id = 0;
  OpId op = OpId::leaf;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

inline std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_disabled_flag() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

// While alive, primitives on this thread record no history.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled_flag()) { detail::grad_disabled_flag() = true; }
  ~NoGradGuard() { detail::grad_disabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return !detail::grad_disabled_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor: shape must have at least one dimension");
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor: zero extent in shape " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<detail::Node>();
    node_->id = detail::next_id();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double v) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false) {
    if (rows.empty() || rows.front().empty()) throw ShapeError("tensor: empty matrix literal");
    const auto cols = rows.front().size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("tensor: ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  std::uint64_t id() const { return node().id; }
  OpId op() const { return node().op; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return node().value.size(); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : shape()[0]; }
  std::size_t cols() const { return shape().back(); }

  std::span<const double> data() const { return node().value; }

  // In-place access for optimisers and finite differences. Mutating a tensor
  // that already feeds a recorded graph invalidates that graph's gradients.
  std::span<double> mutable_data() { return node().value; }

  double item() const {
    if (size() != 1) throw ContractError("item(): tensor has shape " + shape_string(shape()));
    return node().value[0];
  }

  double at(std::size_t i) const { return node().value.at(i); }
  double at(std::size_t r, std::size_t c) const { return node().value.at(r * cols() + c); }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().inputs.empty(); }

  // New leaf holding a copy of the values, with no history.
  Tensor detach() const { return Tensor(shape(), node().value, false); }

  // New leaf with a copy of the values and the same requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node().value, requires_grad()); }

  // Drops the recorded history below this tensor. A later backward() through
  // it fails with ContractError.
  void release_graph() {
    node().inputs.clear();
    node().backward = nullptr;
    node().released = node().op != OpId::leaf;
  }

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Only for use by primitive implementations.
  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

// Nodes reachable from a root, in topological order (inputs before users).
class Graph {
 public:
  static Graph trace(const Tensor& root) {
    Graph g;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; expression depth can exceed a safe recursion depth.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node_ptr().get(), 0);
    seen.insert(root.node_ptr().get());
    while (!stack.empty()) {
      auto& [node, next_input] = stack.back();
      if (next_input < node->inputs.size()) {
        auto* child = node->inputs[next_input++].get();
        if (seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  std::span<detail::Node* const> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<detail::Node*> nodes_;
};

// Gradients keyed by leaf id; ordered so iteration is deterministic.
using GradientMap = std::map<std::uint64_t, Tensor>;

// Reverse-mode sweep from a scalar loss. Returns one gradient per reachable
// leaf that requires one. The graph is left intact: calling backward again on
// the same loss yields identical gradients (nothing accumulates between calls).
inline GradientMap backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  GradientMap result;
  if (!loss.requires_grad()) return result;

  const Graph graph = Graph::trace(loss);
  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads.reserve(graph.size());
  for (auto* n : graph.nodes()) {
    if (n->released) throw ContractError("backward: graph was released below the loss");
    if (n->requires_grad) grads.emplace(n, std::vector<double>(n->value.size(), 0.0));
  }
  grads[loss.node_ptr().get()][0] = 1.0;

  std::vector<std::vector<double>*> input_grads;
  const auto nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->requires_grad) continue;
    auto& gout = grads[n];
    if (n->inputs.empty()) {
      result.emplace(n->id, Tensor(n->shape, std::move(gout)));
      continue;
    }
    input_grads.clear();
    for (const auto& in : n->inputs) {
      input_grads.push_back(in->requires_grad ? &grads[in.get()] : nullptr);
    }
    n->backward(*n, gout, input_grads);
    std::vector<double>().swap(gout);
  }
  return result;
}

}  // namespace mcammd
