#pragma once

// Differentiable primitives. Rank-1 tensors are treated as a single row
// wherever an operation talks about rows or the last axis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mcammd/autodiff.hpp"

namespace mcammd {

namespace detail {

inline void check_finite(OpId op, const std::vector<double>& v) {
  for (double x : v) {
    if (std::isnan(x)) throw DomainError(std::string(op_name(op)) + ": produced NaN");
  }
}

inline Tensor make_result(OpId op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, BackwardFn fn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->id = next_id();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  }
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(fn);
  }
  return Tensor::from_node(std::move(n));
}

inline void require_same_shape(OpId op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(op)) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
  }
}

inline void require_rank(OpId op, const Tensor& a, std::size_t lo, std::size_t hi) {
  if (a.rank() < lo || a.rank() > hi) {
    throw ShapeError(std::string(op_name(op)) + ": unsupported shape " + shape_string(a.shape()));
  }
}

template <class F, class G>
Tensor unary(OpId op, const Tensor& a, F forward, G derivative) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i]);
  return make_result(op, a.shape(), std::move(out), {a},
                     [derivative](const Node& self, std::span<const double> g,
                                  std::span<std::vector<double>* const> gin) {
                       const auto& x = self.inputs[0]->value;
                       auto& ga = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] += g[i] * derivative(x[i], self.value[i]);
                       }
                     });
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// (m x k) * (k x n) -> (m x n)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return detail::make_result(
      OpId::matmul, {m, n}, std::move(out), {a, b},
      [m, k, n](const detail::Node& self, std::span<const double> g,
                std::span<std::vector<double>* const> gin) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (gin[0]) {  // dA = G * B^T
          auto& ga = *gin[0];
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (gin[1]) {  // dB = A^T * G
          auto& gb = *gin[1];
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
          }
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(OpId::add, a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(OpId::add, a.shape(), std::move(out), {a, b},
                             [](const detail::Node&, std::span<const double> g,
                                std::span<std::vector<double>* const> gin) {
                               for (auto* buf : gin) {
                                 if (!buf) continue;
                                 for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(OpId::sub, a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(OpId::sub, a.shape(), std::move(out), {a, b},
                             [](const detail::Node&, std::span<const double> g,
                                std::span<std::vector<double>* const> gin) {
                               if (gin[0]) {
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                               }
                               if (gin[1]) {
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                               }
                             });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(OpId::mul, a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(OpId::mul, a.shape(), std::move(out), {a, b},
                             [](const detail::Node& self, std::span<const double> g,
                                std::span<std::vector<double>* const> gin) {
                               const auto& A = self.inputs[0]->value;
                               const auto& B = self.inputs[1]->value;
                               if (gin[0]) {
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * B[i];
                               }
                               if (gin[1]) {
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * A[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.data()[i];
  return detail::make_result(OpId::scale, a.shape(), std::move(out), {a},
                             [s](const detail::Node&, std::span<const double> g,
                                 std::span<std::vector<double>* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s * g[i];
                             });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      OpId::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
  }
  return detail::unary(
      OpId::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      OpId::tanh, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

// Subgradient at 0 is 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      OpId::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary(OpId::softplus, a, detail::stable_softplus,
                       [](double x, double) { return detail::stable_sigmoid(x); });
}

// Softmax over the last axis, max-shifted.
inline Tensor softmax(const Tensor& a) {
  detail::require_rank(OpId::softmax, a, 1, 2);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = out.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yi[j] /= z;
  }
  return detail::make_result(OpId::softmax, a.shape(), std::move(out), {a},
                             [r, c](const detail::Node& self, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                               const auto& y = self.value;
                               auto& ga = *gin[0];
                               for (std::size_t i = 0; i < r; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                                 for (std::size_t j = 0; j < c; ++j) {
                                   ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                                 }
                               }
                             });
}

// log(sum(exp(.))) over the last axis. Shape {n} -> {1}, {r, c} -> {r, 1}.
inline Tensor log_sum_exp(const Tensor& a) {
  detail::require_rank(OpId::log_sum_exp, a, 1, 2);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    out[i] = mx + std::log(z);
  }
  Shape shape = a.rank() == 1 ? Shape{1} : Shape{r, 1};
  return detail::make_result(OpId::log_sum_exp, std::move(shape), std::move(out), {a},
                             [r, c](const detail::Node& self, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                               const auto& x = self.inputs[0]->value;
                               auto& ga = *gin[0];
                               for (std::size_t i = 0; i < r; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   ga[i * c + j] += g[i] * std::exp(x[i * c + j] - self.value[i]);
                                 }
                               }
                             });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result(OpId::sum, {1}, {s}, {a},
                             [](const detail::Node&, std::span<const double> g,
                                std::span<std::vector<double>* const> gin) {
                               for (auto& v : *gin[0]) v += g[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const double n = static_cast<double>(a.size());
  return detail::make_result(OpId::mean, {1}, {s / n}, {a},
                             [n](const detail::Node&, std::span<const double> g,
                                 std::span<std::vector<double>* const> gin) {
                               for (auto& v : *gin[0]) v += g[0] / n;
                             });
}

// Concatenation along the last axis. All parts share rank and leading extent.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto rank = parts.front().rank();
  const auto rows = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(OpId::concat, p, 1, 2);
    if (p.rank() != rank || p.rows() != rows) {
      throw ShapeError("concat: cannot join " + shape_string(parts.front().shape()) + " with " +
                       shape_string(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(x.data() + i * widths[k], widths[k], out.data() + i * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = rank == 1 ? Shape{total} : Shape{rows, total};
  return detail::make_result(
      OpId::concat, std::move(shape), std::move(out), parts,
      [rows, total, widths](const detail::Node&, std::span<const double> g,
                            std::span<std::vector<double>* const> gin) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (gin[k]) {
            auto& gk = *gin[k];
            for (std::size_t i = 0; i < rows; ++i) {
              for (std::size_t j = 0; j < widths[k]; ++j) {
                gk[i * widths[k] + j] += g[i * total + offset + j];
              }
            }
          }
          offset += widths[k];
        }
      });
}

// Adds a row vector (shape {c} or {1, c}) to every row of an (r x c) matrix.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (a.rank() != 2 || row.rows() != 1 || row.rank() > 2 || row.cols() != a.cols()) {
    throw ShapeError("add_row: cannot broadcast " + shape_string(row.shape()) + " over " +
                     shape_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + row.data()[j];
  }
  return detail::make_result(OpId::add_row, a.shape(), std::move(out), {a, row},
                             [r, c](const detail::Node&, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                               if (gin[0]) {
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                               }
                               if (gin[1]) {
                                 for (std::size_t i = 0; i < r; ++i) {
                                   for (std::size_t j = 0; j < c; ++j) (*gin[1])[j] += g[i * c + j];
                                 }
                               }
                             });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: needs a matrix, got " + shape_string(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  }
  return detail::make_result(OpId::transpose, {c, r}, std::move(out), {a},
                             [r, c](const detail::Node&, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                               for (std::size_t i = 0; i < r; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) (*gin[0])[i * c + j] += g[j * r + i];
                               }
                             });
}

// Row i of the result is row indices[i] of `a`. Indices may repeat.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices) {
  if (a.rank() != 2 || indices.empty()) {
    throw ShapeError("gather_rows: needs a matrix and at least one index, got " +
                     shape_string(a.shape()));
  }
  const std::size_t c = a.cols();
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       shape_string(a.shape()));
    }
    std::copy_n(a.data().data() + indices[i] * c, c, out.data() + i * c);
  }
  const std::size_t n = indices.size();
  return detail::make_result(OpId::gather_rows, {n, c}, std::move(out), {a},
                             [c, idx = std::move(indices)](const detail::Node&, std::span<const double> g,
                                                           std::span<std::vector<double>* const> gin) {
                               auto& ga = *gin[0];
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
                               }
                             });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size() || shape.empty()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(OpId::reshape, std::move(shape), std::move(out), {a},
                             [](const detail::Node&, std::span<const double> g,
                                std::span<std::vector<double>* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                             });
}

// Extra arguments for primitives that are not purely tensor-valued.
struct PrimitiveArgs {
  double scalar = 1.0;               // scale
  std::vector<std::size_t> indices;  // gather_rows
  Shape shape;                       // reshape
};

// Uniform entry point over the primitive set.
inline Tensor apply_primitive(OpId op, std::span<const Tensor> in, const PrimitiveArgs& args = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (op) {
    case OpId::matmul: arity(2); return matmul(in[0], in[1]);
    case OpId::add: arity(2); return add(in[0], in[1]);
    case OpId::sub: arity(2); return sub(in[0], in[1]);
    case OpId::mul: arity(2); return mul(in[0], in[1]);
    case OpId::scale: arity(1); return scale(in[0], args.scalar);
    case OpId::exp: arity(1); return exp(in[0]);
    case OpId::log: arity(1); return log(in[0]);
    case OpId::tanh: arity(1); return tanh(in[0]);
    case OpId::relu: arity(1); return relu(in[0]);
    case OpId::softplus: arity(1); return softplus(in[0]);
    case OpId::softmax: arity(1); return softmax(in[0]);
    case OpId::log_sum_exp: arity(1); return log_sum_exp(in[0]);
    case OpId::sum: arity(1); return sum(in[0]);
    case OpId::mean: arity(1); return mean(in[0]);
    case OpId::concat: return concat(std::vector<Tensor>(in.begin(), in.end()));
    case OpId::add_row: arity(2); return add_row(in[0], in[1]);
    case OpId::transpose: arity(1); return transpose(in[0]);
    case OpId::gather_rows: arity(1); return gather_rows(in[0], args.indices);
    case OpId::reshape: arity(1); return reshape(in[0], args.shape);
    case OpId::leaf: break;
  }
  throw ContractError("apply_primitive: leaf is not an operation");
}

// Composite helpers, expressed through the primitives above.

// Row-wise broadcast of a column (r x 1) across `cols` columns.
inline Tensor repeat_cols(const Tensor& column, std::size_t cols) {
  return matmul(column, Tensor::filled({1, cols}, 1.0));
}

// sqrt via exp(log(x)/2); x must be positive.
inline Tensor sqrt_positive(const Tensor& a) { return exp(scale(log(a), 0.5)); }

// log-softmax over the last axis of an (r x c) matrix.
inline Tensor log_softmax(const Tensor& logits) {
  return sub(logits, repeat_cols(log_sum_exp(logits), logits.cols()));
}

}  // namespace mcammd
