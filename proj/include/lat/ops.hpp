#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lat/tensor.hpp"

namespace lat {

using Mask = std::vector<std::uint8_t>;

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

inline std::vector<double>& grad_of(Node& n, std::size_t parent) { return n.parents[parent]->grad; }

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [df](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
    }
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops never broadcast.

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_constant(const Tensor& x, double c) {
  return detail::unary("add_constant", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

enum class Elementwise { add, mul, tanh, sigmoid, relu };

// Dispatcher over the elementwise family; binary ops need exactly two operands.
inline Tensor elementwise(Elementwise op, std::span<const Tensor> operands) {
  auto need = [&](std::size_t n) {
    if (operands.size() != n) throw ContractError("elementwise: wrong operand count");
  };
  switch (op) {
    case Elementwise::add: need(2); return add(operands[0], operands[1]);
    case Elementwise::mul: need(2); return mul(operands[0], operands[1]);
    case Elementwise::tanh: need(1); return tanh(operands[0]);
    case Elementwise::sigmoid: need(1); return sigmoid(operands[0]);
    case Elementwise::relu: need(1); return relu(operands[0]);
  }
  throw ContractError("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. Rank-1 operands act as a row vector on the left and a
/// column vector on the right; the result drops that axis again.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  std::size_t r, s, s2, t;
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    r = a.dim(0); s = a.dim(1); s2 = b.dim(0); t = b.dim(1);
    out_shape = {r, t};
  } else if (a.rank() == 1 && b.rank() == 2) {
    r = 1; s = a.dim(0); s2 = b.dim(0); t = b.dim(1);
    out_shape = {t};
  } else if (a.rank() == 2 && b.rank() == 1) {
    r = a.dim(0); s = a.dim(1); s2 = b.dim(0); t = 1;
    out_shape = {r};
  } else {
    throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  if (s != s2) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(r * t, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < s; ++k) {
      double aik = av[i * s + k];
      const double* brow = &bv[k * t];
      double* orow = &out[i * t];
      for (std::size_t j = 0; j < t; ++j) orow[j] += aik * brow[j];
    }
  }
  return detail::make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                             [r, s, t](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t k = 0; k < s; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < t; ++j) acc += g[i * t + j] * pb.value[k * t + j];
          pa.grad[i * s + k] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t k = 0; k < s; ++k) {
          double aik = pa.value[i * s + k];
          for (std::size_t j = 0; j < t; ++j) pb.grad[k * t + j] += aik * g[i * t + j];
        }
      }
    }
  });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 1, "dot");
  detail::require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return detail::make_result("dot", {}, {acc}, {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    double g = self.grad[0];
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += g * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += g * pa.value[i];
    }
  });
}

/// X[i,j] = f[i] * q[j].
inline Tensor outer_product(const Tensor& f, const Tensor& q) {
  detail::require_rank(f, 1, "outer_product");
  detail::require_rank(q, 1, "outer_product");
  if (f.numel() != q.numel()) {
    throw DimensionError("outer_product: lengths " + std::to_string(f.numel()) + " and " +
                         std::to_string(q.numel()) + " differ");
  }
  std::size_t d = f.numel();
  std::vector<double> out(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = f[i] * q[j];
  return detail::make_result("outer_product", {d, d}, std::move(out), {f, q}, [d](detail::Node& self) {
    auto& pf = *self.parents[0];
    auto& pq = *self.parents[1];
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double g = self.grad[i * d + j];
        if (pf.requires_grad) pf.grad[i] += g * pq.value[j];
        if (pq.requires_grad) pq.grad[j] += g * pf.value[i];
      }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return detail::make_result("transpose", {c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenation of rank-1 tensors (axis 0) or rank-2 tensors (axis 0 or 1).
/// A rank-1 tensor of length 0 is accepted as an empty operand.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw ContractError("concat: no operands");
  std::vector<Tensor> used;
  for (const auto& p : parts) {
    if (!(p.rank() == 1 && p.numel() == 0)) used.push_back(p);
  }
  if (used.empty()) return Tensor::zeros({0});
  std::size_t rank = used[0].rank();
  if (rank == 0 || rank > 2) throw DimensionError("concat: rank must be 1 or 2");
  if (axis >= rank) throw DimensionError("concat: axis out of range");
  for (const auto& p : used) {
    if (p.rank() != rank) throw DimensionError("concat: mixed ranks");
    if (rank == 2 && p.dim(1 - axis) != used[0].dim(1 - axis)) {
      throw DimensionError("concat: incompatible shapes " + shape_str(used[0].shape()) + " and " +
                           shape_str(p.shape()));
    }
  }
  std::vector<double> out;
  Shape shape;
  std::vector<std::size_t> extents;  // size along axis for each part
  if (rank == 1 || axis == 0) {
    std::size_t total = 0;
    for (const auto& p : used) {
      out.insert(out.end(), p.values().begin(), p.values().end());
      extents.push_back(p.numel());
      total += (rank == 1 ? p.numel() : p.dim(0));
    }
    shape = rank == 1 ? Shape{total} : Shape{total, used[0].dim(1)};
    return detail::make_result("concat", std::move(shape), std::move(out), used, [extents](detail::Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        auto& p = *self.parents[k];
        if (p.requires_grad) {
          for (std::size_t i = 0; i < extents[k]; ++i) p.grad[i] += self.grad[off + i];
        }
        off += extents[k];
      }
    });
  }
  std::size_t rows = used[0].dim(0);
  std::size_t total_cols = 0;
  for (const auto& p : used) {
    extents.push_back(p.dim(1));
    total_cols += p.dim(1);
  }
  out.resize(rows * total_cols);
  std::size_t col_off = 0;
  for (const auto& p : used) {
    std::size_t c = p.dim(1);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * total_cols + col_off + j] = p[i * c + j];
    col_off += c;
  }
  return detail::make_result("concat", {rows, total_cols}, std::move(out), used,
                             [extents, rows, total_cols](detail::Node& self) {
    std::size_t col_off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      std::size_t c = extents[k];
      if (p.requires_grad) {
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[i * total_cols + col_off + j];
      }
      col_off += c;
    }
  });
}

/// Elements [begin, end) of a rank-1 tensor.
inline Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 1, "slice");
  if (begin > end || end > x.numel()) throw DimensionError("slice: range out of bounds for " + shape_str(x.shape()));
  std::vector<double> out(x.values().begin() + begin, x.values().begin() + end);
  return detail::make_result("slice", {end - begin}, std::move(out), {x}, [begin](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[begin + i] += self.grad[i];
  });
}

/// Rows of a matrix picked by index (repeats allowed).
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
  detail::require_rank(x, 2, "gather_rows");
  std::size_t c = x.dim(1);
  std::vector<double> out(idx.size() * c);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.values().begin() + idx[k] * c, c, out.begin() + k * c);
  }
  std::size_t n = idx.size();
  return detail::make_result("gather_rows", {n, c}, std::move(out), {x},
                             [idx = std::move(idx), c](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) p.grad[idx[k] * c + j] += self.grad[k * c + j];
  });
}

inline Tensor row(const Tensor& x, std::size_t i) {
  detail::require_rank(x, 2, "row");
  if (i >= x.dim(0)) throw DimensionError("row: index out of range");
  return reshape(gather_rows(x, {i}), {x.dim(1)});
}

/// Stacks equal-length rank-1 tensors as the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no rows");
  std::size_t c = rows[0].numel();
  for (const auto& r : rows) {
    detail::require_rank(r, 1, "stack_rows");
    if (r.numel() != c) throw DimensionError("stack_rows: rows of different length");
  }
  auto flat = concat(rows, 0);
  return reshape(flat, {rows.size(), c});
}

/// Places column c of x (m x k) at column cols[c] of an m x n zero matrix.
inline Tensor scatter_columns(const Tensor& x, std::vector<std::size_t> cols, std::size_t n) {
  detail::require_rank(x, 2, "scatter_columns");
  std::size_t m = x.dim(0), k = x.dim(1);
  if (cols.size() != k) throw DimensionError("scatter_columns: index count differs from column count");
  std::vector<double> out(m * n, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    if (cols[c] >= n) throw DimensionError("scatter_columns: column index out of range");
    for (std::size_t i = 0; i < m; ++i) out[i * n + cols[c]] = x[i * k + c];
  }
  return detail::make_result("scatter_columns", {m, n}, std::move(out), {x},
                             [cols = std::move(cols), m, k, n](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < m; ++i) p.grad[i * k + c] += self.grad[i * n + cols[c]];
  });
}

/// Explicit expansion of a vector into m identical rows.
inline Tensor expand_rows(const Tensor& v, std::size_t m) {
  detail::require_rank(v, 1, "expand_rows");
  std::size_t c = v.numel();
  std::vector<double> out(m * c);
  for (std::size_t i = 0; i < m; ++i) std::copy(v.values().begin(), v.values().end(), out.begin() + i * c);
  return detail::make_result("expand_rows", {m, c}, std::move(out), {v}, [m, c](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[j] += self.grad[i * c + j];
  });
}

/// Explicit expansion of a scalar to any shape.
inline Tensor expand_scalar(const Tensor& s, Shape shape) {
  if (s.numel() != 1) throw DimensionError("expand_scalar: operand is not a scalar");
  auto n = shape_numel(shape);
  return detail::make_result("expand_scalar", std::move(shape), std::vector<double>(n, s[0]), {s},
                             [](detail::Node& self) {
    auto& p = *self.parents[0];
    double acc = 0.0;
    for (double g : self.grad) acc += g;
    p.grad[0] += acc;
  });
}

/// M[i,:] * w[i]: row-wise scaling of a matrix.
inline Tensor row_scale(const Tensor& m, const Tensor& w) {
  detail::require_rank(m, 2, "row_scale");
  detail::require_rank(w, 1, "row_scale");
  std::size_t r = m.dim(0), c = m.dim(1);
  if (w.numel() != r) throw DimensionError("row_scale: " + shape_str(m.shape()) + " vs " + shape_str(w.shape()));
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m[i * c + j] * w[i];
  return detail::make_result("row_scale", {r, c}, std::move(out), {m, w}, [r, c](detail::Node& self) {
    auto& pm = *self.parents[0];
    auto& pw = *self.parents[1];
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double g = self.grad[i * c + j];
        if (pm.requires_grad) pm.grad[i * c + j] += g * pw.value[i];
        if (pw.requires_grad) pw.grad[i] += g * pm.value[i * c + j];
      }
    }
  });
}

/// M[i,:] + b: adds the same bias row to every row.
inline Tensor add_rows(const Tensor& m, const Tensor& b) {
  detail::require_rank(m, 2, "add_rows");
  detail::require_rank(b, 1, "add_rows");
  std::size_t r = m.dim(0), c = m.dim(1);
  if (b.numel() != c) throw DimensionError("add_rows: " + shape_str(m.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m[i * c + j] + b[j];
  return detail::make_result("add_rows", {r, c}, std::move(out), {m, b}, [r, c](detail::Node& self) {
    auto& pm = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double g = self.grad[i * c + j];
        if (pm.requires_grad) pm.grad[i * c + j] += g;
        if (pb.requires_grad) pb.grad[j] += g;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { sum, mean };

/// Sum or mean along one axis. Rank-1 input reduces to a scalar.
inline Tensor reduce(const Tensor& x, Reduce op, std::size_t axis) {
  if (x.rank() == 0 || axis >= x.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  if (x.rank() > 2) throw DimensionError("reduce: rank > 2 unsupported");
  std::size_t r = x.rows(), c = x.cols();
  bool over_rows = (x.rank() == 1) || axis == 0;  // rank-1 is a single row over columns
  if (x.rank() == 1) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    double f = op == Reduce::mean ? 1.0 / static_cast<double>(c) : 1.0;
    return detail::make_result("reduce", {}, {acc * f}, {x}, [f](detail::Node& self) {
      auto& p = *self.parents[0];
      for (auto& g : p.grad) g += self.grad[0] * f;
    });
  }
  std::size_t n_out = over_rows ? c : r;
  double f = op == Reduce::mean ? 1.0 / static_cast<double>(over_rows ? r : c) : 1.0;
  std::vector<double> out(n_out, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[over_rows ? j : i] += x[i * c + j];
  for (auto& v : out) v *= f;
  return detail::make_result("reduce", {n_out}, std::move(out), {x}, [r, c, over_rows, f](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[over_rows ? j : i] * f;
  });
}

inline Tensor sum_all(const Tensor& x) { return reduce(reshape(x, {x.numel()}), Reduce::sum, 0); }
inline Tensor mean_all(const Tensor& x) { return reduce(reshape(x, {x.numel()}), Reduce::mean, 0); }

/// Elementwise maximum over the rows of a matrix (global max-pooling).
/// Ties send the gradient to the first maximal row.
inline Tensor max_rows(const Tensor& x) {
  detail::require_rank(x, 2, "max_rows");
  std::size_t r = x.dim(0), c = x.dim(1);
  if (r == 0) throw DegenerateInputError("max_rows: empty matrix");
  std::vector<double> out(c);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = x[j];
    for (std::size_t i = 1; i < r; ++i) {
      if (x[i * c + j] > out[j]) {
        out[j] = x[i * c + j];
        arg[j] = i;
      }
    }
  }
  return detail::make_result("max_rows", {c}, std::move(out), {x}, [arg, c](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t j = 0; j < c; ++j) p.grad[arg[j] * c + j] += self.grad[j];
  });
}

// ---------------------------------------------------------------------------
// Normalizers and losses

/// Softmax over a rank-1 tensor. Masked entries (mask[i] == 0) are exactly
/// zero and excluded from normalization; an empty mask keeps everything.
inline Tensor softmax_masked(const Tensor& scores, std::span<const std::uint8_t> mask = {}) {
  detail::require_rank(scores, 1, "softmax_masked");
  std::size_t n = scores.numel();
  if (!mask.empty() && mask.size() != n) {
    throw DimensionError("softmax_masked: mask length " + std::to_string(mask.size()) + " vs " + std::to_string(n));
  }
  auto keep = [&](std::size_t i) { return mask.empty() || mask[i] != 0; };
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (keep(i)) mx = std::max(mx, scores[i]);
  if (!std::isfinite(mx)) throw DegenerateInputError("softmax_masked: every entry is masked");
  std::vector<double> out(n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep(i)) {
      out[i] = std::exp(scores[i] - mx);
      z += out[i];
    }
  }
  for (auto& v : out) v /= z;
  return detail::make_result("softmax_masked", {n}, std::move(out), {scores}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    double s = 0.0;
    for (std::size_t i = 0; i < self.value.size(); ++i) s += self.value[i] * self.grad[i];
    for (std::size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.value[i] * (self.grad[i] - s);
  });
}

inline Tensor softmax(const Tensor& scores) { return softmax_masked(scores, {}); }

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, with x = pred - target.
inline Tensor smooth_l1(const Tensor& pred, double target) {
  if (pred.numel() != 1) throw DimensionError("smooth_l1: prediction must be a scalar");
  if (!std::isfinite(target)) throw ContractError("smooth_l1: non-finite target");
  double x = pred[0] - target;
  double loss = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
  return detail::make_result("smooth_l1", {}, {loss}, {pred}, [x](detail::Node& self) {
    double d = std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0);
    self.parents[0]->grad[0] += self.grad[0] * d;
  });
}

/// Sum over classes of binary cross-entropy between sigmoid(logits) and targets.
inline Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  detail::require_rank(logits, 1, "bce_with_logits");
  if (targets.size() != logits.numel()) throw DimensionError("bce_with_logits: target length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    double z = logits[i];
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<double> t(targets.begin(), targets.end());
  return detail::make_result("bce_with_logits", {}, {loss}, {logits}, [t](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < t.size(); ++i) {
      p.grad[i] += self.grad[0] * (detail::stable_sigmoid(p.value[i]) - t[i]);
    }
  });
}

/// -log softmax(logits)[target], computed through log-sum-exp.
inline Tensor cross_entropy_logits(const Tensor& logits, std::size_t target) {
  detail::require_rank(logits, 1, "cross_entropy_logits");
  if (target >= logits.numel()) throw DimensionError("cross_entropy_logits: target index out of range");
  double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double z = 0.0;
  for (double v : logits.values()) z += std::exp(v - mx);
  double lse = mx + std::log(z);
  return detail::make_result("cross_entropy_logits", {}, {lse - logits[target]}, {logits},
                             [target, lse](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double prob = std::exp(p.value[i] - lse);
      p.grad[i] += self.grad[0] * (prob - (i == target ? 1.0 : 0.0));
    }
  });
}

}  // namespace lat
