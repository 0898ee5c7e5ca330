#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lat/ops.hpp"

namespace lat {

/// Named tensors of a model, in registration order. Buffers (batch-norm
/// running statistics) travel with the parameters but are not trained.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable;
  };

  Tensor add(std::string name, Tensor t, bool trainable = true) {
    for (const auto& e : entries_) {
      if (e.name == name) throw ContractError("duplicate parameter name '" + name + "'");
    }
    t.set_requires_grad(trainable);
    entries_.push_back({std::move(name), t, trainable});
    return t;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw ContractError("no parameter named '" + name + "'");
  }
  Tensor& get(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw ContractError("no parameter named '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return true;
    return false;
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }
  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Seeded parameter initializer: uniform on [-a, a], a = sqrt(6/(fan_in+fan_out)).
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor uniform(Shape shape, std::size_t fan_in, std::size_t fan_out) {
    double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng_);
    return Tensor::from(std::move(shape), std::move(v));
  }
  Tensor weight(std::size_t in, std::size_t out) { return uniform({in, out}, in, out); }
  Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape)); }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------

/// Affine map stored as in x out, applied as x W + b.
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

inline Linear make_linear(ParameterSet& ps, Initializer& init, const std::string& name, std::size_t in,
                          std::size_t out, bool with_bias = true) {
  Linear l;
  l.weight = ps.add(name + ".weight", init.weight(in, out));
  if (with_bias) l.bias = ps.add(name + ".bias", init.zeros({out}));
  return l;
}

/// Applies to a vector or to every row of a matrix.
inline Tensor apply(const Linear& l, const Tensor& x) {
  Tensor y = matmul(x, l.weight);
  if (!l.bias.defined()) return y;
  return y.rank() == 2 ? add_rows(y, l.bias) : add(y, l.bias);
}

// ---------------------------------------------------------------------------

enum class NormMode { train, eval };

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // buffers
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

inline BatchNorm make_batch_norm(ParameterSet& ps, const std::string& name, std::size_t d) {
  BatchNorm bn;
  bn.gamma = ps.add(name + ".gamma", Tensor::full({d}, 1.0));
  bn.beta = ps.add(name + ".beta", Tensor::zeros({d}));
  bn.running_mean = ps.add(name + ".running_mean", Tensor::zeros({d}), false);
  bn.running_var = ps.add(name + ".running_var", Tensor::full({d}, 1.0), false);
  return bn;
}

/// Batch normalization over the rows of x (batch x d). Training mode uses
/// batch statistics and updates the running estimates; eval mode uses them.
inline Tensor batch_norm(const Tensor& x, BatchNorm& bn, NormMode mode) {
  detail::require_rank(x, 2, "batch_norm");
  std::size_t b = x.dim(0), d = x.dim(1);
  if (bn.gamma.numel() != d) throw DimensionError("batch_norm: feature width " + std::to_string(d) + " vs " + std::to_string(bn.gamma.numel()));
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  if (mode == NormMode::train) {
    if (b < 2) throw DegenerateInputError("batch_norm: training mode needs a batch of at least 2");
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double c = x[i * d + j] - mean[j];
        var[j] += c * c;
      }
    for (auto& v : var) v /= static_cast<double>(b);
    auto rm = bn.running_mean.mutable_values();
    auto rv = bn.running_var.mutable_values();
    double unbias = static_cast<double>(b) / static_cast<double>(b - 1);
    for (std::size_t j = 0; j < d; ++j) {
      rm[j] = (1.0 - bn.momentum) * rm[j] + bn.momentum * mean[j];
      rv[j] = (1.0 - bn.momentum) * rv[j] + bn.momentum * var[j] * unbias;
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] = bn.running_mean[j];
      var[j] = bn.running_var[j];
    }
  }
  std::vector<double> inv_std(d), xhat(b * d), out(b * d);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + bn.eps);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double h = (x[i * d + j] - mean[j]) * inv_std[j];
      xhat[i * d + j] = h;
      out[i * d + j] = bn.gamma[j] * h + bn.beta[j];
    }
  bool training = mode == NormMode::train;
  return detail::make_result("batch_norm", {b, d}, std::move(out), {x, bn.gamma, bn.beta},
                             [b, d, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& g = self.grad;
    for (std::size_t j = 0; j < d; ++j) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        sum_dy += g[i * d + j];
        sum_dy_xhat += g[i * d + j] * xhat[i * d + j];
      }
      if (pg.requires_grad) pg.grad[j] += sum_dy_xhat;
      if (pb.requires_grad) pb.grad[j] += sum_dy;
      if (!px.requires_grad) continue;
      double gamma = pg.value[j];
      if (training) {
        double inv_b = 1.0 / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
          std::size_t k = i * d + j;
          px.grad[k] += gamma * inv_std[j] * inv_b *
                        (static_cast<double>(b) * g[k] - sum_dy - xhat[k] * sum_dy_xhat);
        }
      } else {
        for (std::size_t i = 0; i < b; ++i) px.grad[i * d + j] += g[i * d + j] * gamma * inv_std[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Recurrent cells
//
// LSTM gate blocks are laid out [input | forget | cell | output]:
//   c_t = f * c_{t-1} + i * g,  h_t = o * tanh(c_t)
// GRU gate blocks are laid out [reset | update | new]:
//   n = tanh(W_n x + b_n + r * (U_n h + c_n)),  h_t = (1 - z) * h_{t-1} + z * n
// so an update gate saturated at 1 replaces the state with the candidate.

enum class CellKind { lstm, gru };

struct RecurrentCell {
  CellKind kind = CellKind::lstm;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  Tensor w_input;   // input_size x G*hidden
  Tensor w_hidden;  // hidden x G*hidden
  Tensor b_input;   // G*hidden
  Tensor b_hidden;  // G*hidden

  std::size_t gates() const { return kind == CellKind::lstm ? 4 : 3; }
};

struct RecurrentState {
  Tensor h;
  Tensor c;  // LSTM only
};

inline RecurrentCell make_cell(ParameterSet& ps, Initializer& init, const std::string& name, CellKind kind,
                               std::size_t input_size, std::size_t hidden_size) {
  if (hidden_size == 0) throw ContractError("recurrent cell needs hidden_size > 0");
  RecurrentCell cell;
  cell.kind = kind;
  cell.input_size = input_size;
  cell.hidden_size = hidden_size;
  std::size_t g = cell.gates() * hidden_size;
  cell.w_input = ps.add(name + ".w_input", init.uniform({input_size, g}, input_size, hidden_size));
  cell.w_hidden = ps.add(name + ".w_hidden", init.uniform({hidden_size, g}, hidden_size, hidden_size));
  cell.b_input = ps.add(name + ".b_input", init.zeros({g}));
  cell.b_hidden = ps.add(name + ".b_hidden", init.zeros({g}));
  return cell;
}

inline RecurrentState initial_state(const RecurrentCell& cell) {
  RecurrentState s;
  s.h = Tensor::zeros({cell.hidden_size});
  if (cell.kind == CellKind::lstm) s.c = Tensor::zeros({cell.hidden_size});
  return s;
}

namespace detail {

// Returns [h ; c] of length 2H.
inline Tensor lstm_pointwise(const Tensor& z, const Tensor& c_prev) {
  std::size_t hs = c_prev.numel();
  std::vector<double> ig(hs), fg(hs), gg(hs), og(hs), cv(hs), out(2 * hs);
  for (std::size_t k = 0; k < hs; ++k) {
    ig[k] = stable_sigmoid(z[k]);
    fg[k] = stable_sigmoid(z[hs + k]);
    gg[k] = std::tanh(z[2 * hs + k]);
    og[k] = stable_sigmoid(z[3 * hs + k]);
    cv[k] = fg[k] * c_prev[k] + ig[k] * gg[k];
    out[k] = og[k] * std::tanh(cv[k]);
    out[hs + k] = cv[k];
  }
  return make_result("lstm_cell", {2 * hs}, std::move(out), {z, c_prev},
                     [hs, ig, fg, gg, og, cv](Node& self) {
    auto& pz = *self.parents[0];
    auto& pc = *self.parents[1];
    for (std::size_t k = 0; k < hs; ++k) {
      double dh = self.grad[k];
      double tc = std::tanh(cv[k]);
      double d_o = dh * tc;
      double dc = self.grad[hs + k] + dh * og[k] * (1.0 - tc * tc);
      double di = dc * gg[k];
      double dg = dc * ig[k];
      double df = dc * pc.value[k];
      if (pc.requires_grad) pc.grad[k] += dc * fg[k];
      if (pz.requires_grad) {
        pz.grad[k] += di * ig[k] * (1.0 - ig[k]);
        pz.grad[hs + k] += df * fg[k] * (1.0 - fg[k]);
        pz.grad[2 * hs + k] += dg * (1.0 - gg[k] * gg[k]);
        pz.grad[3 * hs + k] += d_o * og[k] * (1.0 - og[k]);
      }
    }
  });
}

inline Tensor gru_pointwise(const Tensor& gi, const Tensor& gh, const Tensor& h_prev) {
  std::size_t hs = h_prev.numel();
  std::vector<double> r(hs), z(hs), n(hs), out(hs);
  for (std::size_t k = 0; k < hs; ++k) {
    r[k] = stable_sigmoid(gi[k] + gh[k]);
    z[k] = stable_sigmoid(gi[hs + k] + gh[hs + k]);
    n[k] = std::tanh(gi[2 * hs + k] + r[k] * gh[2 * hs + k]);
    out[k] = (1.0 - z[k]) * h_prev[k] + z[k] * n[k];
  }
  return make_result("gru_cell", {hs}, std::move(out), {gi, gh, h_prev}, [hs, r, z, n](Node& self) {
    auto& pi = *self.parents[0];
    auto& ph = *self.parents[1];
    auto& pp = *self.parents[2];
    for (std::size_t k = 0; k < hs; ++k) {
      double dh = self.grad[k];
      double dz = dh * (n[k] - pp.value[k]);
      double dn = dh * z[k];
      if (pp.requires_grad) pp.grad[k] += dh * (1.0 - z[k]);
      double dan = dn * (1.0 - n[k] * n[k]);
      double dr = dan * ph.value[2 * hs + k];
      double dar = dr * r[k] * (1.0 - r[k]);
      double daz = dz * z[k] * (1.0 - z[k]);
      if (pi.requires_grad) {
        pi.grad[k] += dar;
        pi.grad[hs + k] += daz;
        pi.grad[2 * hs + k] += dan;
      }
      if (ph.requires_grad) {
        ph.grad[k] += dar;
        ph.grad[hs + k] += daz;
        ph.grad[2 * hs + k] += dan * r[k];
      }
    }
  });
}

}  // namespace detail

inline RecurrentState recurrent_step(const RecurrentCell& cell, const Tensor& x, const RecurrentState& state) {
  if (x.rank() != 1 || x.numel() != cell.input_size) {
    throw DimensionError("recurrent_step: input " + shape_str(x.shape()) + " vs input_size " +
                         std::to_string(cell.input_size));
  }
  if (state.h.numel() != cell.hidden_size ||
      (cell.kind == CellKind::lstm && (!state.c.defined() || state.c.numel() != cell.hidden_size))) {
    throw DimensionError("recurrent_step: state does not match hidden_size " + std::to_string(cell.hidden_size));
  }
  Tensor gi = add(matmul(x, cell.w_input), cell.b_input);
  Tensor gh = add(matmul(state.h, cell.w_hidden), cell.b_hidden);
  std::size_t hs = cell.hidden_size;
  if (cell.kind == CellKind::lstm) {
    Tensor hc = detail::lstm_pointwise(add(gi, gh), state.c);
    return {slice(hc, 0, hs), slice(hc, hs, 2 * hs)};
  }
  return {detail::gru_pointwise(gi, gh, state.h), Tensor{}};
}

/// Runs the cell over the rows of xs in order and returns every hidden state.
inline std::vector<Tensor> run_sequence(const RecurrentCell& cell, const std::vector<Tensor>& xs) {
  RecurrentState s = initial_state(cell);
  std::vector<Tensor> hs;
  hs.reserve(xs.size());
  for (const auto& x : xs) {
    s = recurrent_step(cell, x, s);
    hs.push_back(s.h);
  }
  return hs;
}

}  // namespace lat
