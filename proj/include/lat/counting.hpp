#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lat/embedding.hpp"
#include "lat/features.hpp"
#include "lat/nn.hpp"

// Counting-VQA: semantic dense co-attention over (objects x question words)
// feeding a low-rank bilinear count regressor.
namespace lat::counting {

enum class EmbeddingSource { pretrained, onehot_separate, onehot_shared };
enum class Regressor { tucker, linear };

struct CountingConfig {
  std::size_t d_v = 32;
  std::size_t d_w = 32;
  std::size_t d = 64;  // encoded image / question width, even
  std::size_t k = 8;   // Tucker rank
  bool use_L = true;        // l_i enters the score
  bool use_VB = true;       // W_v(o_i) enters the score
  bool use_B = true;        // box features appended to V before W_v
  bool coattention = true;  // false: every real word gets equal weight
  Regressor regressor = Regressor::tucker;
  EmbeddingSource source = EmbeddingSource::pretrained;
  std::size_t vocab_size = 0;  // one-hot sources only

  void validate() const {
    if (d == 0 || d % 2 != 0) throw ContractError("counting: d must be a positive even number");
    if (k == 0 || k > d) throw ContractError("counting: rank k must satisfy 1 <= k <= d");
    if (!use_L && !use_VB) throw ContractError("counting: score needs at least one of L and W_v(o)");
    if (source != EmbeddingSource::pretrained && vocab_size == 0) {
      throw ContractError("counting: one-hot embedding needs a vocabulary");
    }
  }
};

/// W_v (two layers, BN + ReLU between), W_a, b_a.
struct CoAttentionParams {
  Linear layer1;
  BatchNorm bn;
  Linear layer2;
  Tensor w_a;  // d_w
  Tensor b_a;  // scalar
};

struct BiLstm {
  RecurrentCell forward;
  RecurrentCell backward;
};

struct CountPredictorParams {
  Tensor W_s;  // d_v x d
  BiLstm bilstm;
  Tensor W_q;  // d x k, applied to f
  Tensor T_c;  // k x k
  Tensor W_f;  // d x k, applied to q
  Tensor b_r;  // scalar
  Tensor w_lin;  // d, linear-regression head only
};

class CountingModel {
 public:
  CountingModel(CountingConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Initializer init(seed);
    const auto& c = config_;
    std::size_t in = c.d_v + (c.use_B ? 5 : 0);
    coatt.layer1 = make_linear(params_, init, "coatt.wv1", in, c.d_w);
    coatt.bn = make_batch_norm(params_, "coatt.bn", c.d_w);
    coatt.layer2 = make_linear(params_, init, "coatt.wv2", c.d_w, c.d_w);
    coatt.w_a = params_.add("coatt.w_a", init.uniform({c.d_w}, c.d_w, 1));
    coatt.b_a = params_.add("coatt.b_a", Tensor::scalar(0.0));
    pred.W_s = params_.add("pred.W_s", init.weight(c.d_v, c.d));
    pred.bilstm.forward = make_cell(params_, init, "pred.lstm_fwd", CellKind::lstm, c.d_w, c.d / 2);
    pred.bilstm.backward = make_cell(params_, init, "pred.lstm_bwd", CellKind::lstm, c.d_w, c.d / 2);
    if (c.regressor == Regressor::tucker) {
      pred.W_q = params_.add("pred.W_q", init.weight(c.d, c.k));
      pred.T_c = params_.add("pred.T_c", init.weight(c.k, c.k));
      pred.W_f = params_.add("pred.W_f", init.weight(c.d, c.k));
    } else {
      pred.w_lin = params_.add("pred.w_lin", init.uniform({c.d}, c.d, 1));
    }
    pred.b_r = params_.add("pred.b_r", Tensor::scalar(0.0));
    if (c.source == EmbeddingSource::onehot_separate) {
      label_table = params_.add("embed.labels", init.weight(c.vocab_size, c.d_w));
      question_table = params_.add("embed.words", init.weight(c.vocab_size, c.d_w));
    } else if (c.source == EmbeddingSource::onehot_shared) {
      label_table = params_.add("embed.shared", init.weight(c.vocab_size, c.d_w));
      question_table = label_table;
    }
  }

  // Handles share storage with the ParameterSet, so copying a model would
  // alias its parameters; models move or live in place.
  CountingModel(const CountingModel&) = delete;
  CountingModel& operator=(const CountingModel&) = delete;
  CountingModel(CountingModel&&) = default;
  CountingModel& operator=(CountingModel&&) = default;

  const CountingConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Stored parameters of the count regressor (W_q, T_c, W_f, b_r, or the
  /// linear head).
  std::size_t regression_parameter_count() const {
    std::size_t n = pred.b_r.numel();
    if (config_.regressor == Regressor::tucker) n += pred.W_q.numel() + pred.T_c.numel() + pred.W_f.numel();
    else n += pred.w_lin.numel();
    return n;
  }

  CoAttentionParams coatt;
  CountPredictorParams pred;
  Tensor label_table;
  Tensor question_table;

 private:
  CountingConfig config_;
  ParameterSet params_;
};

/// One sample. Token / label ids index the one-hot vocabulary and are only
/// read by one-hot embedding sources.
struct CountingInput {
  const SceneFeatures* scene = nullptr;
  const QuestionFeatures* question = nullptr;
  std::vector<std::size_t> label_ids;
  std::vector<std::size_t> token_ids;
};

/// S is m x n; masked (padding) columns hold exactly 0 and are excluded by
/// every consumer through the mask.
struct ScoreMatrix {
  Tensor S;
  Mask mask;
};

struct CoAttentionWeights {
  Tensor mu;  // m
  Tensor nu;  // n, zero on masked words
  Tensor S;
};

struct CountingOutput {
  Tensor score;  // raw regression output, unrounded
  CoAttentionWeights attention;
  Tensor f;
  Tensor q;
};

inline std::vector<std::size_t> real_positions(const Mask& mask) {
  std::vector<std::size_t> j;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) j.push_back(i);
  return j;
}

/// W_v applied to every row of O: layer1 -> BN -> ReLU -> layer2.
inline Tensor project_objects(const Tensor& O, CoAttentionParams& p, NormMode mode) {
  if (O.dim(1) != p.layer1.in()) {
    throw DimensionError("W_v expects " + std::to_string(p.layer1.in()) + " input columns, got " +
                         std::to_string(O.dim(1)));
  }
  return apply(p.layer2, relu(batch_norm(apply(p.layer1, O), p.bn, mode)));
}

/// S[i,j] = w_a . tanh(A_i * q_j) + b_a over real words j, where A is
/// P * L, P alone or L alone depending on which operands are given.
inline ScoreMatrix score_matrix_from(const Tensor& P, const Tensor& L, const Tensor& Q, const Mask& mask,
                                     const Tensor& w_a, const Tensor& b_a) {
  Tensor A;
  if (P.defined() && L.defined()) {
    if (P.shape() != L.shape()) throw DimensionError("score_matrix: W_v(O) " + shape_str(P.shape()) + " vs L " + shape_str(L.shape()));
    A = mul(P, L);
  } else {
    A = P.defined() ? P : L;
  }
  detail::require_rank(Q, 2, "score_matrix");
  if (Q.dim(1) != A.dim(1)) {
    throw DimensionError("score_matrix: d_w of objects (" + std::to_string(A.dim(1)) + ") and question (" +
                         std::to_string(Q.dim(1)) + ") differ");
  }
  if (mask.size() != Q.dim(0)) throw DimensionError("score_matrix: mask length differs from question rows");
  std::size_t m = A.dim(0), n = Q.dim(0);
  auto J = real_positions(mask);
  if (J.empty()) return {Tensor::zeros({m, n}), mask};
  std::size_t nr = J.size();
  std::vector<std::size_t> obj_idx, word_idx;
  obj_idx.reserve(m * nr);
  word_idx.reserve(m * nr);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j : J) {
      obj_idx.push_back(i);
      word_idx.push_back(j);
    }
  Tensor pairs = tanh(mul(gather_rows(A, std::move(obj_idx)), gather_rows(Q, std::move(word_idx))));
  Tensor s = reshape(matmul(pairs, w_a), {m, nr});
  s = add(s, expand_scalar(b_a, {m, nr}));
  return {scatter_columns(s, J, n), mask};
}

/// Score matrix from raw O (visual and box columns), running W_v first.
inline ScoreMatrix score_matrix(const Tensor& O, const Tensor& L, const Tensor& Q, const Mask& mask,
                                CoAttentionParams& p, NormMode mode) {
  return score_matrix_from(project_objects(O, p, mode), L, Q, mask, p.w_a, p.b_a);
}

/// mu = softmax over objects of row sums of S; nu = masked softmax over words
/// of column sums. With uniform_words, nu is 1/n_real on every real word.
inline CoAttentionWeights coattention_weights(const ScoreMatrix& sm, bool uniform_words = false) {
  CoAttentionWeights w;
  w.S = sm.S;
  w.mu = softmax(reduce(sm.S, Reduce::sum, 1));
  if (uniform_words) {
    auto J = real_positions(sm.mask);
    if (J.empty()) throw DegenerateInputError("coattention: every word is masked");
    std::vector<double> nu(sm.mask.size(), 0.0);
    for (auto j : J) nu[j] = 1.0 / static_cast<double>(J.size());
    w.nu = Tensor::vector(std::move(nu));
  } else {
    w.nu = softmax_masked(reduce(sm.S, Reduce::sum, 0), sm.mask);
  }
  return w;
}

/// f = sum_i mu_i (W_s^T v_i), evaluated as (mu^T V) W_s.
inline Tensor encode_image(const Tensor& V, const Tensor& mu, const Tensor& W_s) {
  if (mu.numel() != V.dim(0)) throw DimensionError("encode_image: weights do not match object count");
  return matmul(matmul(mu, V), W_s);
}

/// Bi-LSTM over nu_j * q_j at real positions; q = [h_fwd_last, h_bwd_last].
inline Tensor encode_question(const Tensor& Q, const Tensor& nu, const Mask& mask, const BiLstm& lstm) {
  auto J = real_positions(mask);
  if (J.empty()) throw DegenerateInputError("encode_question: question has no real tokens");
  Tensor weighted = row_scale(Q, nu);
  std::vector<Tensor> xs;
  xs.reserve(J.size());
  for (auto j : J) xs.push_back(row(weighted, j));
  RecurrentState fs = initial_state(lstm.forward);
  for (const auto& x : xs) fs = recurrent_step(lstm.forward, x, fs);
  RecurrentState bs = initial_state(lstm.backward);
  for (auto it = xs.rbegin(); it != xs.rend(); ++it) bs = recurrent_step(lstm.backward, *it, bs);
  return concat({fs.h, bs.h}, 0);
}

/// (W_q^T f)^T T_c (W_f^T q) + b_r, the factored <f (x) q, W_q T_c W_f^T> + b_r.
inline Tensor predict_count(const Tensor& f, const Tensor& q, const Tensor& W_q, const Tensor& T_c,
                            const Tensor& W_f, const Tensor& b_r) {
  if (f.numel() != W_q.dim(0) || q.numel() != W_f.dim(0)) {
    throw DimensionError("predict_count: f/q length does not match factor rows");
  }
  Tensor a = matmul(matmul(f, W_q), T_c);
  Tensor b = matmul(q, W_f);
  return add(dot(a, b), b_r);
}

/// Elementwise fusion followed by an affine head.
inline Tensor predict_count_linear(const Tensor& f, const Tensor& q, const Tensor& w, const Tensor& b_r) {
  return add(dot(mul(f, q), w), b_r);
}

/// W_r = W_q T_c W_f^T as a d x d row-major array. Test oracle only.
inline std::vector<double> reconstruct_Wr(const Tensor& W_q, const Tensor& T_c, const Tensor& W_f) {
  NoGradGuard ng;
  if (T_c.dim(0) != W_q.dim(1) || T_c.dim(1) != W_f.dim(1)) throw DimensionError("reconstruct_Wr: factor shapes");
  Tensor wr = matmul(matmul(W_q, T_c), transpose(W_f));
  return {wr.values().begin(), wr.values().end()};
}

/// Half away from zero, clamped below at zero.
inline std::int64_t round_count(double score) {
  if (!std::isfinite(score)) throw ContractError("round_count: non-finite score");
  double r = std::round(score);
  return r < 0 ? 0 : static_cast<std::int64_t>(r);
}

inline Tensor training_loss(const Tensor& score, double target) {
  if (target < 0 || std::floor(target) != target) throw ContractError("training_loss: target must be a nonnegative integer");
  return smooth_l1(score, target);
}

namespace internal {

inline Tensor linguistic_features(CountingModel& model, const CountingInput& in) {
  if (model.config().source == EmbeddingSource::pretrained) return in.scene->L;
  if (in.label_ids.size() != in.scene->m()) throw DimensionError("counting: label ids do not match objects");
  return gather_rows(model.label_table, in.label_ids);
}

inline Tensor word_features(CountingModel& model, const CountingInput& in) {
  const auto& qf = *in.question;
  if (model.config().source == EmbeddingSource::pretrained) return qf.Q;
  auto J = real_positions(qf.mask);
  if (in.token_ids.size() != J.size()) throw DimensionError("counting: token ids do not match real words");
  for (std::size_t k = 0; k < J.size(); ++k) {
    if (J[k] != k) throw ContractError("counting: one-hot words need a padding-suffix mask");
  }
  Tensor real = gather_rows(model.question_table, in.token_ids);
  std::size_t pad = qf.capacity() - J.size();
  if (pad == 0) return real;
  return concat({real, Tensor::zeros({pad, model.config().d_w})}, 0);
}

}  // namespace internal

/// Forward over a minibatch. W_v's batch normalization sees the objects of
/// every sample in the batch stacked together.
inline std::vector<CountingOutput> forward_batch(CountingModel& model, std::span<const CountingInput> batch,
                                                 NormMode mode) {
  const auto& c = model.config();
  std::vector<CountingOutput> outs;
  outs.reserve(batch.size());
  Tensor P_all;
  std::vector<std::size_t> offsets;
  if (c.use_VB) {
    std::vector<Tensor> Os;
    std::size_t off = 0;
    for (const auto& in : batch) {
      Os.push_back(c.use_B ? concat_visual_box(*in.scene) : in.scene->V);
      offsets.push_back(off);
      off += in.scene->m();
    }
    P_all = project_objects(Os.size() == 1 ? Os[0] : concat(Os, 0), model.coatt, mode);
  }
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& in = batch[s];
    std::size_t m = in.scene->m();
    Tensor P;
    if (c.use_VB) {
      if (batch.size() == 1) {
        P = P_all;
      } else {
        std::vector<std::size_t> idx(m);
        for (std::size_t i = 0; i < m; ++i) idx[i] = offsets[s] + i;
        P = gather_rows(P_all, std::move(idx));
      }
    }
    Tensor L = c.use_L ? internal::linguistic_features(model, in) : Tensor{};
    Tensor Q = internal::word_features(model, in);
    auto sm = score_matrix_from(P, L, Q, in.question->mask, model.coatt.w_a, model.coatt.b_a);
    CountingOutput out;
    out.attention = coattention_weights(sm, !c.coattention);
    out.f = encode_image(in.scene->V, out.attention.mu, model.pred.W_s);
    out.q = encode_question(Q, out.attention.nu, in.question->mask, model.pred.bilstm);
    out.score = c.regressor == Regressor::tucker
                    ? predict_count(out.f, out.q, model.pred.W_q, model.pred.T_c, model.pred.W_f, model.pred.b_r)
                    : predict_count_linear(out.f, out.q, model.pred.w_lin, model.pred.b_r);
    outs.push_back(std::move(out));
  }
  return outs;
}

inline CountingOutput forward(CountingModel& model, const CountingInput& in, NormMode mode) {
  auto outs = forward_batch(model, std::span<const CountingInput>(&in, 1), mode);
  return std::move(outs.front());
}

}  // namespace lat::counting
