#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lat/embedding.hpp"
#include "lat/features.hpp"
#include "lat/nn.hpp"

// Linguistically-aware injections into three classification VQA decoders:
// UpDn-style top-down attention, MUREL-style pooled fusion and a BAN-style
// bilinear co-attention. Every model allocates its baseline parameters first
// and its LAT parameters (prefix "lat.") after them, so a baseline and a LAT
// model built from the same seed share identical baseline weights.
namespace lat::vqa {

/// tanh(W x + b) * sigmoid(W' x + b'), on a vector or on every row of a matrix.
struct GatedTanh {
  Linear main;
  Linear gate;
};

inline GatedTanh make_gated_tanh(ParameterSet& ps, Initializer& init, const std::string& name, std::size_t in,
                                 std::size_t out) {
  return {make_linear(ps, init, name + ".W", in, out), make_linear(ps, init, name + ".Wg", in, out)};
}

inline Tensor gated_tanh(const Tensor& x, const GatedTanh& p) {
  return mul(tanh(apply(p.main, x)), sigmoid(apply(p.gate, x)));
}

/// Visual term f_v([v_i, q]) scored by w_v, plus the linguistic term over
/// every (object, real word) pair.
struct LatVisualAttentionParams {
  GatedTanh f_v;  // d_v + d -> d_w
  Tensor w_v;     // d_w
  GatedTanh f_l;  // d_w -> d_w
  Tensor w_l;     // d_w
  Tensor b_l;     // d_w, enters as w_l . b_l once per real word
};

struct AnswerHead {
  Linear out;  // d -> d_o
};

/// Per-object relevance s and gamma = softmax(s). With use_lat false the
/// linguistic term is skipped entirely.
struct VisualAttention {
  Tensor s;
  Tensor gamma;
};

inline Tensor visual_attention_term(const Tensor& V, const Tensor& q, const LatVisualAttentionParams& p) {
  if (V.rank() != 2 || q.rank() != 1) throw DimensionError("visual attention: V must be a matrix and q a vector");
  Tensor X = concat({V, expand_rows(q, V.dim(0))}, 1);
  if (X.dim(1) != p.f_v.main.in()) {
    throw DimensionError("visual attention: [v_i, q] has " + std::to_string(X.dim(1)) + " columns, f_v expects " +
                         std::to_string(p.f_v.main.in()));
  }
  return matmul(gated_tanh(X, p.f_v), p.w_v);
}

/// sum_j (w_l . f_l(l_i * q_j) + w_l . b_l) over real words j; one entry per object.
inline Tensor linguistic_attention_term(const Tensor& L, const Tensor& Q, const Mask& mask,
                                        const LatVisualAttentionParams& p) {
  if (L.dim(1) != Q.dim(1)) {
    throw DimensionError("linguistic attention: L " + shape_str(L.shape()) + " vs Q " + shape_str(Q.shape()));
  }
  if (mask.size() != Q.dim(0)) throw DimensionError("linguistic attention: mask length differs from question rows");
  std::vector<std::size_t> J;
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) J.push_back(j);
  if (J.empty()) throw DegenerateInputError("linguistic attention: question has no real tokens");
  std::size_t m = L.dim(0), nr = J.size();
  std::vector<std::size_t> oi, wj;
  oi.reserve(m * nr);
  wj.reserve(m * nr);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j : J) {
      oi.push_back(i);
      wj.push_back(j);
    }
  Tensor pairs = gated_tanh(mul(gather_rows(L, std::move(oi)), gather_rows(Q, std::move(wj))), p.f_l);
  Tensor per_pair = add(matmul(pairs, p.w_l), expand_scalar(dot(p.w_l, p.b_l), {m * nr}));
  return reduce(reshape(per_pair, {m, nr}), Reduce::sum, 1);
}

inline VisualAttention lat_visual_attention(const Tensor& V, const Tensor& L, const Tensor& Q, const Mask& mask,
                                            const Tensor& q, const LatVisualAttentionParams& p, bool use_lat) {
  VisualAttention out;
  out.s = visual_attention_term(V, q, p);
  if (use_lat) {
    if (L.dim(0) != V.dim(0)) throw DimensionError("visual attention: V and L row counts differ");
    out.s = add(out.s, linguistic_attention_term(L, Q, mask, p));
  }
  out.gamma = softmax(out.s);
  return out;
}

/// s = sum_i gamma_i s_i over per-object fused rows.
inline Tensor murel_lat_pool(const Tensor& fused, const Tensor& gamma) {
  if (fused.rank() != 2 || gamma.numel() != fused.dim(0)) {
    throw DimensionError("murel pool: weights " + shape_str(gamma.shape()) + " vs rows " + shape_str(fused.shape()));
  }
  return matmul(gamma, fused);
}

/// One low-rank bilinear glimpse. X' = relu(X U), Y' = relu(Y W);
/// logits[i,j] = (X'_i * p) . Y'_j + b, A = softmax over all (i, j);
/// joint[c] = sum_ij A[i,j] X'[i,c] Y'[j,c].
struct BilinearParams {
  Tensor U;  // d_x x C
  Tensor W;  // d_y x C
  Tensor p;  // C
  Tensor b;  // scalar
};

inline BilinearParams make_bilinear(ParameterSet& ps, Initializer& init, const std::string& name, std::size_t dx,
                                    std::size_t dy, std::size_t C) {
  BilinearParams out;
  out.U = ps.add(name + ".U", init.weight(dx, C));
  out.W = ps.add(name + ".W", init.weight(dy, C));
  out.p = ps.add(name + ".p", init.uniform({C}, C, 1));
  out.b = ps.add(name + ".b", Tensor::scalar(0.0));
  return out;
}

struct BilinearResult {
  Tensor joint;  // C
  Tensor A;      // rows(X) x rows(Y)
};

inline BilinearResult bilinear_coattention(const Tensor& X, const Tensor& Y, const BilinearParams& bp) {
  if (X.rank() != 2 || Y.rank() != 2 || X.dim(0) == 0 || Y.dim(0) == 0) {
    throw DimensionError("bilinear coattention needs nonempty matrices");
  }
  if (X.dim(1) != bp.U.dim(0) || Y.dim(1) != bp.W.dim(0)) {
    throw DimensionError("bilinear coattention: inputs " + shape_str(X.shape()) + ", " + shape_str(Y.shape()) +
                         " vs projections " + shape_str(bp.U.shape()) + ", " + shape_str(bp.W.shape()));
  }
  std::size_t r = X.dim(0), c = Y.dim(0);
  Tensor Xp = relu(matmul(X, bp.U));
  Tensor Yp = relu(matmul(Y, bp.W));
  Tensor logits = matmul(mul(Xp, expand_rows(bp.p, r)), transpose(Yp));
  logits = add(logits, expand_scalar(bp.b, {r, c}));
  Tensor A = reshape(softmax(reshape(logits, {r * c})), {r, c});
  // joint[c] = sum_i X'[i,c] (A Y')[i,c]
  Tensor joint = reduce(mul(Xp, matmul(A, Yp)), Reduce::sum, 0);
  return {joint, A};
}

enum class Architecture { updn, murel, ban };
enum class Pooling { max, attention };

struct VqaConfig {
  Architecture arch = Architecture::updn;
  std::size_t d_v = 32;
  std::size_t d_w = 32;
  std::size_t d = 32;        // question / fused width
  std::size_t joint = 32;    // BAN joint dimension C
  std::size_t d_o = 8;       // answer vocabulary
  bool use_lat = true;
  Pooling pooling = Pooling::attention;  // MUREL only

  void validate() const {
    if (d_o < 2) throw ContractError("vqa: answer vocabulary must have at least 2 entries");
    if (d_v == 0 || d_w == 0 || d == 0 || joint == 0) throw ContractError("vqa: widths must be positive");
    if (arch == Architecture::murel && use_lat && pooling == Pooling::max) {
      throw ContractError("vqa: LAT pooling for MUREL is attention-weighted");
    }
  }
};

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::updn: return "updn";
    case Architecture::murel: return "murel";
    case Architecture::ban: return "ban";
  }
  return "?";
}

class VqaModel {
 public:
  VqaModel(VqaConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Initializer init(seed);
    const auto& c = config_;
    gru = make_cell(params_, init, "q.gru", CellKind::gru, c.d_w, c.d);
    if (c.arch == Architecture::ban) {
      visual_block = make_bilinear(params_, init, "ban.v", c.d, c.d_v, c.joint);
      head.out = make_linear(params_, init, "head", c.joint, c.d_o);
      lat_block = make_bilinear(params_, init, "lat.ban.l", c.d_w, c.d_w, c.joint);
      return;
    }
    // The visual attention term is baseline; its linguistic half is LAT.
    att.f_v = make_gated_tanh(params_, init, "att.f_v", c.d_v + c.d, c.d_w);
    att.w_v = params_.add("att.w_v", init.uniform({c.d_w}, c.d_w, 1));
    f_obj = make_gated_tanh(params_, init, "fuse.obj", c.d_v, c.d);
    f_q = make_gated_tanh(params_, init, "fuse.q", c.d, c.d);
    head.out = make_linear(params_, init, "head", c.d, c.d_o);
    att.f_l = make_gated_tanh(params_, init, "lat.f_l", c.d_w, c.d_w);
    att.w_l = params_.add("lat.w_l", init.uniform({c.d_w}, c.d_w, 1));
    att.b_l = params_.add("lat.b_l", Tensor::zeros({c.d_w}));
  }

  VqaModel(const VqaModel&) = delete;
  VqaModel& operator=(const VqaModel&) = delete;
  VqaModel(VqaModel&&) = default;
  VqaModel& operator=(VqaModel&&) = default;

  const VqaConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Sets every LAT-branch parameter to exactly zero.
  void zero_lat_parameters() {
    for (auto& e : params_.entries()) {
      if (e.name.rfind("lat.", 0) == 0) {
        auto v = e.tensor.mutable_values();
        std::fill(v.begin(), v.end(), 0.0);
      }
    }
  }

  RecurrentCell gru;
  LatVisualAttentionParams att;
  GatedTanh f_obj;
  GatedTanh f_q;
  BilinearParams visual_block;
  BilinearParams lat_block;
  AnswerHead head;

 private:
  VqaConfig config_;
  ParameterSet params_;
};

struct VqaOutput {
  Tensor logits;            // d_o
  Tensor scores;            // sigmoid(logits)
  Tensor gamma;             // UpDn / MUREL attention pooling
  Tensor visual_map;        // BAN attention over (word, object)
  Tensor linguistic_map;    // BAN L-branch, when enabled
};

/// GRU hidden states at every real word (padding-suffix mask assumed).
inline std::vector<Tensor> question_states(const VqaModel& model, const QuestionFeatures& qf) {
  std::vector<Tensor> xs;
  for (std::size_t j = 0; j < qf.capacity(); ++j)
    if (qf.mask[j]) xs.push_back(row(qf.Q, j));
  if (xs.empty()) throw DegenerateInputError("vqa: question has no real tokens");
  return run_sequence(model.gru, xs);
}

inline VqaOutput forward(const VqaModel& model, const SceneFeatures& scene, const QuestionFeatures& qf) {
  const auto& c = model.config();
  if (scene.d_v() != c.d_v) throw DimensionError("vqa: scene d_v differs from the model");
  if (qf.Q.dim(1) != c.d_w || scene.d_w() != c.d_w) throw DimensionError("vqa: d_w differs from the model");
  auto states = question_states(model, qf);
  VqaOutput out;
  Tensor fused;
  if (c.arch == Architecture::ban) {
    Tensor Qhat = stack_rows(states);
    auto vis = bilinear_coattention(Qhat, scene.V, model.visual_block);
    out.visual_map = vis.A;
    fused = vis.joint;
    if (c.use_lat) {
      std::vector<std::size_t> J;
      for (std::size_t j = 0; j < qf.capacity(); ++j)
        if (qf.mask[j]) J.push_back(j);
      auto lin = bilinear_coattention(gather_rows(qf.Q, J), scene.L, model.lat_block);
      out.linguistic_map = lin.A;
      fused = add(fused, lin.joint);
    }
  } else {
    const Tensor& q = states.back();
    Tensor qp = gated_tanh(q, model.f_q);
    bool attend = c.arch == Architecture::updn || c.pooling == Pooling::attention;
    if (attend) {
      auto va = lat_visual_attention(scene.V, scene.L, qf.Q, qf.mask, q, model.att, c.use_lat);
      out.gamma = va.gamma;
    }
    if (c.arch == Architecture::updn) {
      fused = mul(gated_tanh(matmul(out.gamma, scene.V), model.f_obj), qp);
    } else {
      Tensor per_object = mul(gated_tanh(scene.V, model.f_obj), expand_rows(qp, scene.m()));
      fused = attend ? murel_lat_pool(per_object, out.gamma) : max_rows(per_object);
    }
  }
  out.logits = apply(model.head.out, fused);
  out.scores = sigmoid(out.logits);
  return out;
}

/// Summed per-class binary cross-entropy against the one-hot answer.
inline Tensor answer_loss(const VqaOutput& out, std::size_t answer) {
  std::size_t d_o = out.logits.numel();
  if (answer >= d_o) throw ContractError("vqa: answer index outside the answer vocabulary");
  std::vector<double> target(d_o, 0.0);
  target[answer] = 1.0;
  return bce_with_logits(out.logits, target);
}

/// Highest score, lowest index on ties.
inline std::size_t predict_answer(const VqaOutput& out) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < out.scores.numel(); ++i)
    if (out.scores[i] > out.scores[best]) best = i;
  return best;
}

}  // namespace lat::vqa
