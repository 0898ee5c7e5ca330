#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lat/embedding.hpp"
#include "lat/features.hpp"
#include "lat/nn.hpp"

// Captioning decoder with a visual and a linguistic input LSTM, attention
// over V and over L, and an output LSTM feeding the word distribution.
namespace lat::caption {

/// Token list where index == line number. The first four entries are fixed.
class Vocabulary {
 public:
  static constexpr std::size_t pad = 0, start = 1, end = 2, unk = 3;
  static constexpr const char* specials[4] = {"<pad>", "<start>", "<end>", "<unk>"};

  Vocabulary() {
    for (const char* s : specials) add(s);
  }

  /// Adds a token if absent; returns its index either way.
  std::size_t add(const std::string& token) {
    if (token.empty()) throw ContractError("vocabulary: empty token");
    auto [it, inserted] = index_.emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk : it->second;
  }

  const std::string& token(std::size_t i) const {
    if (i >= tokens_.size()) throw ContractError("vocabulary: index out of range");
    return tokens_[i];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Every token from the corpus, in first-seen order (minimum frequency 1).
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus) {
    Vocabulary v;
    for (const auto& sentence : corpus)
      for (const auto& t : sentence) v.add(t);
    return v;
  }

  void save(std::ostream& out) const {
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(std::istream& in) {
    Vocabulary v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (n <= 4) {
        if (line != specials[n - 1]) {
          throw ParseError("vocabulary line " + std::to_string(n) + ": expected " + specials[n - 1]);
        }
        continue;
      }
      if (line.empty() || line.find(' ') != std::string::npos) {
        throw ParseError("vocabulary line " + std::to_string(n) + ": malformed token");
      }
      if (v.index_.count(line)) throw ParseError("vocabulary line " + std::to_string(n) + ": duplicate token");
      v.add(line);
    }
    if (n < 4) throw ParseError("vocabulary: missing special tokens");
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct CaptionConfig {
  std::size_t d_v = 32;
  std::size_t d_w = 32;
  std::size_t d_e = 32;      // V-LSTM and L-LSTM hidden
  std::size_t hidden_o = 32; // O-LSTM hidden
  std::size_t d = 32;        // attention width
  std::size_t vocab_size = 0;
  bool use_lat = true;

  void validate() const {
    if (vocab_size < 4) throw ContractError("caption: vocabulary needs at least the 4 special tokens");
    if (d_v == 0 || d_w == 0 || d_e == 0 || hidden_o == 0 || d == 0) throw ContractError("caption: widths must be positive");
  }
};

struct AttentionParams {
  Tensor W;    // feature width x d
  Tensor W_h;  // d_e x d
  Tensor w_a;  // d
};

class CaptionModel {
 public:
  /// word_vectors: vocab_size x d_w constant input embedding, one row per
  /// vocabulary index.
  CaptionModel(CaptionConfig config, Tensor word_vectors, std::uint64_t seed)
      : config_(config), words_(std::move(word_vectors)) {
    config_.validate();
    const auto& c = config_;
    if (words_.shape() != Shape{c.vocab_size, c.d_w}) {
      throw DimensionError("caption: word vectors " + shape_str(words_.shape()) + " do not match vocabulary x d_w");
    }
    Initializer init(seed);
    v_lstm = make_cell(params_, init, "cap.v_lstm", CellKind::lstm, c.hidden_o + c.d_v + c.d_w, c.d_e);
    att_v.W = params_.add("cap.att_v.W", init.weight(c.d_v, c.d));
    att_v.W_h = params_.add("cap.att_v.W_h", init.weight(c.d_e, c.d));
    att_v.w_a = params_.add("cap.att_v.w_a", init.uniform({c.d}, c.d, 1));
    o_lstm = make_cell(params_, init, "cap.o_lstm", CellKind::lstm, c.d_v + c.d_w + 2 * c.d_e, c.hidden_o);
    out = make_linear(params_, init, "cap.out", c.hidden_o, c.vocab_size);
    l_lstm = make_cell(params_, init, "lat.cap.l_lstm", CellKind::lstm, c.hidden_o + c.d_w + c.d_w, c.d_e);
    att_l.W = params_.add("lat.cap.att_l.W", init.weight(c.d_w, c.d));
    att_l.W_h = params_.add("lat.cap.att_l.W_h", init.weight(c.d_e, c.d));
    att_l.w_a = params_.add("lat.cap.att_l.w_a", init.uniform({c.d}, c.d, 1));
  }

  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;
  CaptionModel(CaptionModel&&) = default;
  CaptionModel& operator=(CaptionModel&&) = default;

  const CaptionConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const Tensor& word_vectors() const { return words_; }

  /// Zeros the L-LSTM, the L-attention and the O-LSTM input rows fed by o^l
  /// and h^l, leaving a forward equal to the visual-only decoder.
  void zero_lat_parameters() {
    for (auto& e : params_.entries()) {
      if (e.name.rfind("lat.", 0) == 0) {
        auto v = e.tensor.mutable_values();
        std::fill(v.begin(), v.end(), 0.0);
      }
    }
    const auto& c = config_;
    std::size_t cols = o_lstm.w_input.dim(1);
    auto w = o_lstm.w_input.mutable_values();
    auto zero_rows = [&](std::size_t begin, std::size_t count) {
      std::fill(w.begin() + begin * cols, w.begin() + (begin + count) * cols, 0.0);
    };
    zero_rows(c.d_v, c.d_w);                // o^l
    zero_rows(c.d_v + c.d_w + c.d_e, c.d_e);  // h^l
  }

  RecurrentCell v_lstm;
  RecurrentCell l_lstm;
  RecurrentCell o_lstm;
  AttentionParams att_v;
  AttentionParams att_l;
  Linear out;

 private:
  CaptionConfig config_;
  Tensor words_;
  ParameterSet params_;
};

struct CaptionState {
  RecurrentState v, l, o;
};

inline CaptionState initial_state(const CaptionModel& model) {
  return {lat::initial_state(model.v_lstm), lat::initial_state(model.l_lstm), lat::initial_state(model.o_lstm)};
}

/// Per-scene constants reused at every step.
struct SceneContext {
  Tensor V, L;
  Tensor V_mean, L_mean;
  Tensor V_proj, L_proj;  // V W^v, L W^l
};

inline SceneContext prepare_scene(const CaptionModel& model, const SceneFeatures& scene) {
  const auto& c = model.config();
  if (scene.d_v() != c.d_v || scene.d_w() != c.d_w) throw DimensionError("caption: scene widths differ from the model");
  SceneContext ctx;
  ctx.V = scene.V;
  ctx.L = scene.L;
  ctx.V_mean = reduce(scene.V, Reduce::mean, 0);
  ctx.L_mean = reduce(scene.L, Reduce::mean, 0);
  ctx.V_proj = matmul(scene.V, model.att_v.W);
  if (c.use_lat) ctx.L_proj = matmul(scene.L, model.att_l.W);
  return ctx;
}

/// h^v_t = V-LSTM([h^o_{t-1}, V-bar, q_t]); h^l_t likewise with L-bar.
inline void input_layer_step(const CaptionModel& model, const SceneContext& ctx, const Tensor& q_t, CaptionState& st) {
  st.v = recurrent_step(model.v_lstm, concat({st.o.h, ctx.V_mean, q_t}, 0), st.v);
  if (model.config().use_lat) st.l = recurrent_step(model.l_lstm, concat({st.o.h, ctx.L_mean, q_t}, 0), st.l);
}

/// softmax(tanh(F W + 1 h^T W_h) w_a), with F W precomputed.
inline Tensor attention_weights(const Tensor& projected, const Tensor& h, const AttentionParams& p) {
  return softmax(matmul(tanh(add_rows(projected, matmul(h, p.W_h))), p.w_a));
}

struct DualAttention {
  Tensor alpha;
  Tensor beta;  // undefined without LAT
};

inline DualAttention dual_attention(const CaptionModel& model, const SceneContext& ctx, const CaptionState& st) {
  DualAttention a;
  a.alpha = attention_weights(ctx.V_proj, st.v.h, model.att_v);
  if (model.config().use_lat) a.beta = attention_weights(ctx.L_proj, st.l.h, model.att_l);
  return a;
}

/// o^v = alpha^T V, o^l = beta^T L.
inline std::pair<Tensor, Tensor> attend_encode(const Tensor& V, const Tensor& alpha, const Tensor& L, const Tensor& beta) {
  if (alpha.numel() != V.dim(0)) throw DimensionError("attend_encode: alpha does not match V rows");
  Tensor ov = matmul(alpha, V);
  Tensor ol;
  if (beta.defined()) {
    if (beta.numel() != L.dim(0)) throw DimensionError("attend_encode: beta does not match L rows");
    ol = matmul(beta, L);
  }
  return {ov, ol};
}

/// O-LSTM over [o^v, o^l, h^v, h^l]; returns the vocabulary logits. Without
/// LAT the o^l and h^l slots carry zeros.
inline Tensor output_layer_step(const CaptionModel& model, const Tensor& ov, const Tensor& ol, CaptionState& st) {
  const auto& c = model.config();
  Tensor olv = ol.defined() ? ol : Tensor::zeros({c.d_w});
  Tensor hl = c.use_lat ? st.l.h : Tensor::zeros({c.d_e});
  st.o = recurrent_step(model.o_lstm, concat({ov, olv, st.v.h, hl}, 0), st.o);
  return apply(model.out, st.o.h);
}

struct StepOutput {
  Tensor logits;
  DualAttention attention;
};

inline StepOutput decode_step(const CaptionModel& model, const SceneContext& ctx, std::size_t word, CaptionState& st) {
  if (word >= model.config().vocab_size) throw ContractError("caption: token index outside the vocabulary");
  input_layer_step(model, ctx, row(model.word_vectors(), word), st);
  StepOutput s;
  s.attention = dual_attention(model, ctx, st);
  auto [ov, ol] = attend_encode(ctx.V, s.attention.alpha, ctx.L, s.attention.beta);
  s.logits = output_layer_step(model, ov, ol, st);
  return s;
}

/// Teacher-forced steps: input reference[t], predicting reference[t+1].
inline std::vector<StepOutput> rollout(const CaptionModel& model, const SceneFeatures& scene,
                                       const std::vector<std::size_t>& reference) {
  if (reference.size() < 2 || reference.front() != Vocabulary::start || reference.back() != Vocabulary::end) {
    throw ContractError("caption: reference must start with <start> and end with <end>");
  }
  auto ctx = prepare_scene(model, scene);
  auto st = initial_state(model);
  std::vector<StepOutput> steps;
  for (std::size_t t = 0; t + 1 < reference.size(); ++t) steps.push_back(decode_step(model, ctx, reference[t], st));
  return steps;
}

/// Mean over steps of -log y_t[reference_{t+1}].
inline Tensor caption_loss(const CaptionModel& model, const SceneFeatures& scene,
                           const std::vector<std::size_t>& reference) {
  auto steps = rollout(model, scene, reference);
  Tensor total = cross_entropy_logits(steps[0].logits, reference[1]);
  for (std::size_t t = 1; t < steps.size(); ++t) total = add(total, cross_entropy_logits(steps[t].logits, reference[t + 1]));
  return scale(total, 1.0 / static_cast<double>(steps.size()));
}

/// Greedy argmax from <start> until <end> or max_len emitted tokens; ties go
/// to the lowest index. The returned sequence excludes <start> and <end>.
inline std::vector<std::size_t> generate_caption(const CaptionModel& model, const SceneFeatures& scene,
                                                 std::size_t max_len) {
  NoGradGuard ng;
  auto ctx = prepare_scene(model, scene);
  auto st = initial_state(model);
  std::vector<std::size_t> out;
  std::size_t word = Vocabulary::start;
  while (out.size() < max_len) {
    auto step = decode_step(model, ctx, word, st);
    auto y = step.logits.values();
    std::size_t best = 0;
    for (std::size_t i = 1; i < y.size(); ++i)
      if (y[i] > y[best]) best = i;
    if (best == Vocabulary::end) break;
    out.push_back(best);
    word = best;
  }
  return out;
}

/// Reference ids <start> w1 .. wn <end>; unknown words map to <unk>.
inline std::vector<std::size_t> encode_caption(const Vocabulary& vocab, const std::vector<std::string>& words) {
  std::vector<std::size_t> ids{Vocabulary::start};
  for (const auto& w : words) ids.push_back(vocab.id(w));
  ids.push_back(Vocabulary::end);
  return ids;
}

/// vocab_size x d_w input matrix; special tokens get zero rows.
inline Tensor word_vectors_for(const Vocabulary& vocab, const EmbeddingTable& table) {
  std::size_t dw = table.dim();
  std::vector<double> data(vocab.size() * dw, 0.0);
  for (std::size_t i = 4; i < vocab.size(); ++i) {
    auto r = table.lookup(vocab.token(i));
    std::copy(r.vector.begin(), r.vector.end(), data.begin() + i * dw);
  }
  return Tensor::matrix(vocab.size(), dw, std::move(data));
}

}  // namespace lat::caption
