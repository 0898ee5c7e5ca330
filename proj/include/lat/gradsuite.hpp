#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lat/caption.hpp"
#include "lat/counting.hpp"
#include "lat/gradcheck.hpp"
#include "lat/harness.hpp"
#include "lat/vqa.hpp"
#include "lat/world.hpp"

// Finite-difference checks over every differentiable op and every model,
// shared by the CLI's grad-check command and the acceptance binary.
namespace lat::gradsuite {

struct CaseResult {
  std::string name;
  double max_relative_error = 0;
  std::size_t entries = 0;
};

namespace internal {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool grad = true) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  auto t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

// Projection onto fixed random weights so every output entry gets its own
// gradient.
inline Tensor weigh(const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = random_tensor(rng, x.shape(), false);
  return sum_all(mul(x, p));
}

}  // namespace internal

inline std::vector<CaseResult> op_cases(std::uint64_t seed) {
  using internal::random_tensor;
  using internal::weigh;
  std::mt19937_64 rng(seed);
  std::size_t r = 3, c = 4, t = 2;
  auto A = random_tensor(rng, {r, c});
  auto B = random_tensor(rng, {r, c});
  auto M = random_tensor(rng, {c, t});
  auto v = random_tensor(rng, {c});
  auto w = random_tensor(rng, {r});
  auto s = Tensor::scalar(0.4, true);
  auto Z = random_tensor(rng, {4 * c});
  auto Gi = random_tensor(rng, {3 * c});
  auto Gh = random_tensor(rng, {3 * c});
  Mask mask(c, 1);
  mask[1] = 0;
  BatchNorm bn;
  bn.gamma = random_tensor(rng, {c});
  bn.beta = random_tensor(rng, {c});
  bn.running_mean = Tensor::from({c}, std::vector<double>(c, 0.1));
  bn.running_var = Tensor::from({c}, std::vector<double>(c, 1.3));
  std::vector<std::pair<std::string, std::function<Tensor()>>> cases = {
      {"add", [&] { return weigh(add(A, B), 1); }},
      {"sub", [&] { return weigh(sub(A, B), 2); }},
      {"mul", [&] { return weigh(mul(A, B), 3); }},
      {"scale", [&] { return weigh(scale(A, -1.7), 4); }},
      {"tanh", [&] { return weigh(tanh(A), 5); }},
      {"sigmoid", [&] { return weigh(sigmoid(A), 6); }},
      {"relu", [&] { return weigh(relu(A), 7); }},
      {"exp", [&] { return weigh(exp(A), 8); }},
      {"log", [&] { return weigh(log(add_constant(mul(A, A), 0.5)), 9); }},
      {"matmul", [&] { return weigh(matmul(A, M), 10); }},
      {"matvec", [&] { return weigh(matmul(A, v), 11); }},
      {"vecmat", [&] { return weigh(matmul(w, A), 12); }},
      {"dot", [&] { return mul(dot(v, v), s); }},
      {"outer_product", [&] { return weigh(outer_product(v, mul(v, v)), 13); }},
      {"transpose", [&] { return weigh(transpose(A), 14); }},
      {"reshape", [&] { return weigh(reshape(A, {c, r}), 15); }},
      {"concat", [&] { return weigh(concat({A, B}, 1), 16); }},
      {"slice", [&] { return weigh(slice(v, 1, c), 17); }},
      {"gather_rows", [&] { return weigh(gather_rows(A, {0, r - 1, 0}), 18); }},
      {"stack_rows", [&] { return weigh(stack_rows({v, v}), 19); }},
      {"scatter_columns", [&] { return weigh(scatter_columns(A, {0, 2, 3, 5}, 6), 20); }},
      {"expand_rows", [&] { return weigh(expand_rows(v, 3), 21); }},
      {"expand_scalar", [&] { return weigh(expand_scalar(s, {2, 2}), 22); }},
      {"row_scale", [&] { return weigh(row_scale(A, w), 23); }},
      {"add_rows", [&] { return weigh(add_rows(A, v), 24); }},
      {"reduce_sum", [&] { return weigh(reduce(A, Reduce::sum, 0), 25); }},
      {"reduce_mean", [&] { return weigh(reduce(A, Reduce::mean, 1), 26); }},
      {"max_rows", [&] { return weigh(max_rows(A), 27); }},
      {"softmax_masked", [&] { return weigh(softmax_masked(v, mask), 28); }},
      {"smooth_l1", [&] { return add(smooth_l1(mul(s, s), 0.5), smooth_l1(dot(v, v), -3.0)); }},
      {"bce_with_logits", [&] { return bce_with_logits(v, std::vector<double>{1, 0, 0, 1}); }},
      {"cross_entropy", [&] { return cross_entropy_logits(v, c - 1); }},
      {"batch_norm_train", [&] { return weigh(batch_norm(A, bn, NormMode::train), 29); }},
      {"batch_norm_eval", [&] { return weigh(batch_norm(A, bn, NormMode::eval), 30); }},
      {"lstm_cell", [&] { return weigh(detail::lstm_pointwise(Z, v), 31); }},
      {"gru_cell", [&] { return weigh(detail::gru_pointwise(Gi, Gh, v), 32); }},
  };
  std::vector<CaseResult> out;
  for (auto& [name, fn] : cases) {
    // Training-mode BN updates running stats on every call; they do not
    // feed the train-mode output, so the check stays exact.
    auto r = finite_diff_check(fn, {A, B, M, v, w, s, Z, Gi, Gh, bn.gamma, bn.beta});
    out.push_back({"op." + name, r.max_relative_error, r.entries_checked});
  }
  return out;
}

/// Small world whose samples feed the model checks.
inline harness::Dataset tiny_dataset(std::uint64_t seed) {
  world::WorldSpec spec;
  spec.seed = seed;
  spec.classes = 4;
  spec.d_w = 20;
  spec.d_v = 6;
  spec.train_scenes = 4;
  spec.val_scenes = spec.test_seen_scenes = spec.test_synonym_scenes = 1;
  spec.max_count = 3;
  spec.max_distractors = 3;
  return harness::dataset_from_world(world::generate_world(spec));
}

inline std::vector<CaseResult> model_cases(std::uint64_t seed) {
  auto ds = tiny_dataset(seed);
  auto data = harness::prepare(ds, 8);
  std::vector<CaseResult> out;
  auto record = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> params) {
    auto r = finite_diff_check(f, std::move(params));
    out.push_back({name, r.max_relative_error, r.entries_checked});
  };

  // Counting: train-mode batch of two scenes and eval-mode single scene, for
  // every ablation that changes the graph.
  const char* variants[] = {"full", "no_coattention", "no_L", "no_VB", "no_B", "linear_regression",
                            "onehot_separate", "onehot_shared"};
  for (const char* v : variants) {
    auto cfg = harness::variant_config(harness::Config(), v);
    cfg.set("model.d", "6");
    cfg.set("model.k", "3");
    counting::CountingModel model(harness::counting_config(cfg, data), seed + 1);
    std::vector<counting::CountingInput> batch = {harness::counting_input(data.samples[0]),
                                                  harness::counting_input(data.samples[1])};
    double t0 = static_cast<double>(data.samples[0].answer), t1 = static_cast<double>(data.samples[1].answer);
    record(std::string("counting.") + v + ".train",
           [&] {
             auto o = counting::forward_batch(model, batch, NormMode::train);
             return add(counting::training_loss(o[0].score, t0), counting::training_loss(o[1].score, t1));
           },
           model.parameters().trainable());
    record(std::string("counting.") + v + ".eval",
           [&] { return counting::training_loss(counting::forward(model, batch[0], NormMode::eval).score, t0); },
           model.parameters().trainable());
  }

  for (const char* arch : {"updn", "murel", "ban"}) {
    for (bool lat_on : {false, true}) {
      harness::Config cfg;
      cfg.set("model", arch);
      cfg.set("vqa.hidden", "6");
      cfg.set("vqa.joint", "5");
      cfg.set("vqa.use_lat", lat_on ? "true" : "false");
      vqa::VqaModel model(harness::vqa_config(cfg, data), seed + 2);
      const auto& s = data.samples[2];
      record(std::string("vqa.") + arch + (lat_on ? "+lat" : ""),
             [&] { return vqa::answer_loss(vqa::forward(model, s.scene, s.question), s.answer); },
             model.parameters().trainable());
    }
  }

  auto cd = harness::caption_data(ds);
  for (bool lat_on : {false, true}) {
    harness::Config cfg;
    cfg.set("caption.d_e", "5");
    cfg.set("caption.hidden_o", "5");
    cfg.set("caption.d", "4");
    cfg.set("caption.use_lat", lat_on ? "true" : "false");
    caption::CaptionModel model(harness::caption_config(cfg, data, cd.vocab.size()),
                                caption::word_vectors_for(cd.vocab, ds.embeddings), seed + 3);
    record(std::string("caption") + (lat_on ? "+lat" : ""),
           [&] { return caption::caption_loss(model, data.samples[3].scene, cd.references[3]); },
           model.parameters().trainable());
  }
  return out;
}

inline std::vector<CaseResult> run_all(std::uint64_t seed) {
  auto out = op_cases(seed);
  auto models = model_cases(seed);
  out.insert(out.end(), models.begin(), models.end());
  return out;
}

}  // namespace lat::gradsuite
