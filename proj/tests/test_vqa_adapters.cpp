#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lat/gradcheck.hpp"
#include "lat/vqa.hpp"
#include "test_util.hpp"

using namespace lat;
using namespace lat::vqa;
using lat::testing::random_tensor;

namespace {

SceneFeatures random_scene(std::mt19937_64& rng, std::size_t m, std::size_t dv, std::size_t dw) {
  SceneFeatures s;
  s.V = random_tensor(rng, {m, dv});
  s.L = random_tensor(rng, {m, dw});
  s.B = random_tensor(rng, {m, 5}, false, 0, 1);
  s.labels.assign(m, "obj");
  s.confidence.assign(m, 1.0);
  return s;
}

QuestionFeatures random_question(std::mt19937_64& rng, std::size_t n, std::size_t cap, std::size_t dw) {
  QuestionFeatures q;
  std::vector<double> vals(cap * dw, 0.0);
  auto real = lat::testing::random_values(rng, n * dw);
  std::copy(real.begin(), real.end(), vals.begin());
  q.Q = Tensor::matrix(cap, dw, vals);
  q.mask.assign(cap, 0);
  for (std::size_t j = 0; j < n; ++j) {
    q.mask[j] = 1;
    q.tokens.push_back("w");
    q.oov.push_back(0);
  }
  return q;
}

VqaConfig tiny(Architecture arch, bool use_lat) {
  VqaConfig c;
  c.arch = arch;
  c.d_v = 3;
  c.d_w = 4;
  c.d = 5;
  c.joint = 4;
  c.d_o = 3;
  c.use_lat = use_lat;
  return c;
}

void fill(Tensor t, double v) {
  auto x = t.mutable_values();
  std::fill(x.begin(), x.end(), v);
}

void randomize_zeros(ParameterSet& ps, std::mt19937_64& rng) {
  for (auto& e : ps.entries()) {
    if (!e.trainable) continue;
    for (auto& x : e.tensor.mutable_values())
      if (x == 0.0) x = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  }
}

}  // namespace

TEST(GatedTanh, ZeroSaturatedAndBounded) {
  ParameterSet ps;
  Initializer init(1);
  auto g = make_gated_tanh(ps, init, "g", 3, 2);
  std::mt19937_64 rng(2);
  auto x = random_tensor(rng, {3}, false, -5, 5);
  for (auto& e : ps.entries()) fill(e.tensor, 0.0);
  auto zero_out = gated_tanh(x, g);
  for (double v : zero_out.values()) EXPECT_EQ(v, 0.0);

  ParameterSet ps2;
  auto h = make_gated_tanh(ps2, init, "h", 3, 2);
  fill(h.gate.bias, 30.0);
  fill(h.gate.weight, 0.0);
  auto y = gated_tanh(x, h);
  auto t = tanh(apply(h.main, x));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(y[i], t[i], 1e-9);

  for (int trial = 0; trial < 50; ++trial) {
    auto big = random_tensor(rng, {3}, false, -50, 50);
    auto bounded = gated_tanh(big, h);
    for (double v : bounded.values()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(LatVisualAttention, HandCase) {
  ParameterSet ps;
  Initializer init(3);
  LatVisualAttentionParams p;
  p.f_v = make_gated_tanh(ps, init, "fv", 1 + 1, 2);
  p.w_v = ps.add("wv", Tensor::vector({0.5, -1.0}));
  p.f_l = make_gated_tanh(ps, init, "fl", 2, 2);
  p.w_l = ps.add("wl", Tensor::vector({1.5, 0.25}));
  p.b_l = ps.add("bl", Tensor::vector({0.1, -0.2}));
  auto V = Tensor::matrix(2, 1, {0.4, -0.8});
  auto L = Tensor::matrix(2, 2, {1, 0.5, -0.3, 0.2});
  auto Q = Tensor::matrix(3, 2, {0.6, -0.1, 0.9, 0.7, 0, 0});
  Mask mask{1, 1, 0};
  auto q = Tensor::vector({0.3});
  auto gt = [](const GatedTanh& g, const std::vector<double>& x, std::size_t k) {
    double a = g.main.bias[k], b = g.gate.bias[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      a += x[i] * g.main.weight.at(i, k);
      b += x[i] * g.gate.weight.at(i, k);
    }
    return std::tanh(a) / (1 + std::exp(-b));
  };
  double s[2];
  for (std::size_t i = 0; i < 2; ++i) {
    s[i] = 0;
    for (std::size_t k = 0; k < 2; ++k) s[i] += p.w_v[k] * gt(p.f_v, {V.at(i, 0), 0.3}, k);
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<double> x{L.at(i, 0) * Q.at(j, 0), L.at(i, 1) * Q.at(j, 1)};
      for (std::size_t k = 0; k < 2; ++k) s[i] += p.w_l[k] * (gt(p.f_l, x, k) + p.b_l[k]);
    }
  }
  auto out = lat_visual_attention(V, L, Q, mask, q, p, true);
  EXPECT_NEAR(out.s[0], s[0], 1e-14);
  EXPECT_NEAR(out.s[1], s[1], 1e-14);
  double e0 = std::exp(s[0]), e1 = std::exp(s[1]);
  EXPECT_NEAR(out.gamma[0], e0 / (e0 + e1), 1e-14);
}

TEST(LatVisualAttention, ZeroedLinguisticPathIsBaselineAndSymmetry) {
  std::mt19937_64 rng(4);
  ParameterSet ps;
  Initializer init(5);
  LatVisualAttentionParams p;
  p.f_v = make_gated_tanh(ps, init, "fv", 3 + 2, 4);
  p.w_v = ps.add("wv", init.uniform({4}, 4, 1));
  p.f_l = make_gated_tanh(ps, init, "fl", 4, 4);
  p.w_l = ps.add("wl", Tensor::zeros({4}));
  p.b_l = ps.add("bl", Tensor::zeros({4}));
  auto V = random_tensor(rng, {4, 3});
  auto L = random_tensor(rng, {4, 4});
  auto Q = random_tensor(rng, {3, 4});
  auto q = random_tensor(rng, {2});
  auto with = lat_visual_attention(V, L, Q, Mask{1, 1, 1}, q, p, true);
  auto without = lat_visual_attention(V, L, Q, Mask{1, 1, 1}, q, p, false);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(with.s[i], without.s[i]);

  auto same = Tensor::matrix(3, 3, {1, 2, 3, 1, 2, 3, 1, 2, 3});
  auto Ls = Tensor::matrix(3, 4, {1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0});
  auto u = lat_visual_attention(same, Ls, Q, Mask{1, 1, 0}, q, p, true);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(u.gamma[i], 1.0 / 3, 1e-15);
  EXPECT_THROW(lat_visual_attention(V, random_tensor(rng, {4, 3}), Q, Mask{1, 1, 1}, q, p, true), DimensionError);
}

TEST(LatVisualAttention, PropertyNormalizedOverRandomInputs) {
  std::mt19937_64 rng(6);
  ParameterSet ps;
  Initializer init(7);
  LatVisualAttentionParams p;
  p.f_v = make_gated_tanh(ps, init, "fv", 3 + 2, 4);
  p.w_v = ps.add("wv", init.uniform({4}, 4, 1));
  p.f_l = make_gated_tanh(ps, init, "fl", 4, 4);
  p.w_l = ps.add("wl", init.uniform({4}, 4, 1));
  p.b_l = ps.add("bl", random_tensor(rng, {4}));
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t m = 1 + rng() % 6;
    auto out = lat_visual_attention(random_tensor(rng, {m, 3}, false, -3, 3), random_tensor(rng, {m, 4}),
                                    random_tensor(rng, {3, 4}), Mask{1, 1, static_cast<uint8_t>(rng() % 2)},
                                    random_tensor(rng, {2}), p, true);
    double sum = 0;
    for (double g : out.gamma.values()) {
      EXPECT_GE(g, 0.0);
      sum += g;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    auto shifted = softmax(add_constant(out.s, 4.5));
    for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(shifted[i], out.gamma[i], 1e-12);
  }
}

TEST(MurelPool, SelectionMeanAndHandCase) {
  std::mt19937_64 rng(8);
  auto S = random_tensor(rng, {4, 3});
  auto pick = murel_lat_pool(S, Tensor::vector({0, 0, 1, 0}));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(pick[k], S.at(2, k));
  auto mean = murel_lat_pool(S, Tensor::full({4}, 0.25));
  auto expect = reduce(S, Reduce::mean, 0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(mean[k], expect[k], 1e-12);
  auto h = murel_lat_pool(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::vector({0.25, 0.75}));
  EXPECT_DOUBLE_EQ(h[0], 2.5);
  EXPECT_DOUBLE_EQ(h[1], 3.5);
}

TEST(BilinearCoattention, NormalizationCases) {
  ParameterSet ps;
  Initializer init(9);
  auto bp = make_bilinear(ps, init, "b", 3, 2, 4);
  std::mt19937_64 rng(10);
  auto r = bilinear_coattention(random_tensor(rng, {3, 3}), random_tensor(rng, {5, 2}), bp);
  EXPECT_EQ(r.A.shape(), (Shape{3, 5}));
  EXPECT_NEAR(lat::testing::sum_values(r.A), 1.0, 1e-12);
  auto one = bilinear_coattention(random_tensor(rng, {1, 3}), random_tensor(rng, {1, 2}), bp);
  EXPECT_EQ(one.A[0], 1.0);
  fill(bp.p, 0.0);
  auto uni = bilinear_coattention(random_tensor(rng, {2, 3}), random_tensor(rng, {3, 2}), bp);
  for (double a : uni.A.values()) EXPECT_NEAR(a, 1.0 / 6, 1e-15);
}

TEST(BanCombine, AdditiveAndZeroBranches) {
  std::mt19937_64 rng(11);
  VqaModel lat(tiny(Architecture::ban, true), 12);
  VqaModel base(tiny(Architecture::ban, false), 12);
  auto s = random_scene(rng, 3, 3, 4);
  auto q = random_question(rng, 3, 4, 4);
  // f_o - f_v - f_l = 0, from branches computed independently.
  auto states = question_states(lat, q);
  auto fv = bilinear_coattention(stack_rows(states), s.V, lat.visual_block).joint;
  auto fl = bilinear_coattention(gather_rows(q.Q, {0, 1, 2}), s.L, lat.lat_block).joint;
  auto fo = add(fv, fl);
  auto logits = apply(lat.head.out, fo);
  auto out = forward(lat, s, q);
  for (std::size_t i = 0; i < logits.numel(); ++i) EXPECT_EQ(out.logits[i], logits[i]);

  lat.zero_lat_parameters();
  auto zl = bilinear_coattention(gather_rows(q.Q, {0, 1, 2}), s.L, lat.lat_block).joint;
  for (double v : zl.values()) EXPECT_EQ(v, 0.0);
  for (auto& e : lat.parameters().entries()) fill(e.tensor, 0.0);
  auto zero_v = bilinear_coattention(stack_rows(question_states(lat, q)), s.V, lat.visual_block).joint;
  auto both = add(zero_v, zl);
  for (double v : both.values()) EXPECT_EQ(v, 0.0);
}

TEST(VqaForward, ScoresInUnitIntervalAndOneHotSelection) {
  std::mt19937_64 rng(13);
  for (auto arch : {Architecture::updn, Architecture::murel, Architecture::ban}) {
    VqaModel model(tiny(arch, true), 14);
    for (int trial = 0; trial < 10; ++trial) {
      auto s = random_scene(rng, 1 + rng() % 4, 3, 4);
      auto q = random_question(rng, 1 + rng() % 4, 4, 4);
      auto out = forward(model, s, q);
      for (double v : out.scores.values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
  }
  VqaModel updn(tiny(Architecture::updn, true), 15);
  auto onehot = matmul(Tensor::vector({0, 1}), Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(onehot[0], 4.0);
}

TEST(VqaForward, ZeroedLatReproducesBaselineBitwise) {
  std::mt19937_64 rng(16);
  for (auto arch : {Architecture::updn, Architecture::murel, Architecture::ban}) {
    VqaModel lat(tiny(arch, true), 17);
    VqaModel base(tiny(arch, false), 17);
    lat.zero_lat_parameters();
    for (int trial = 0; trial < 5; ++trial) {
      auto s = random_scene(rng, 2 + rng() % 3, 3, 4);
      auto q = random_question(rng, 1 + rng() % 4, 4, 4);
      auto a = forward(lat, s, q), b = forward(base, s, q);
      for (std::size_t i = 0; i < a.logits.numel(); ++i) EXPECT_EQ(a.logits[i], b.logits[i]) << to_string(arch);
    }
  }
}

TEST(VqaForward, MurelMaxPoolingBaseline) {
  auto cfg = tiny(Architecture::murel, false);
  cfg.pooling = Pooling::max;
  VqaModel model(cfg, 18);
  std::mt19937_64 rng(19);
  auto s = random_scene(rng, 3, 3, 4);
  auto q = random_question(rng, 2, 3, 4);
  auto out = forward(model, s, q);
  EXPECT_FALSE(out.gamma.defined());
  auto cfg2 = tiny(Architecture::murel, true);
  cfg2.pooling = Pooling::max;
  EXPECT_THROW(VqaModel(cfg2, 1), ContractError);
}

TEST(VqaForward, GradientChecks) {
  for (auto arch : {Architecture::updn, Architecture::murel, Architecture::ban}) {
    for (bool use_lat : {false, true}) {
      std::mt19937_64 rng(20);
      VqaModel model(tiny(arch, use_lat), 21);
      randomize_zeros(model.parameters(), rng);
      auto s = random_scene(rng, 3, 3, 4);
      auto q = random_question(rng, 3, 4, 4);
      auto r = finite_diff_check([&] { return answer_loss(forward(model, s, q), 1); }, model.parameters().trainable());
      EXPECT_LT(r.max_relative_error, 1e-4) << to_string(arch) << " lat=" << use_lat;
    }
  }
}

TEST(AnswerLoss, ContractAndPrediction) {
  VqaOutput out;
  out.logits = Tensor::vector({0.0, 2.0, 2.0});
  out.scores = sigmoid(out.logits);
  EXPECT_EQ(predict_answer(out), 1u);
  EXPECT_THROW(answer_loss(out, 3), ContractError);
  double expect = std::log(2.0) + std::log1p(std::exp(-2.0)) + std::log1p(std::exp(2.0));
  EXPECT_NEAR(answer_loss(out, 1).item(), expect, 1e-12);
  auto cfg = tiny(Architecture::updn, true);
  cfg.d_o = 1;
  EXPECT_THROW(VqaModel(cfg, 1), ContractError);
}
