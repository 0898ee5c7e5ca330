#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "lat/caption.hpp"
#include "lat/gradcheck.hpp"
#include "lat/optim.hpp"
#include "test_util.hpp"

using namespace lat;
using namespace lat::caption;
using lat::testing::random_tensor;

namespace {

CaptionConfig tiny(std::size_t vocab = 6, bool use_lat = true) {
  CaptionConfig c;
  c.d_v = 3;
  c.d_w = 4;
  c.d_e = 8;
  c.hidden_o = 5;
  c.d = 3;
  c.vocab_size = vocab;
  c.use_lat = use_lat;
  return c;
}

SceneFeatures random_scene(std::mt19937_64& rng, std::size_t m, std::size_t dv, std::size_t dw) {
  SceneFeatures s;
  s.V = random_tensor(rng, {m, dv});
  s.L = random_tensor(rng, {m, dw});
  s.B = Tensor::zeros({m, 5});
  s.labels.assign(m, "obj");
  s.confidence.assign(m, 1.0);
  return s;
}

Tensor random_words(std::mt19937_64& rng, std::size_t vocab, std::size_t dw) {
  auto w = random_tensor(rng, {vocab, dw});
  auto v = w.mutable_values();
  std::fill(v.begin(), v.begin() + 4 * dw, 0.0);
  return w;
}

void fill(Tensor t, double v) {
  auto x = t.mutable_values();
  std::fill(x.begin(), x.end(), v);
}

}  // namespace

TEST(Vocabulary, SpecialsRoundTripAndErrors) {
  auto v = Vocabulary::build({{"a", "dog", "a"}, {"cat"}});
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.id("<end>"), Vocabulary::end);
  EXPECT_EQ(v.id("dog"), 5u);
  EXPECT_EQ(v.id("zebra"), Vocabulary::unk);
  std::ostringstream out;
  v.save(out);
  std::istringstream in(out.str());
  auto back = Vocabulary::load(in);
  EXPECT_EQ(back.tokens(), v.tokens());
  std::istringstream bad("<pad>\n<begin>\n");
  EXPECT_THROW(Vocabulary::load(bad), ParseError);
  std::istringstream dup("<pad>\n<start>\n<end>\n<unk>\nx\nx\n");
  EXPECT_THROW(Vocabulary::load(dup), ParseError);
}

TEST(InputLayer, ShapeLawAndZeroFixpoint) {
  std::mt19937_64 rng(1);
  auto cfg = tiny();
  CaptionModel model(cfg, random_words(rng, 6, 4), 2);
  EXPECT_EQ(model.v_lstm.input_size, cfg.hidden_o + cfg.d_v + cfg.d_w);
  EXPECT_EQ(model.l_lstm.input_size, cfg.hidden_o + cfg.d_w + cfg.d_w);
  auto scene = random_scene(rng, 3, 3, 4);
  auto ctx = prepare_scene(model, scene);
  auto st = initial_state(model);
  EXPECT_THROW(input_layer_step(model, ctx, Tensor::zeros({5}), st), DimensionError);

  for (auto& e : model.parameters().entries()) fill(e.tensor, 0.0);
  auto zs = initial_state(model);
  input_layer_step(model, ctx, random_tensor(rng, {4}), zs);
  for (std::size_t k = 0; k < cfg.d_e; ++k) {
    EXPECT_EQ(zs.v.h[k], 0.0);
    EXPECT_EQ(zs.l.h[k], 0.0);
  }
  auto again = initial_state(model);
  auto q = random_tensor(rng, {4});
  auto s1 = initial_state(model), s2 = initial_state(model);
  input_layer_step(model, ctx, q, s1);
  input_layer_step(model, ctx, q, s2);
  EXPECT_EQ(s1.v.h[0], s2.v.h[0]);
}

TEST(DualAttention, SingleObjectIdenticalRowsAndHandCase) {
  std::mt19937_64 rng(3);
  AttentionParams p{random_tensor(rng, {2, 3}), random_tensor(rng, {4, 3}), random_tensor(rng, {3})};
  auto h = random_tensor(rng, {4});
  auto one = attention_weights(matmul(random_tensor(rng, {1, 2}), p.W), h, p);
  EXPECT_EQ(one[0], 1.0);
  auto same = attention_weights(matmul(Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2}), p.W), h, p);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(same[i], 1.0 / 3, 1e-15);

  auto F = Tensor::matrix(2, 2, {0.5, -1, 2, 0.25});
  auto a = attention_weights(matmul(F, p.W), h, p);
  double e[2];
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      double z = 0;
      for (std::size_t r = 0; r < 2; ++r) z += F.at(i, r) * p.W.at(r, k);
      for (std::size_t r = 0; r < 4; ++r) z += h[r] * p.W_h.at(r, k);
      s += std::tanh(z) * p.w_a[k];
    }
    e[i] = std::exp(s);
  }
  EXPECT_NEAR(a[0], e[0] / (e[0] + e[1]), 1e-14);
}

TEST(AttendEncode, SelectionMeanAndHandCase) {
  std::mt19937_64 rng(4);
  auto V = random_tensor(rng, {3, 2});
  auto L = random_tensor(rng, {3, 4});
  auto [ov, ol] = attend_encode(V, Tensor::vector({0, 0, 1}), L, Tensor::full({3}, 1.0 / 3));
  EXPECT_EQ(ov[0], V.at(2, 0));
  auto lm = reduce(L, Reduce::mean, 0);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(ol[k], lm[k], 1e-15);
  auto [hv, hl] = attend_encode(Tensor::matrix(2, 1, {2, 6}), Tensor::vector({0.75, 0.25}), L, Tensor{});
  EXPECT_DOUBLE_EQ(hv[0], 3.0);
  EXPECT_FALSE(hl.defined());
}

TEST(OutputLayer, DistributionAndVocabularyBounds) {
  std::mt19937_64 rng(5);
  CaptionModel model(tiny(4), random_words(rng, 4, 4), 6);
  auto scene = random_scene(rng, 2, 3, 4);
  auto steps = rollout(model, scene, {1, 3, 3, 2});
  for (const auto& s : steps) {
    auto y = softmax(s.logits);
    double sum = 0;
    for (double v : y.values()) {
      EXPECT_GT(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  EXPECT_THROW(CaptionModel(tiny(3), Tensor::zeros({3, 4}), 1), ContractError);
}

TEST(CaptionLoss, UniformPerfectAndHandCase) {
  std::mt19937_64 rng(7);
  CaptionModel model(tiny(6), random_words(rng, 6, 4), 8);
  auto scene = random_scene(rng, 2, 3, 4);
  fill(model.out.weight, 0.0);
  EXPECT_NEAR(caption_loss(model, scene, {1, 4, 5, 2}).item(), std::log(6.0), 1e-12);
  model.out.bias.mutable_values()[Vocabulary::end] = 60.0;
  EXPECT_LT(caption_loss(model, scene, {1, 2}).item(), 1e-20);

  CaptionModel fresh(tiny(6), random_words(rng, 6, 4), 9);
  auto step = rollout(fresh, scene, {1, 2}).front().logits;
  double mx = *std::max_element(step.values().begin(), step.values().end()), z = 0;
  for (double v : step.values()) z += std::exp(v - mx);
  double hand = -(step[2] - mx - std::log(z));
  EXPECT_NEAR(caption_loss(fresh, scene, {1, 2}).item(), hand, 1e-12);
  EXPECT_THROW(caption_loss(fresh, scene, {4, 2}), ContractError);
}

TEST(GenerateCaption, RiggedLogitsAndDeterminism) {
  std::mt19937_64 rng(10);
  CaptionModel model(tiny(6), random_words(rng, 6, 4), 11);
  auto scene = random_scene(rng, 2, 3, 4);
  auto a = generate_caption(model, scene, 7);
  EXPECT_EQ(a, generate_caption(model, scene, 7));
  fill(model.out.weight, 0.0);
  fill(model.out.bias, 0.0);
  model.out.bias.mutable_values()[Vocabulary::end] = 5.0;
  EXPECT_TRUE(generate_caption(model, scene, 7).empty());
  model.out.bias.mutable_values()[5] = 9.0;
  EXPECT_EQ(generate_caption(model, scene, 3), (std::vector<std::size_t>{5, 5, 5}));
  fill(model.out.bias, 0.0);  // all tied: lowest index wins
  EXPECT_EQ(generate_caption(model, scene, 2), (std::vector<std::size_t>{0, 0}));
}

TEST(CaptionModel, AttentionNormalizedAtEveryStep) {
  std::mt19937_64 rng(12);
  CaptionModel model(tiny(6), random_words(rng, 6, 4), 13);
  for (int trial = 0; trial < 50; ++trial) {
    auto scene = random_scene(rng, 1 + rng() % 5, 3, 4);
    std::vector<std::size_t> ref{1};
    for (std::size_t t = 0, n = 1 + rng() % 4; t < n; ++t) ref.push_back(4 + rng() % 2);
    ref.push_back(2);
    for (const auto& s : rollout(model, scene, ref)) {
      for (const Tensor* w : {&s.attention.alpha, &s.attention.beta}) {
        double sum = 0;
        for (double v : w->values()) {
          EXPECT_GE(v, 0.0);
          sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
    }
  }
}

TEST(CaptionModel, GradientCheck) {
  for (bool use_lat : {false, true}) {
    std::mt19937_64 rng(14);
    CaptionModel model(tiny(6, use_lat), random_words(rng, 6, 4), 15);
    for (auto& e : model.parameters().entries())
      for (auto& x : e.tensor.mutable_values())
        if (x == 0.0) x = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    auto scene = random_scene(rng, 2, 3, 4);
    auto r = finite_diff_check([&] { return caption_loss(model, scene, {1, 4, 5, 4, 2}); },
                               model.parameters().trainable());
    EXPECT_LT(r.max_relative_error, 1e-4) << "lat=" << use_lat;
  }
}

TEST(CaptionModel, ZeroedLatBranchIsVisualOnlyDecoder) {
  std::mt19937_64 rng(16);
  auto words = random_words(rng, 6, 4);
  CaptionModel lat(tiny(6, true), words, 17);
  CaptionModel base(tiny(6, false), words, 17);
  lat.zero_lat_parameters();
  auto scene = random_scene(rng, 3, 3, 4);
  std::vector<std::size_t> ref{1, 4, 5, 5, 2};
  auto a = rollout(lat, scene, ref), b = rollout(base, scene, ref);
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(a[t].logits[i], b[t].logits[i]);
}

TEST(CaptionModel, OverfitsOneCaption) {
  std::mt19937_64 rng(18);
  CaptionModel model(tiny(9), random_words(rng, 9, 4), 19);
  auto scene = random_scene(rng, 3, 3, 4);
  std::vector<std::size_t> ref{1, 4, 5, 6, 7, 8, 2};
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  Adam opt(model.parameters().trainable(), cfg);
  double loss = 0;
  for (int step = 0; step < 500; ++step) {
    auto l = caption_loss(model, scene, ref);
    loss = l.item();
    backward(l);
    opt.step();
  }
  EXPECT_LT(loss, 0.1);
  EXPECT_EQ(generate_caption(model, scene, 10), (std::vector<std::size_t>{4, 5, 6, 7, 8}));
}
