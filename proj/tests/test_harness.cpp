#include <gtest/gtest.h>

#include <sstream>

#include "lat/harness.hpp"

using namespace lat;
using namespace lat::harness;

namespace {

Config tiny_config() {
  Config c;
  c.set("world.train_scenes", "80");
  c.set("world.val_scenes", "20");
  c.set("world.test_seen_scenes", "20");
  c.set("world.test_synonym_scenes", "20");
  c.set("model.d", "8");
  c.set("model.k", "3");
  c.set("vqa.hidden", "8");
  c.set("vqa.joint", "8");
  c.set("caption.d_e", "8");
  c.set("caption.hidden_o", "8");
  c.set("caption.d", "8");
  c.set("train.epochs", "2");
  return c;
}

}  // namespace

TEST(Config, DefaultsAndParsing) {
  Config c;
  EXPECT_EQ(c.get_size("train.epochs"), 30u);
  EXPECT_EQ(c.get("model"), "counting");
  std::istringstream in("# comment\n\ntrain.epochs = 3\nmodel=ban\n");
  auto p = Config::parse(in);
  EXPECT_EQ(p.get_size("train.epochs"), 3u);
  EXPECT_EQ(p.get("model"), "ban");
  EXPECT_NE(p.fingerprint(), c.fingerprint());
  EXPECT_EQ(c.fingerprint().size(), 16u);
}

TEST(Config, BadInputIsParseError) {
  Config c;
  EXPECT_THROW(c.set("no.such.key", "1"), ParseError);
  EXPECT_THROW(c.set("model", "resnet"), ParseError);
  EXPECT_THROW(c.set("train.epochs", "-1"), ParseError);
  EXPECT_THROW(c.set("model.use_L", "maybe"), ParseError);
  EXPECT_THROW(c.set("ablate.variants", "full,bogus"), ParseError);
  std::istringstream in("train.epochs\n");
  EXPECT_THROW(Config::parse(in), ParseError);
}

TEST(Config, CanonicalCoversEveryKey) {
  Config c;
  std::istringstream in(c.canonical());
  auto back = Config::parse(in);
  EXPECT_EQ(back.canonical(), c.canonical());
}

TEST(Harness, MetricsCsvHeader) {
  std::ostringstream out;
  write_metrics_csv(out, {{1, "val", 0.5, 0.25, 1.0, "abc"}});
  EXPECT_EQ(out.str(), "epoch,split,rmse,loss,seconds,fingerprint\n1,val,0.5,0.25,1.000,abc\n");
}

TEST(Harness, DatasetDirectoryRoundTrip) {
  auto cfg = tiny_config();
  auto ds = dataset_from_world(world::generate_world(cfg.world_spec()));
  auto dir = std::filesystem::temp_directory_path() / "lat_test_dataset";
  std::filesystem::remove_all(dir);
  write_dataset_dir(ds, dir);
  auto back = load_dataset_dir(dir);
  EXPECT_EQ(back.records.size(), ds.records.size());
  EXPECT_EQ(back.split("test").size(), 40u);
  EXPECT_EQ(back.embeddings.size(), ds.embeddings.size());
  std::filesystem::remove_all(dir);
}

TEST(Harness, CountingTrainingIsDeterministic) {
  auto cfg = tiny_config();
  auto ds = dataset_from_world(world::generate_world(cfg.world_spec()));
  auto data = prepare(ds, cfg.get_size("model.max_question_len"));
  auto a = train_counting(data, cfg);
  auto b = train_counting(data, cfg);
  ASSERT_EQ(a.outcome.metrics.size(), 2u + 3u * 2u);
  for (std::size_t i = 0; i < a.outcome.metrics.size(); ++i) {
    EXPECT_EQ(a.outcome.metrics[i].rmse, b.outcome.metrics[i].rmse);
    EXPECT_EQ(a.outcome.metrics[i].loss, b.outcome.metrics[i].loss);
  }
  auto ea = evaluate_counting(a.model, data, data.split("test"));
  auto eb = evaluate_counting(b.model, data, data.split("test"));
  EXPECT_EQ(ea.raw_rmse, eb.raw_rmse);
}

TEST(Harness, EveryModelKindTrains) {
  auto cfg = tiny_config();
  cfg.set("train.epochs", "1");
  auto ds = dataset_from_world(world::generate_world(cfg.world_spec()));
  auto data = prepare(ds, cfg.get_size("model.max_question_len"));
  for (const char* kind : {"updn", "murel", "ban"}) {
    cfg.set("model", kind);
    auto run = train_vqa(data, cfg);
    auto ev = evaluate_vqa(run.model, data, data.split("test-seen"));
    EXPECT_TRUE(std::isfinite(ev.rmse)) << kind;
  }
  auto cd = caption_data(ds);
  auto run = train_caption(data, cd, ds, cfg);
  auto ev = evaluate_caption(run.model, data, cd, data.split("val"), 12);
  EXPECT_GE(ev.rmse, 0.0);
  EXPECT_LE(ev.rmse, 1.0);
}

TEST(Harness, AblationVariantsDifferOnlyInTheirFlag) {
  Config c;
  EXPECT_FALSE(variant_config(c, "no_L").get_bool("model.use_L"));
  EXPECT_EQ(variant_config(c, "linear_regression").get("model.regressor"), "linear");
  EXPECT_EQ(variant_config(c, "full").canonical(), c.canonical());
  EXPECT_THROW(variant_config(c, "nope"), ContractError);
}

TEST(Harness, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = tiny_config();
  cfg.set("train.learning_rate", "0");
  cfg.set("train.epochs", "1");
  cfg.set("train.init_bias_to_mean", "false");
  auto ds = dataset_from_world(world::generate_world(cfg.world_spec()));
  auto data = prepare(ds, cfg.get_size("model.max_question_len"));
  counting::CountingModel fresh(counting_config(cfg, data), derived_seed(cfg, 0x1a7));
  auto run = train_counting(data, cfg);
  for (const auto& e : fresh.parameters().entries()) {
    if (!e.trainable) continue;  // BN running statistics do move
    auto a = e.tensor.values();
    auto b = run.model.parameters().get(e.name).values();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << e.name;
  }
}

TEST(Harness, RmseOfPerfectAndMeanPredictors) {
  EXPECT_EQ(rmse_of({0, 3, 6}, {0, 3, 6}), 0.0);
  std::vector<std::size_t> t = {0, 1, 2, 3, 4, 5, 6};
  std::vector<double> mean(t.size(), 3.0);
  EXPECT_DOUBLE_EQ(rmse_of(mean, t), world::mean_predictor_rmse(t));
  EXPECT_DOUBLE_EQ(rmse_of(mean, t), 2.0);
}
