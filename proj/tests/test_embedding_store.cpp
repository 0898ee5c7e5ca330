#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "lat/embedding.hpp"
#include "test_util.hpp"

using namespace lat;

namespace {
EmbeddingTable parse(const std::string& text, std::vector<std::string>* warnings = nullptr) {
  std::istringstream in(text);
  return EmbeddingTable::load(in, std::nullopt, warnings);
}
}  // namespace

TEST(LoadEmbeddings, ThreeRowsOfDimFour) {
  auto t = parse("a 1 2 3 4\nb 0 0 0 1\nc -1.5 2e-3 0 7\n");
  EXPECT_EQ(t.size(), 3u);
  EXPECT_EQ(t.dim(), 4u);
  EXPECT_EQ(t.lookup("c").vector[1], 2e-3);
}

TEST(LoadEmbeddings, ShortRowReportsLine) {
  try {
    parse("a 1 2 3 4\nb 1 2 3\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(LoadEmbeddings, HeaderSkipped) {
  std::string text = "2 300\n";
  for (const char* w : {"x", "y"}) {
    text += w;
    for (int i = 0; i < 300; ++i) text += " 0.5";
    text += "\n";
  }
  auto t = parse(text);
  EXPECT_EQ(t.dim(), 300u);
  EXPECT_EQ(t.size(), 2u);
}

TEST(LoadEmbeddings, NonNumericAndExpectedDim) {
  EXPECT_THROW(parse("a 1 x\n"), ParseError);
  std::istringstream in("a 1 2\n");
  EXPECT_THROW(EmbeddingTable::load(in, 3), ParseError);
}

TEST(LoadEmbeddings, DuplicateKeepsFirstAndWarns) {
  std::vector<std::string> warnings;
  auto t = parse("car 1 0\nCar 0 1\n", &warnings);
  EXPECT_EQ(t.size(), 1u);
  EXPECT_EQ(t.lookup("car").vector[0], 1.0);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Lookup, KnownUnknownAndCaseFolded) {
  auto t = parse("car 1 2\n");
  auto known = t.lookup("car");
  EXPECT_FALSE(known.oov);
  EXPECT_EQ(known.vector[1], 2.0);
  auto unk = t.lookup("zzqx");
  EXPECT_TRUE(unk.oov);
  EXPECT_EQ(unk.vector[0], 0.0);
  EXPECT_EQ(unk.vector[1], 0.0);
  EXPECT_EQ(t.lookup("CAR").vector.data(), known.vector.data());
  EXPECT_THROW(t.lookup(""), ContractError);
}

TEST(EmbedLabel, SingleMultiAndOov) {
  auto t = parse("car 1 2\ntraffic 2 0\nlight 0 4\n");
  auto car = t.embed_label("car");
  EXPECT_EQ(car, (std::vector<double>{1, 2}));
  EXPECT_EQ(t.embed_label("traffic light"), (std::vector<double>{1, 2}));
  EXPECT_EQ(t.embed_label("traffic zzqx"), (std::vector<double>{2, 0}));
  EXPECT_EQ(t.embed_label("zzqx"), (std::vector<double>{0, 0}));
  EXPECT_THROW(t.embed_label(""), ContractError);
}

TEST(EmbedQuestion, PaddingTruncationAndErrors) {
  auto t = parse("how 1 0\nmany 0 1\ncars 1 1\n");
  std::vector<std::string> q3{"how", "many", "cars"};
  auto f = embed_question(t, q3, 14);
  EXPECT_EQ(f.Q.shape(), (Shape{14, 2}));
  EXPECT_EQ(std::count(f.mask.begin(), f.mask.end(), 1), 3);
  for (std::size_t j = 3; j < 14; ++j) {
    EXPECT_EQ(f.Q.at(j, 0), 0.0);
    EXPECT_EQ(f.Q.at(j, 1), 0.0);
  }
  std::vector<std::string> q20(20, "many");
  auto g = embed_question(t, q20, 14);
  EXPECT_EQ(g.length(), 14u);
  EXPECT_EQ(std::count(g.mask.begin(), g.mask.end(), 1), 14);
  std::vector<std::string> empty;
  EXPECT_THROW(embed_question(t, empty, 14), ContractError);
}

TEST(EmbedQuestion, PropertyMaskCount) {
  auto t = parse("a 1\n");
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 1 + rng() % 30, max_len = 1 + rng() % 20;
    std::vector<std::string> toks(n, rng() % 2 ? "a" : "b");
    auto f = embed_question(t, toks, max_len);
    EXPECT_EQ(static_cast<std::size_t>(std::count(f.mask.begin(), f.mask.end(), 1)), std::min(n, max_len));
  }
}

TEST(EmbeddingTable, RoundTripIsExact) {
  std::mt19937_64 rng(9);
  EmbeddingTable t(7);
  for (int i = 0; i < 40; ++i) {
    auto v = lat::testing::random_values(rng, 7, -1e3, 1e3);
    v[0] = std::ldexp(v[0], -900);  // subnormal-adjacent magnitudes survive too
    t.insert("w" + std::to_string(i), v);
  }
  std::ostringstream out;
  t.save(out);
  std::istringstream in(out.str());
  auto back = EmbeddingTable::load(in);
  ASSERT_EQ(back.size(), t.size());
  for (const auto& tok : t.tokens()) {
    auto a = t.lookup(tok).vector, b = back.lookup(tok).vector;
    for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(a[k], b[k]);
  }
}
