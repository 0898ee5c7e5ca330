#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lat/embedding.hpp"
#include "lat/features.hpp"

// Synthetic counting world: base classes with synonyms, an embedding table
// with controlled geometry, and scenes whose targets come from count_oracle.
// Detected objects always carry the base label; questions on the
// test-synonym split name the class by a synonym only.
namespace lat::world {

struct ClassEntry {
  std::string base;
  std::vector<std::string> synonyms;
};

/// Shipped word list. The first `classes` entries are used.
inline const std::vector<ClassEntry>& builtin_taxonomy() {
  static const std::vector<ClassEntry> list = {
      {"car", {"sedan", "automobile"}},    {"dog", {"puppy", "hound"}},
      {"cat", {"kitten", "feline"}},       {"person", {"human", "individual"}},
      {"bicycle", {"bike", "cycle"}},      {"bird", {"sparrow", "fowl"}},
      {"horse", {"pony", "stallion"}},     {"boat", {"ship", "vessel"}},
      {"tree", {"oak", "sapling"}},        {"chair", {"seat", "stool"}},
      {"bottle", {"flask", "jar"}},        {"cup", {"mug", "tumbler"}},
      {"airplane", {"plane", "aircraft"}}, {"bus", {"coach", "minibus"}},
      {"truck", {"lorry", "pickup"}},      {"sheep", {"lamb", "ewe"}},
      {"cow", {"cattle", "calf"}},         {"umbrella", {"parasol", "brolly"}},
      {"clock", {"timepiece", "chronometer"}}, {"couch", {"sofa", "settee"}},
  };
  return list;
}

/// Question templates; "<noun>" is replaced by the query word.
inline const std::vector<std::vector<std::string>>& question_templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"how", "many", "<noun>", "are", "in", "the", "picture"},
      {"how", "many", "<noun>", "are", "there"},
      {"count", "the", "<noun>", "in", "the", "image"},
      {"what", "is", "the", "number", "of", "<noun>"},
  };
  return t;
}

/// Function words of templates and captions, in first-seen order.
inline std::vector<std::string> function_words() {
  std::vector<std::string> out;
  auto add = [&](const std::string& w) {
    if (w != "<noun>" && std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
  };
  for (const auto& t : question_templates())
    for (const auto& w : t) add(w);
  for (const char* w : {"a", "with"}) add(w);
  return out;
}

struct WorldSpec {
  std::uint64_t seed = 7;
  std::size_t classes = 12;
  std::size_t synonyms = 2;  // per class
  std::size_t d_w = 32;
  std::size_t d_v = 32;
  std::size_t train_scenes = 5000;
  std::size_t val_scenes = 500;
  std::size_t test_seen_scenes = 1000;
  std::size_t test_synonym_scenes = 1000;
  std::size_t max_count = 6;        // queried-class count uniform on [0, max_count]
  std::size_t min_distractors = 1;  // objects of other classes
  std::size_t max_distractors = 6;
  double noise_sigma = 0.1;
  double synonym_cosine = 0.92;
  double cross_cosine_max = 0.3;
  double image_width = 640;
  double image_height = 480;

  void validate() const {
    const auto& tax = builtin_taxonomy();
    if (classes < 2 || classes > tax.size()) {
      throw ContractError("world: classes must lie in [2, " + std::to_string(tax.size()) + "]");
    }
    if (synonyms == 0 || synonyms > 2) throw ContractError("world: synonyms per class must be 1 or 2");
    if (train_scenes == 0 || val_scenes == 0 || test_seen_scenes == 0 || test_synonym_scenes == 0) {
      throw ContractError("world: every split needs at least one scene");
    }
    if (min_distractors > max_distractors) throw ContractError("world: min_distractors exceeds max_distractors");
    if (max_count + max_distractors == 0) throw ContractError("world: scenes would be empty");
    if (!(synonym_cosine > 0 && synonym_cosine < 1)) throw ContractError("world: synonym_cosine must lie in (0, 1)");
    if (d_v == 0 || d_w == 0) throw ContractError("world: feature widths must be positive");
    if (!(noise_sigma >= 0)) throw ContractError("world: noise_sigma must be nonnegative");
    if (!(image_width > 64) || !(image_height > 64)) throw ContractError("world: image must exceed 64x64");
  }
};

inline const char* split_names[4] = {"train", "val", "test-seen", "test-synonym"};

struct Taxonomy {
  std::vector<ClassEntry> classes;
  std::map<std::string, std::size_t> word_to_class;  // base and synonym words

  /// Base class index of a word, or -1.
  long resolve(const std::string& word) const {
    auto it = word_to_class.find(case_fold(word));
    return it == word_to_class.end() ? -1 : static_cast<long>(it->second);
  }

  static Taxonomy from_spec(const WorldSpec& spec) {
    Taxonomy t;
    const auto& all = builtin_taxonomy();
    for (std::size_t c = 0; c < spec.classes; ++c) {
      ClassEntry e{all[c].base, {all[c].synonyms.begin(), all[c].synonyms.begin() + spec.synonyms}};
      t.word_to_class[e.base] = c;
      for (const auto& s : e.synonyms) {
        if (t.word_to_class.count(s)) throw ContractError("world: synonym '" + s + "' shared by two classes");
        t.word_to_class[s] = c;
      }
      t.classes.push_back(std::move(e));
    }
    return t;
  }

  /// "base syn1 syn2" per line.
  void save(std::ostream& out) const {
    for (const auto& c : classes) {
      out << c.base;
      for (const auto& s : c.synonyms) out << ' ' << s;
      out << '\n';
    }
  }

  static Taxonomy load(std::istream& in) {
    Taxonomy t;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      auto words = split_spaces(line);
      if (words.empty()) continue;
      ClassEntry e{words[0], {words.begin() + 1, words.end()}};
      for (const auto& w : words) {
        if (t.word_to_class.count(w)) throw ParseError("taxonomy line " + std::to_string(n) + ": '" + w + "' repeated");
        t.word_to_class[w] = t.classes.size();
      }
      t.classes.push_back(std::move(e));
    }
    return t;
  }
};

/// Objects of the query word's base class; 0 for unresolvable words.
inline std::size_t count_oracle(std::span<const DetectedObject> objects, const std::string& query,
                                const Taxonomy& taxonomy) {
  long c = taxonomy.resolve(query);
  if (c < 0) return 0;
  std::size_t n = 0;
  for (const auto& o : objects)
    if (taxonomy.resolve(o.label) == c) ++n;
  return n;
}

struct SampleRecord {
  std::string scene_id;
  std::vector<DetectedObject> objects;
  std::vector<std::string> question;
  std::string query;  // the noun in the question
  std::size_t answer = 0;
  std::string split;
  std::vector<std::string> caption;
  double image_width = 0, image_height = 0;
};

inline nlohmann::json to_json(const SampleRecord& r) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : r.objects) {
    objs.push_back({{"label", o.label},
                    {"box", {o.box.x, o.box.y, o.box.width, o.box.height}},
                    {"confidence", o.confidence},
                    {"visual", o.visual}});
  }
  return {{"scene_id", r.scene_id},   {"objects", objs},       {"question", r.question},
          {"answer", r.answer},       {"split", r.split},      {"query", r.query},
          {"caption", r.caption},     {"image_size", {r.image_width, r.image_height}}};
}

inline SampleRecord from_json(const nlohmann::json& j) {
  SampleRecord r;
  try {
    r.scene_id = j.at("scene_id").get<std::string>();
    for (const auto& o : j.at("objects")) {
      DetectedObject d;
      d.label = o.at("label").get<std::string>();
      auto box = o.at("box").get<std::vector<double>>();
      if (box.size() != 4) throw ParseError("box must have 4 entries");
      d.box = {box[0], box[1], box[2], box[3]};
      d.confidence = o.at("confidence").get<double>();
      d.visual = o.at("visual").get<std::vector<double>>();
      r.objects.push_back(std::move(d));
    }
    r.question = j.at("question").get<std::vector<std::string>>();
    r.answer = j.at("answer").get<std::size_t>();
    r.split = j.at("split").get<std::string>();
    r.query = j.value("query", std::string());
    r.caption = j.value("caption", std::vector<std::string>());
    auto size = j.value("image_size", std::vector<double>{});
    if (size.size() == 2) {
      r.image_width = size[0];
      r.image_height = size[1];
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset record: ") + e.what());
  }
  return r;
}

/// splitmix64 step; derives independent per-scene seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

struct World {
  WorldSpec spec;
  Taxonomy taxonomy;
  EmbeddingTable embeddings;
  std::vector<std::vector<double>> prototypes;  // per class, d_v
  std::vector<SampleRecord> records;
};

namespace internal {

inline std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline void normalize(std::vector<double>& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n < 1e-12) throw DegenerateInputError("world: degenerate random direction");
  for (auto& x : v) x /= n;
}

/// Removes the components along each (unit) basis vector.
inline void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    double p = 0;
    for (std::size_t i = 0; i < v.size(); ++i) p += v[i] * b[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
  }
}

}  // namespace internal

/// Base-class and function words get mutually orthonormal vectors; each
/// synonym is normalize(c b + sqrt(1 - c^2) u) for a unit u orthogonal to
/// its base vector b. Both cosine rules are verified afterward.
inline EmbeddingTable generate_embeddings(const WorldSpec& spec, const Taxonomy& tax, std::mt19937_64& rng) {
  auto fw = function_words();
  std::size_t needed = tax.classes.size() + fw.size();
  if (needed > spec.d_w) {
    throw ContractError("world: geometry unsatisfiable, " + std::to_string(needed) +
                        " orthogonal words need d_w >= " + std::to_string(needed) + ", got " +
                        std::to_string(spec.d_w));
  }
  std::vector<std::vector<double>> basis;
  for (std::size_t i = 0; i < needed; ++i) {
    auto v = internal::gaussian(rng, spec.d_w);
    internal::orthogonalize(v, basis);
    internal::normalize(v);
    basis.push_back(std::move(v));
  }
  EmbeddingTable table(spec.d_w);
  for (std::size_t c = 0; c < tax.classes.size(); ++c) table.insert(tax.classes[c].base, basis[c]);
  for (std::size_t w = 0; w < fw.size(); ++w) table.insert(fw[w], basis[tax.classes.size() + w]);

  double c = spec.synonym_cosine, s = std::sqrt(1 - c * c);
  for (std::size_t k = 0; k < tax.classes.size(); ++k) {
    const auto& b = basis[k];
    for (const auto& syn : tax.classes[k].synonyms) {
      auto u = internal::gaussian(rng, spec.d_w);
      internal::orthogonalize(u, {b});
      internal::normalize(u);
      std::vector<double> v(spec.d_w);
      for (std::size_t i = 0; i < spec.d_w; ++i) v[i] = c * b[i] + s * u[i];
      internal::normalize(v);
      table.insert(syn, std::move(v));
    }
  }

  // Post-hoc geometry check over every pair of class words.
  std::vector<std::pair<std::string, std::size_t>> words;
  for (std::size_t k = 0; k < tax.classes.size(); ++k) {
    words.push_back({tax.classes[k].base, k});
    for (const auto& syn : tax.classes[k].synonyms) words.push_back({syn, k});
  }
  for (std::size_t a = 0; a < words.size(); ++a) {
    for (std::size_t b = a + 1; b < words.size(); ++b) {
      double cs = cosine(table.lookup(words[a].first).vector, table.lookup(words[b].first).vector);
      bool same = words[a].second == words[b].second;
      bool is_base_pair = same && (words[a].first == tax.classes[words[a].second].base);
      if (is_base_pair && cs < 0.9 - 1e-12) {
        throw ContractError("world: synonym cosine " + std::to_string(cs) + " below 0.9 for " + words[a].first +
                            "/" + words[b].first);
      }
      if (!same && cs > spec.cross_cosine_max) {
        throw ContractError("world: cross-class cosine " + std::to_string(cs) + " above limit for " +
                            words[a].first + "/" + words[b].first);
      }
    }
  }
  return table;
}

inline SampleRecord generate_scene(const World& w, std::size_t split, std::size_t index) {
  const auto& spec = w.spec;
  std::mt19937_64 rng(mix_seed(mix_seed(spec.seed ^ 0x5ce0e5ULL) + split * 0x100000000ULL + index));
  std::size_t nc = w.taxonomy.classes.size();
  std::size_t target = std::uniform_int_distribution<std::size_t>(0, nc - 1)(rng);
  std::size_t count = std::uniform_int_distribution<std::size_t>(0, spec.max_count)(rng);
  std::size_t min_d = std::max<std::size_t>(spec.min_distractors, count == 0 ? 1 : 0);
  std::size_t distractors = std::uniform_int_distribution<std::size_t>(min_d, std::max(min_d, spec.max_distractors))(rng);

  std::vector<std::size_t> classes(count, target);
  for (std::size_t i = 0; i < distractors; ++i) {
    std::size_t c = std::uniform_int_distribution<std::size_t>(0, nc - 2)(rng);
    classes.push_back(c >= target ? c + 1 : c);
  }
  std::shuffle(classes.begin(), classes.end(), rng);

  SampleRecord r;
  r.scene_id = std::string(split_names[split]) + "-" + std::to_string(index);
  r.split = split_names[split];
  r.image_width = spec.image_width;
  r.image_height = spec.image_height;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t c : classes) {
    DetectedObject o;
    o.label = w.taxonomy.classes[c].base;
    double bw = 32 + u01(rng) * (spec.image_width / 3 - 32);
    double bh = 32 + u01(rng) * (spec.image_height / 3 - 32);
    o.box = {u01(rng) * (spec.image_width - bw), u01(rng) * (spec.image_height - bh), bw, bh};
    o.confidence = 0.7 + 0.3 * u01(rng);
    o.visual = w.prototypes[c];
    for (auto& x : o.visual) x += noise(rng);
    r.objects.push_back(std::move(o));
  }

  const auto& entry = w.taxonomy.classes[target];
  if (split == 3) {
    r.query = entry.synonyms[std::uniform_int_distribution<std::size_t>(0, entry.synonyms.size() - 1)(rng)];
  } else {
    r.query = entry.base;
  }
  const auto& templ = question_templates()[std::uniform_int_distribution<std::size_t>(0, question_templates().size() - 1)(rng)];
  for (const auto& t : templ) r.question.push_back(t == "<noun>" ? r.query : t);
  r.answer = count_oracle(r.objects, r.query, w.taxonomy);

  r.caption = {"a", "picture", "with"};
  for (std::size_t c : classes) {
    const auto& label = w.taxonomy.classes[c].base;
    if (std::find(r.caption.begin() + 3, r.caption.end(), label) == r.caption.end()) r.caption.push_back(label);
  }
  return r;
}

/// Deterministic in spec (including seed).
inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  World w;
  w.spec = spec;
  w.taxonomy = Taxonomy::from_spec(spec);
  std::mt19937_64 rng(mix_seed(spec.seed));
  w.embeddings = generate_embeddings(spec, w.taxonomy, rng);
  for (std::size_t c = 0; c < spec.classes; ++c) w.prototypes.push_back(internal::gaussian(rng, spec.d_v));
  std::size_t counts[4] = {spec.train_scenes, spec.val_scenes, spec.test_seen_scenes, spec.test_synonym_scenes};
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t i = 0; i < counts[s]; ++i) w.records.push_back(generate_scene(w, s, i));
  return w;
}

inline void write_dataset(std::ostream& out, const std::vector<SampleRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

/// Parses JSONL and rechecks every answer against count_oracle.
inline std::vector<SampleRecord> read_dataset(std::istream& in, const Taxonomy& taxonomy) {
  std::vector<SampleRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("dataset line " + std::to_string(n) + ": " + e.what());
    }
    auto r = from_json(j);
    if (r.objects.empty()) throw ParseError("dataset line " + std::to_string(n) + ": scene without objects");
    std::string query = r.query;
    if (query.empty()) {
      for (const auto& t : r.question)
        if (taxonomy.resolve(t) >= 0) query = t;
      r.query = query;
    }
    std::size_t oracle = count_oracle(r.objects, query, taxonomy);
    if (oracle != r.answer) {
      throw ContractError("dataset line " + std::to_string(n) + ": answer " + std::to_string(r.answer) +
                          " differs from count_oracle " + std::to_string(oracle));
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Population std of the answers: the RMSE of predicting their mean.
inline double mean_predictor_rmse(const std::vector<std::size_t>& answers) {
  if (answers.empty()) throw DegenerateInputError("mean_predictor_rmse: no answers");
  double mean = 0;
  for (auto a : answers) mean += static_cast<double>(a);
  mean /= static_cast<double>(answers.size());
  double var = 0;
  for (auto a : answers) var += (static_cast<double>(a) - mean) * (static_cast<double>(a) - mean);
  return std::sqrt(var / static_cast<double>(answers.size()));
}

/// sqrt(((n+1)^2 - 1) / 12) for counts uniform on [0, n].
inline double uniform_count_std(std::size_t max_count) {
  double n1 = static_cast<double>(max_count + 1);
  return std::sqrt((n1 * n1 - 1.0) / 12.0);
}

}  // namespace lat::world
