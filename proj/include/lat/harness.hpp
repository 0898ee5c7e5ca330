#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lat/caption.hpp"
#include "lat/checkpoint.hpp"
#include "lat/counting.hpp"
#include "lat/optim.hpp"
#include "lat/vqa.hpp"
#include "lat/world.hpp"

// Experiment plumbing: key=value configuration, dataset files, training and
// evaluation drivers for every model kind, and the counting ablation table.
namespace lat::harness {

// ---------------------------------------------------------------------------
// Configuration

struct KeySpec {
  const char* key;
  const char* default_value;
  const char* doc;
};

inline const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"seed", "7", "master seed; world generation, initialization and shuffling derive from it"},
      {"world.classes", "12", "base object classes taken from the shipped taxonomy"},
      {"world.synonyms", "2", "synonyms per class (1 or 2)"},
      {"world.d_w", "32", "word-vector width"},
      {"world.d_v", "32", "visual feature width"},
      {"world.train_scenes", "5000", "scenes in the train split"},
      {"world.val_scenes", "500", "scenes in the validation split"},
      {"world.test_seen_scenes", "1000", "scenes in the test-seen split"},
      {"world.test_synonym_scenes", "1000", "scenes in the test-synonym split"},
      {"world.max_count", "6", "queried-class count is uniform on [0, max_count]"},
      {"world.min_distractors", "1", "fewest objects of other classes per scene"},
      {"world.max_distractors", "6", "most objects of other classes per scene"},
      {"world.noise_sigma", "0.1", "std of the Gaussian noise added to class prototypes"},
      {"world.synonym_cosine", "0.92", "cosine between a synonym and its base word"},
      {"world.cross_cosine_max", "0.3", "largest cosine allowed between words of different classes"},
      {"model", "counting", "model kind: counting, updn, murel, ban or caption"},
      {"model.d", "64", "counting: encoded image/question width (even)"},
      {"model.k", "8", "counting: Tucker rank"},
      {"model.use_L", "true", "counting: label embeddings enter the score matrix"},
      {"model.use_VB", "true", "counting: projected visual+box features enter the score matrix"},
      {"model.use_B", "true", "counting: box features are appended before projection"},
      {"model.coattention", "true", "counting: false gives uniform question-word weights"},
      {"model.regressor", "tucker", "counting: tucker or linear"},
      {"model.embedding", "pretrained", "counting: pretrained, onehot_separate or onehot_shared"},
      {"model.max_question_len", "14", "question tokens kept after truncation"},
      {"vqa.hidden", "32", "vqa: question GRU / fused width"},
      {"vqa.joint", "32", "vqa: BAN joint width"},
      {"vqa.use_lat", "true", "vqa: enable the linguistic branch"},
      {"vqa.pooling", "attention", "vqa: MUREL pooling, attention or max (max requires use_lat=false)"},
      {"caption.d_e", "32", "caption: V-LSTM and L-LSTM hidden width"},
      {"caption.hidden_o", "32", "caption: O-LSTM hidden width"},
      {"caption.d", "32", "caption: attention width"},
      {"caption.use_lat", "true", "caption: enable the L-LSTM and L-attention"},
      {"caption.max_len", "12", "caption: greedy decoding length cap"},
      {"train.epochs", "30", "training epochs"},
      {"train.batch_size", "8", "samples per optimizer step"},
      {"train.learning_rate", "0.0005", "Adam learning rate"},
      {"train.init_bias_to_mean", "true", "counting: start b_r at the mean training count"},
      {"ablate.variants", "full,no_coattention,no_L,no_VB,no_B,linear_regression,onehot_separate,onehot_shared",
       "comma-separated counting variants trained by 'ablate'"},
  };
  return keys;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_keys()) values_[k.key] = k.default_value;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ParseError("config: unknown key '" + key + "'");
    it->second = value;
    validate_key(key);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ContractError("config: unknown key '" + key + "'");
    return it->second;
  }

  std::size_t get_size(const std::string& key) const {
    const auto& v = get(key);
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ParseError("config: " + key + " must be a nonnegative integer");
    return out;
  }

  double get_double(const std::string& key) const {
    auto d = parse_double(get(key));
    if (!d || !std::isfinite(*d)) throw ParseError("config: " + key + " must be a finite number");
    return *d;
  }

  bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ParseError("config: " + key + " must be true or false");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  }

  /// key=value lines; blank lines and lines starting with '#' are ignored.
  static Config parse(std::istream& in) {
    Config c;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("config line " + std::to_string(n) + ": expected key=value");
      auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ParseError& e) {
        throw ParseError("config line " + std::to_string(n) + ": " + e.what());
      }
    }
    return c;
  }

  static Config load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("config: cannot open " + path.string());
    return parse(in);
  }

  /// Every key in registry order, one key=value per line.
  std::string canonical() const {
    std::string out;
    for (const auto& k : config_keys()) out += std::string(k.key) + "=" + values_.at(k.key) + "\n";
    return out;
  }

  /// FNV-1a (64 bit) of canonical(), as 16 hex digits.
  std::string fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
  }

  world::WorldSpec world_spec() const {
    world::WorldSpec w;
    w.seed = get_size("seed");
    w.classes = get_size("world.classes");
    w.synonyms = get_size("world.synonyms");
    w.d_w = get_size("world.d_w");
    w.d_v = get_size("world.d_v");
    w.train_scenes = get_size("world.train_scenes");
    w.val_scenes = get_size("world.val_scenes");
    w.test_seen_scenes = get_size("world.test_seen_scenes");
    w.test_synonym_scenes = get_size("world.test_synonym_scenes");
    w.max_count = get_size("world.max_count");
    w.min_distractors = get_size("world.min_distractors");
    w.max_distractors = get_size("world.max_distractors");
    w.noise_sigma = get_double("world.noise_sigma");
    w.synonym_cosine = get_double("world.synonym_cosine");
    w.cross_cosine_max = get_double("world.cross_cosine_max");
    return w;
  }

 private:
  void validate_key(const std::string& key) const {
    const auto& v = values_.at(key);
    auto one_of = [&](std::initializer_list<const char*> opts) {
      for (const char* o : opts)
        if (v == o) return;
      throw ParseError("config: invalid value '" + v + "' for " + key);
    };
    if (key == "model") one_of({"counting", "updn", "murel", "ban", "caption"});
    else if (key == "model.regressor") one_of({"tucker", "linear"});
    else if (key == "model.embedding") one_of({"pretrained", "onehot_separate", "onehot_shared"});
    else if (key == "vqa.pooling") one_of({"attention", "max"});
    else if (key.find("use_") != std::string::npos || key == "model.coattention" || key == "train.init_bias_to_mean")
      get_bool(key);
    else if (key == "ablate.variants") {
      for (const auto& item : get_list(key)) {
        static const std::vector<std::string> known = {"full", "no_coattention", "no_L", "no_VB", "no_B",
                                                       "linear_regression", "onehot_separate", "onehot_shared"};
        if (std::find(known.begin(), known.end(), item) == known.end()) {
          throw ParseError("config: unknown ablation variant '" + item + "'");
        }
      }
    } else if (key == "world.noise_sigma" || key == "world.synonym_cosine" || key == "world.cross_cosine_max" ||
               key == "train.learning_rate") {
      if (get_double(key) < 0) throw ParseError("config: " + key + " must be nonnegative");
    } else {
      get_size(key);
    }
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr const char* kEmbeddingFile = "embeddings.txt";
inline constexpr const char* kTaxonomyFile = "taxonomy.txt";
inline constexpr const char* kDatasetFile = "dataset.jsonl";
inline constexpr const char* kCaptionVocabFile = "caption_vocab.txt";

struct Dataset {
  world::Taxonomy taxonomy;
  EmbeddingTable embeddings;
  std::vector<world::SampleRecord> records;

  std::vector<std::size_t> split(const std::string& name) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == name || (name == "test" && records[i].split.rfind("test-", 0) == 0)) idx.push_back(i);
    return idx;
  }

  std::size_t d_v() const {
    if (records.empty() || records[0].objects.empty()) throw DegenerateInputError("dataset is empty");
    return records[0].objects[0].visual.size();
  }
};

inline Dataset dataset_from_world(const world::World& w) {
  return {w.taxonomy, w.embeddings, w.records};
}

inline caption::Vocabulary caption_vocabulary(const Dataset& ds) {
  std::vector<std::vector<std::string>> corpus;
  for (auto i : ds.split("train")) corpus.push_back(ds.records[i].caption);
  return caption::Vocabulary::build(corpus);
}

inline void write_dataset_dir(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw ContractError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open(kEmbeddingFile);
    ds.embeddings.save(f);
  }
  {
    auto f = open(kTaxonomyFile);
    ds.taxonomy.save(f);
  }
  {
    auto f = open(kDatasetFile);
    world::write_dataset(f, ds.records);
  }
  {
    auto f = open(kCaptionVocabFile);
    caption_vocabulary(ds).save(f);
  }
}

inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  auto open = [&](const char* name) {
    std::ifstream f(dir / name, std::ios::binary);
    if (!f) throw ParseError("cannot open " + (dir / name).string());
    return f;
  };
  Dataset ds;
  {
    auto f = open(kTaxonomyFile);
    ds.taxonomy = world::Taxonomy::load(f);
  }
  {
    auto f = open(kEmbeddingFile);
    ds.embeddings = EmbeddingTable::load(f);
  }
  {
    auto f = open(kDatasetFile);
    ds.records = world::read_dataset(f, ds.taxonomy);
  }
  if (ds.records.empty()) throw ParseError("dataset: no records in " + (dir / kDatasetFile).string());
  return ds;
}

// ---------------------------------------------------------------------------
// Prepared features

struct PreparedSample {
  SceneFeatures scene;
  QuestionFeatures question;
  std::vector<std::size_t> label_ids;
  std::vector<std::size_t> token_ids;
  std::size_t answer = 0;
};

/// Features for every record. One-hot ids index the embedding table's tokens
/// with one extra trailing slot for unknown words.
struct Prepared {
  std::vector<PreparedSample> samples;
  std::map<std::string, std::vector<std::size_t>> splits;
  std::size_t onehot_vocab = 0;
  std::size_t d_v = 0, d_w = 0;
  std::size_t max_count = 0;

  const std::vector<std::size_t>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end() || it->second.empty()) throw ContractError("dataset has no '" + name + "' split");
    return it->second;
  }
};

inline Prepared prepare(const Dataset& ds, std::size_t max_question_len) {
  Prepared p;
  p.d_v = ds.d_v();
  p.d_w = ds.embeddings.dim();
  std::map<std::string, std::size_t> ids;
  for (const auto& t : ds.embeddings.tokens()) ids.emplace(t, ids.size());
  std::size_t unk = ids.size();
  p.onehot_vocab = unk + 1;
  auto id_of = [&](const std::string& w) {
    auto it = ids.find(case_fold(w));
    return it == ids.end() ? unk : it->second;
  };
  for (const auto& r : ds.records) {
    PreparedSample s;
    double W = r.image_width > 0 ? r.image_width : 1, H = r.image_height > 0 ? r.image_height : 1;
    s.scene = build_scene_features(r.objects, ds.embeddings, W, H);
    s.question = embed_question(ds.embeddings, r.question, max_question_len);
    for (const auto& o : r.objects) s.label_ids.push_back(id_of(o.label));
    for (const auto& t : s.question.tokens) s.token_ids.push_back(id_of(t));
    s.answer = r.answer;
    p.max_count = std::max(p.max_count, r.answer);
    p.samples.push_back(std::move(s));
  }
  for (const char* name : {"train", "val", "test-seen", "test-synonym", "test"}) p.splits[name] = ds.split(name);
  return p;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double rmse = 0;
  double loss = 0;
  double seconds = 0;
  std::string fingerprint;
};

inline std::string fixed_str(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

inline void write_metrics_header(std::ostream& out) { out << "epoch,split,rmse,loss,seconds,fingerprint\n"; }

inline void write_metrics_row(std::ostream& out, const MetricsRow& r) {
  out << r.epoch << ',' << r.split << ',' << format_double(r.rmse) << ',' << format_double(r.loss) << ','
      << fixed_str(r.seconds, 3) << ',' << r.fingerprint << '\n';
}

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  write_metrics_header(out);
  for (const auto& r : rows) write_metrics_row(out, r);
}

/// rmse: the headline metric of the split (rounded counts for counting,
/// predicted answer class for VQA, caption mismatch rate for captioning).
/// selection: what best-by-validation minimizes.
struct EvalResult {
  double rmse = 0;
  double raw_rmse = 0;
  double loss = 0;
  double selection = 0;
  std::size_t n = 0;
};

inline double rmse_of(const std::vector<double>& pred, const std::vector<std::size_t>& target) {
  if (pred.empty()) throw DegenerateInputError("rmse of an empty split");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double e = pred[i] - static_cast<double>(target[i]);
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

// ---------------------------------------------------------------------------
// Generic training loop

/// Hooks a model kind provides to the shared loop.
struct Task {
  std::string kind;
  ParameterSet* params = nullptr;
  /// Training-mode loss averaged over the batch; adds the batch's squared
  /// count errors (rounded, from this forward) to *sq_err.
  std::function<Tensor(std::span<const std::size_t>, double* sq_err)> batch_loss;
  std::function<EvalResult(const std::vector<std::size_t>&)> evaluate;
  std::function<bool(std::span<const std::size_t>)> batch_ok = [](std::span<const std::size_t>) { return true; };
};

struct TrainOutcome {
  std::vector<MetricsRow> metrics;
  std::size_t best_epoch = 0;
  double best_selection = 0;
};

inline std::uint64_t derived_seed(const Config& c, std::uint64_t salt) {
  return world::mix_seed(c.get_size("seed") * 0x2545f4914f6cdd1dULL + salt);
}

/// Adam over shuffled minibatches; after every epoch evaluates val and keeps
/// the parameters with the lowest selection value, restored at the end.
inline TrainOutcome run_training(Task& task, const Prepared& data, const Config& cfg, std::ostream* log) {
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };
  std::size_t epochs = cfg.get_size("train.epochs");
  std::size_t bs = cfg.get_size("train.batch_size");
  if (bs == 0) throw ContractError("train.batch_size must be positive");
  AdamConfig ac;
  ac.learning_rate = cfg.get_double("train.learning_rate");
  Adam opt(task.params->trainable(), ac);
  std::mt19937_64 shuffle_rng(derived_seed(cfg, 0x5f1ffe));
  auto train = data.split("train");
  const auto& val = data.split("val");
  std::string fp = cfg.fingerprint();

  TrainOutcome out;
  auto snapshot = checkpoint::capture(task.kind, *task.params);
  {
    auto ev = task.evaluate(val);
    out.best_selection = ev.selection;
    out.metrics.push_back({0, "val", ev.rmse, ev.loss, seconds(), fp});
    out.metrics.push_back({0, "val:raw", ev.raw_rmse, ev.loss, seconds(), fp});
  }
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), shuffle_rng);
    double loss_sum = 0, sq_err = 0;
    std::size_t seen = 0, batches = 0;
    for (std::size_t b = 0; b < train.size(); b += bs) {
      std::span<const std::size_t> batch(train.data() + b, std::min(bs, train.size() - b));
      if (!task.batch_ok(batch)) continue;
      Tensor loss = task.batch_loss(batch, &sq_err);
      loss_sum += loss.item() * static_cast<double>(batch.size());
      seen += batch.size();
      ++batches;
      backward(loss);
      opt.step();
    }
    if (seen == 0) throw DegenerateInputError("training: no usable batch");
    out.metrics.push_back({epoch, "train", std::sqrt(sq_err / static_cast<double>(seen)),
                           loss_sum / static_cast<double>(seen), seconds(), fp});
    auto ev = task.evaluate(val);
    out.metrics.push_back({epoch, "val", ev.rmse, ev.loss, seconds(), fp});
    out.metrics.push_back({epoch, "val:raw", ev.raw_rmse, ev.loss, seconds(), fp});
    if (ev.selection < out.best_selection) {
      out.best_selection = ev.selection;
      out.best_epoch = epoch;
      snapshot = checkpoint::capture(task.kind, *task.params);
    }
    if (log) {
      *log << task.kind << " epoch " << epoch << " train_loss " << loss_sum / static_cast<double>(seen) << " val_rmse "
           << ev.rmse << " val_raw " << ev.raw_rmse << " (" << fixed_str(seconds(), 1) << "s)\n";
    }
  }
  checkpoint::restore(snapshot, *task.params);
  return out;
}

// ---------------------------------------------------------------------------
// Counting

inline counting::CountingConfig counting_config(const Config& cfg, const Prepared& data) {
  counting::CountingConfig c;
  c.d_v = data.d_v;
  c.d_w = data.d_w;
  c.d = cfg.get_size("model.d");
  c.k = cfg.get_size("model.k");
  c.use_L = cfg.get_bool("model.use_L");
  c.use_VB = cfg.get_bool("model.use_VB");
  c.use_B = cfg.get_bool("model.use_B");
  c.coattention = cfg.get_bool("model.coattention");
  c.regressor = cfg.get("model.regressor") == "linear" ? counting::Regressor::linear : counting::Regressor::tucker;
  const auto& e = cfg.get("model.embedding");
  c.source = e == "onehot_separate"  ? counting::EmbeddingSource::onehot_separate
             : e == "onehot_shared" ? counting::EmbeddingSource::onehot_shared
                                    : counting::EmbeddingSource::pretrained;
  c.vocab_size = data.onehot_vocab;
  return c;
}

inline counting::CountingInput counting_input(const PreparedSample& s) {
  return {&s.scene, &s.question, s.label_ids, s.token_ids};
}

/// Raw (unrounded) scores in eval mode, chunked.
inline std::vector<double> counting_scores(counting::CountingModel& model, const Prepared& data,
                                           const std::vector<std::size_t>& idx) {
  NoGradGuard ng;
  std::vector<double> out;
  out.reserve(idx.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t b = 0; b < idx.size(); b += chunk) {
    std::vector<counting::CountingInput> batch;
    for (std::size_t i = b; i < std::min(idx.size(), b + chunk); ++i) batch.push_back(counting_input(data.samples[idx[i]]));
    for (const auto& o : counting::forward_batch(model, batch, NormMode::eval)) out.push_back(o.score.item());
  }
  return out;
}

inline EvalResult evaluate_counting(counting::CountingModel& model, const Prepared& data,
                                    const std::vector<std::size_t>& idx) {
  auto raw = counting_scores(model, data, idx);
  std::vector<double> rounded;
  std::vector<std::size_t> target;
  double loss = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    rounded.push_back(static_cast<double>(counting::round_count(raw[i])));
    target.push_back(data.samples[idx[i]].answer);
    double r = std::abs(raw[i] - static_cast<double>(target.back()));
    loss += r < 1 ? 0.5 * r * r : r - 0.5;
  }
  EvalResult ev;
  ev.rmse = rmse_of(rounded, target);
  ev.raw_rmse = rmse_of(raw, target);
  ev.loss = loss / static_cast<double>(idx.size());
  ev.selection = ev.raw_rmse;
  ev.n = idx.size();
  return ev;
}

struct CountingRun {
  counting::CountingModel model;
  TrainOutcome outcome;
};

inline CountingRun train_counting(const Prepared& data, const Config& cfg, std::ostream* log = nullptr) {
  CountingRun run{counting::CountingModel(counting_config(cfg, data), derived_seed(cfg, 0x1a7)), {}};
  auto& model = run.model;
  if (cfg.get_bool("train.init_bias_to_mean")) {
    double mean = 0;
    const auto& tr = data.split("train");
    for (auto i : tr) mean += static_cast<double>(data.samples[i].answer);
    model.pred.b_r.mutable_values()[0] = mean / static_cast<double>(tr.size());
  }
  Task task;
  task.kind = "counting";
  task.params = &model.parameters();
  task.batch_ok = [&](std::span<const std::size_t> b) {
    if (!model.config().use_VB) return true;
    std::size_t objects = 0;
    for (auto i : b) objects += data.samples[i].scene.m();
    return objects >= 2;  // batch statistics need two rows
  };
  task.batch_loss = [&](std::span<const std::size_t> b, double* sq_err) {
    std::vector<counting::CountingInput> batch;
    for (auto i : b) batch.push_back(counting_input(data.samples[i]));
    auto outs = counting::forward_batch(model, batch, NormMode::train);
    Tensor total;
    for (std::size_t s = 0; s < outs.size(); ++s) {
      double target = static_cast<double>(data.samples[b[s]].answer);
      double e = static_cast<double>(counting::round_count(outs[s].score.item())) - target;
      *sq_err += e * e;
      Tensor l = counting::training_loss(outs[s].score, target);
      total = s == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / static_cast<double>(outs.size()));
  };
  task.evaluate = [&](const std::vector<std::size_t>& idx) { return evaluate_counting(model, data, idx); };
  run.outcome = run_training(task, data, cfg, log);
  return run;
}

// ---------------------------------------------------------------------------
// VQA adapters (answers are count classes 0..max_count)

inline vqa::VqaConfig vqa_config(const Config& cfg, const Prepared& data) {
  vqa::VqaConfig c;
  const auto& kind = cfg.get("model");
  c.arch = kind == "murel" ? vqa::Architecture::murel : kind == "ban" ? vqa::Architecture::ban : vqa::Architecture::updn;
  c.d_v = data.d_v;
  c.d_w = data.d_w;
  c.d = cfg.get_size("vqa.hidden");
  c.joint = cfg.get_size("vqa.joint");
  c.d_o = std::max<std::size_t>(2, data.max_count + 1);
  c.use_lat = cfg.get_bool("vqa.use_lat");
  c.pooling = cfg.get("vqa.pooling") == "max" ? vqa::Pooling::max : vqa::Pooling::attention;
  return c;
}

inline EvalResult evaluate_vqa(const vqa::VqaModel& model, const Prepared& data, const std::vector<std::size_t>& idx) {
  NoGradGuard ng;
  std::vector<double> pred;
  std::vector<std::size_t> target;
  double loss = 0;
  for (auto i : idx) {
    const auto& s = data.samples[i];
    auto out = vqa::forward(model, s.scene, s.question);
    pred.push_back(static_cast<double>(vqa::predict_answer(out)));
    target.push_back(s.answer);
    loss += s.answer < out.logits.numel() ? vqa::answer_loss(out, s.answer).item() : 0.0;
  }
  EvalResult ev;
  ev.rmse = ev.raw_rmse = rmse_of(pred, target);
  ev.loss = loss / static_cast<double>(idx.size());
  ev.selection = ev.loss;
  ev.n = idx.size();
  return ev;
}

struct VqaRun {
  vqa::VqaModel model;
  TrainOutcome outcome;
};

inline VqaRun train_vqa(const Prepared& data, const Config& cfg, std::ostream* log = nullptr) {
  VqaRun run{vqa::VqaModel(vqa_config(cfg, data), derived_seed(cfg, 0x1a7)), {}};
  auto& model = run.model;
  Task task;
  task.kind = cfg.get("model");
  task.params = &model.parameters();
  task.batch_loss = [&](std::span<const std::size_t> b, double* sq_err) {
    Tensor total;
    for (std::size_t s = 0; s < b.size(); ++s) {
      const auto& smp = data.samples[b[s]];
      auto out = vqa::forward(model, smp.scene, smp.question);
      double e = static_cast<double>(vqa::predict_answer(out)) - static_cast<double>(smp.answer);
      *sq_err += e * e;
      Tensor l = vqa::answer_loss(out, smp.answer);
      total = s == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / static_cast<double>(b.size()));
  };
  task.evaluate = [&](const std::vector<std::size_t>& idx) { return evaluate_vqa(model, data, idx); };
  run.outcome = run_training(task, data, cfg, log);
  return run;
}

// ---------------------------------------------------------------------------
// Captioning

struct CaptionData {
  caption::Vocabulary vocab;
  std::vector<std::vector<std::size_t>> references;  // per record
};

inline CaptionData caption_data(const Dataset& ds) {
  CaptionData c{caption_vocabulary(ds), {}};
  for (const auto& r : ds.records) {
    if (r.caption.empty()) throw ContractError("caption: record " + r.scene_id + " has no caption");
    c.references.push_back(caption::encode_caption(c.vocab, r.caption));
  }
  return c;
}

inline caption::CaptionConfig caption_config(const Config& cfg, const Prepared& data, std::size_t vocab) {
  caption::CaptionConfig c;
  c.d_v = data.d_v;
  c.d_w = data.d_w;
  c.d_e = cfg.get_size("caption.d_e");
  c.hidden_o = cfg.get_size("caption.hidden_o");
  c.d = cfg.get_size("caption.d");
  c.vocab_size = vocab;
  c.use_lat = cfg.get_bool("caption.use_lat");
  return c;
}

/// rmse column: fraction of scenes whose greedy caption differs from the
/// reference; loss: mean teacher-forced loss.
inline EvalResult evaluate_caption(const caption::CaptionModel& model, const Prepared& data, const CaptionData& cd,
                                   const std::vector<std::size_t>& idx, std::size_t max_len) {
  NoGradGuard ng;
  double loss = 0, wrong = 0;
  for (auto i : idx) {
    const auto& ref = cd.references[i];
    loss += caption::caption_loss(model, data.samples[i].scene, ref).item();
    auto gen = caption::generate_caption(model, data.samples[i].scene, max_len);
    if (gen != std::vector<std::size_t>(ref.begin() + 1, ref.end() - 1)) wrong += 1;
  }
  EvalResult ev;
  ev.n = idx.size();
  ev.rmse = ev.raw_rmse = wrong / static_cast<double>(idx.size());
  ev.loss = loss / static_cast<double>(idx.size());
  ev.selection = ev.loss;
  return ev;
}

struct CaptionRun {
  caption::CaptionModel model;
  TrainOutcome outcome;
};

inline CaptionRun train_caption(const Prepared& data, const CaptionData& cd, const Dataset& ds, const Config& cfg,
                                std::ostream* log = nullptr) {
  CaptionRun run{caption::CaptionModel(caption_config(cfg, data, cd.vocab.size()),
                                       caption::word_vectors_for(cd.vocab, ds.embeddings), derived_seed(cfg, 0x1a7)),
                 {}};
  auto& model = run.model;
  std::size_t max_len = cfg.get_size("caption.max_len");
  Task task;
  task.kind = "caption";
  task.params = &model.parameters();
  task.batch_loss = [&](std::span<const std::size_t> b, double*) {
    Tensor total;
    for (std::size_t s = 0; s < b.size(); ++s) {
      Tensor l = caption::caption_loss(model, data.samples[b[s]].scene, cd.references[b[s]]);
      total = s == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / static_cast<double>(b.size()));
  };
  task.evaluate = [&](const std::vector<std::size_t>& idx) { return evaluate_caption(model, data, cd, idx, max_len); };
  run.outcome = run_training(task, data, cfg, log);
  return run;
}

// ---------------------------------------------------------------------------
// Ablation

inline Config variant_config(const Config& base, const std::string& variant) {
  Config c = base;
  c.set("model", "counting");
  if (variant == "full") return c;
  if (variant == "no_coattention") c.set("model.coattention", "false");
  else if (variant == "no_L") c.set("model.use_L", "false");
  else if (variant == "no_VB") c.set("model.use_VB", "false");
  else if (variant == "no_B") c.set("model.use_B", "false");
  else if (variant == "linear_regression") c.set("model.regressor", "linear");
  else if (variant == "onehot_separate") c.set("model.embedding", "onehot_separate");
  else if (variant == "onehot_shared") c.set("model.embedding", "onehot_shared");
  else throw ContractError("unknown ablation variant '" + variant + "'");
  return c;
}

struct AblationRow {
  std::string variant;
  std::string split;
  double rmse = 0;
  double raw_rmse = 0;
  std::size_t best_epoch = 0;
  double seconds = 0;
};

inline const std::vector<std::string>& report_splits() {
  static const std::vector<std::string> s = {"test-seen", "test-synonym", "test"};
  return s;
}

/// Trains each variant with the same seeds and budget; rows per variant per
/// reported split. Metrics of every run are appended to *metrics when given.
inline std::vector<AblationRow> ablate(const Prepared& data, const Config& base, const std::vector<std::string>& variants,
                                       std::ostream* log = nullptr, std::vector<MetricsRow>* metrics = nullptr) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    auto cfg = variant_config(base, v);
    auto t0 = std::chrono::steady_clock::now();
    auto run = train_counting(data, cfg, log);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (metrics) metrics->insert(metrics->end(), run.outcome.metrics.begin(), run.outcome.metrics.end());
    for (const auto& s : report_splits()) {
      auto ev = evaluate_counting(run.model, data, data.split(s));
      rows.push_back({v, s, ev.rmse, ev.raw_rmse, run.outcome.best_epoch, secs});
    }
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "variant,split,rmse,raw_rmse,best_epoch,seconds\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << r.split << ',' << format_double(r.rmse) << ',' << format_double(r.raw_rmse) << ','
        << r.best_epoch << ',' << fixed_str(r.seconds, 1) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Any model kind behind one handle

class AnyModel {
 public:
  /// Freshly initialized model of cfg's kind for this dataset.
  AnyModel(const Config& cfg, const Dataset& ds, const Prepared& data)
      : kind_(cfg.get("model")), max_len_(cfg.get_size("caption.max_len")), ds_(&ds), data_(&data) {
    if (kind_ == "counting") {
      counting_.emplace(counting_config(cfg, data), derived_seed(cfg, 0x1a7));
    } else if (kind_ == "caption") {
      captions_ = caption_data(ds);
      caption_.emplace(caption_config(cfg, data, captions_->vocab.size()),
                       caption::word_vectors_for(captions_->vocab, ds.embeddings), derived_seed(cfg, 0x1a7));
    } else {
      vqa_.emplace(vqa_config(cfg, data), derived_seed(cfg, 0x1a7));
    }
  }

  const std::string& kind() const { return kind_; }

  ParameterSet& parameters() {
    if (counting_) return counting_->parameters();
    if (caption_) return caption_->parameters();
    return vqa_->parameters();
  }

  TrainOutcome train(const Config& cfg, std::ostream* log) {
    if (counting_) {
      auto run = train_counting(*data_, cfg, log);
      *counting_ = std::move(run.model);
      return run.outcome;
    }
    if (caption_) {
      auto run = train_caption(*data_, *captions_, *ds_, cfg, log);
      *caption_ = std::move(run.model);
      return run.outcome;
    }
    auto run = train_vqa(*data_, cfg, log);
    *vqa_ = std::move(run.model);
    return run.outcome;
  }

  EvalResult evaluate(const std::vector<std::size_t>& idx) {
    if (counting_) return evaluate_counting(*counting_, *data_, idx);
    if (caption_) return evaluate_caption(*caption_, *data_, *captions_, idx, max_len_);
    return evaluate_vqa(*vqa_, *data_, idx);
  }

  counting::CountingModel* counting_model() { return counting_ ? &*counting_ : nullptr; }
  vqa::VqaModel* vqa_model() { return vqa_ ? &*vqa_ : nullptr; }
  caption::CaptionModel* caption_model() { return caption_ ? &*caption_ : nullptr; }
  const CaptionData* captions() const { return captions_ ? &*captions_ : nullptr; }

 private:
  std::string kind_;
  std::size_t max_len_;
  const Dataset* ds_;
  const Prepared* data_;
  std::optional<counting::CountingModel> counting_;
  std::optional<vqa::VqaModel> vqa_;
  std::optional<caption::CaptionModel> caption_;
  std::optional<CaptionData> captions_;
};

// ---------------------------------------------------------------------------
// Checkpoints of harness-trained models

inline std::vector<std::pair<std::string, std::string>> checkpoint_meta(const Config& cfg, std::size_t best_epoch) {
  std::vector<std::pair<std::string, std::string>> meta;
  for (const auto& k : config_keys()) meta.push_back({std::string("config.") + k.key, cfg.get(k.key)});
  meta.push_back({"fingerprint", cfg.fingerprint()});
  meta.push_back({"best_epoch", std::to_string(best_epoch)});
  return meta;
}

inline Config config_from_checkpoint(const checkpoint::Checkpoint& c) {
  Config cfg;
  for (const auto& [k, v] : c.meta)
    if (k.rfind("config.", 0) == 0) cfg.set(k.substr(7), v);
  return cfg;
}

}  // namespace lat::harness
