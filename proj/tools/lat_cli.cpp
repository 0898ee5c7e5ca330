#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "lat/gradsuite.hpp"
#include "lat/harness.hpp"

namespace fs = std::filesystem;
using namespace lat;
using harness::Config;

namespace {

constexpr int kOk = 0;
constexpr int kContract = 1;
constexpr int kThreshold = 2;

constexpr const char* kCheckpointFile = "checkpoint.lat";
constexpr const char* kMetricsFile = "metrics.csv";

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out = "out";
  std::vector<std::string> overrides;
  bool quiet = false;
};

Config load_config(const Globals& g) {
  Config c = g.config_path.empty() ? Config() : Config::load_file(g.config_path);
  for (const auto& kv : g.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.set("seed", std::to_string(*g.seed));
  return c;
}

harness::Dataset obtain_dataset(const Config& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return harness::load_dataset_dir(data_dir);
  return harness::dataset_from_world(world::generate_world(cfg.world_spec()));
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ContractError("cannot write " + path.string());
  return f;
}

void write_text(const fs::path& path, const std::string& text) { open_out(path) << text; }

std::ostream* log_stream(const Globals& g) { return g.quiet ? nullptr : &std::cerr; }

// Model rebuilt from a checkpoint, with the dataset it is evaluated on.
struct Restored {
  Config cfg;
  harness::Dataset ds;
  harness::Prepared data;
  std::unique_ptr<harness::AnyModel> model;
  std::size_t best_epoch = 0;
};

Restored restore_model(const std::string& ckpt_path, const std::string& data_dir) {
  std::ifstream in(ckpt_path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + ckpt_path);
  auto ck = checkpoint::read(in);
  Restored r;
  r.cfg = harness::config_from_checkpoint(ck);
  if (ck.kind != r.cfg.get("model")) throw ContractError("checkpoint kind '" + ck.kind + "' disagrees with its config");
  r.ds = obtain_dataset(r.cfg, data_dir);
  r.data = harness::prepare(r.ds, r.cfg.get_size("model.max_question_len"));
  r.model = std::make_unique<harness::AnyModel>(r.cfg, r.ds, r.data);
  checkpoint::restore(ck, r.model->parameters());
  if (const auto* e = ck.find_meta("best_epoch")) r.best_epoch = std::stoul(*e);
  return r;
}

std::vector<harness::MetricsRow> evaluation_rows(harness::AnyModel& model, const harness::Prepared& data,
                                                 std::size_t epoch, const std::string& fp,
                                                 const std::vector<std::string>& splits) {
  std::vector<harness::MetricsRow> rows;
  auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : splits) {
    auto ev = model.evaluate(data.split(s));
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({epoch, s, ev.rmse, ev.loss, secs, fp});
  }
  return rows;
}

const std::vector<std::string> kEvalSplits = {"val", "test-seen", "test-synonym", "test"};

int cmd_gen_data(const Globals& g) {
  auto cfg = load_config(g);
  auto w = world::generate_world(cfg.world_spec());
  auto ds = harness::dataset_from_world(w);
  harness::write_dataset_dir(ds, g.out);
  write_text(fs::path(g.out) / "world.cfg", cfg.canonical());
  std::cout << "wrote " << ds.records.size() << " records to " << g.out << '\n';
  return kOk;
}

int cmd_train(const Globals& g, const std::string& data_dir) {
  auto cfg = load_config(g);
  auto ds = obtain_dataset(cfg, data_dir);
  auto data = harness::prepare(ds, cfg.get_size("model.max_question_len"));
  harness::AnyModel model(cfg, ds, data);
  auto outcome = model.train(cfg, log_stream(g));
  auto rows = outcome.metrics;
  auto evals = evaluation_rows(model, data, outcome.best_epoch, cfg.fingerprint(), {"test-seen", "test-synonym"});
  rows.insert(rows.end(), evals.begin(), evals.end());

  fs::path out(g.out);
  {
    auto f = open_out(out / kMetricsFile);
    harness::write_metrics_csv(f, rows);
  }
  {
    auto f = open_out(out / kCheckpointFile);
    checkpoint::write(f, checkpoint::capture(model.kind(), model.parameters(),
                                             harness::checkpoint_meta(cfg, outcome.best_epoch)));
  }
  write_text(out / "config.txt", cfg.canonical());
  std::cout << "model " << model.kind() << " best_epoch " << outcome.best_epoch;
  for (const auto& r : evals) std::cout << ' ' << r.split << ' ' << format_double(r.rmse);
  std::cout << "\ncheckpoint " << (out / kCheckpointFile).string() << '\n';
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& data_dir, std::string ckpt) {
  if (ckpt.empty()) ckpt = (fs::path(g.out) / kCheckpointFile).string();
  auto r = restore_model(ckpt, data_dir);
  auto rows = evaluation_rows(*r.model, r.data, r.best_epoch, r.cfg.fingerprint(), kEvalSplits);
  harness::write_metrics_csv(std::cout, rows);
  auto f = open_out(fs::path(g.out) / "eval.csv");
  harness::write_metrics_csv(f, rows);
  return kOk;
}

// Orderings the ablation table is expected to show, checked when present.
std::vector<std::string> ablation_violations(const std::vector<harness::AblationRow>& rows) {
  auto find = [&](const std::string& v, const std::string& s) -> std::optional<double> {
    for (const auto& r : rows)
      if (r.variant == v && r.split == s) return r.rmse;
    return std::nullopt;
  };
  std::vector<std::string> bad;
  auto full_seen = find("full", "test-seen");
  if (!full_seen) return bad;
  for (const char* v : {"linear_regression", "no_coattention"}) {
    auto x = find(v, "test-seen");
    if (x && !(*x > *full_seen)) bad.push_back(std::string(v) + " test-seen rmse not above full");
  }
  auto full_syn = find("full", "test-synonym");
  auto nol_syn = find("no_L", "test-synonym");
  if (full_syn && nol_syn && !(*full_syn <= 0.8 * *nol_syn)) bad.push_back("full test-synonym not 20% below no_L");
  auto sep = find("onehot_separate", "test"), sh = find("onehot_shared", "test"), full = find("full", "test");
  if (sep && sh && !(*sep > *sh)) bad.push_back("onehot_separate not above onehot_shared on test");
  if (sh && full && !(*sh > *full)) bad.push_back("onehot_shared not above full on test");
  return bad;
}

int cmd_ablate(const Globals& g, const std::string& data_dir, bool check) {
  auto cfg = load_config(g);
  auto ds = obtain_dataset(cfg, data_dir);
  auto data = harness::prepare(ds, cfg.get_size("model.max_question_len"));
  std::vector<harness::MetricsRow> metrics;
  auto rows = harness::ablate(data, cfg, cfg.get_list("ablate.variants"), log_stream(g), &metrics);
  fs::path out(g.out);
  {
    auto f = open_out(out / "ablation.csv");
    harness::write_ablation_csv(f, rows);
  }
  {
    auto f = open_out(out / kMetricsFile);
    harness::write_metrics_csv(f, metrics);
  }
  harness::write_ablation_csv(std::cout, rows);
  if (!check) return kOk;
  auto bad = ablation_violations(rows);
  for (const auto& b : bad) std::cerr << "check failed: " << b << '\n';
  return bad.empty() ? kOk : kThreshold;
}

int cmd_grad_check(const Globals& g, double tolerance) {
  auto cases = gradsuite::run_all(g.seed.value_or(7));
  bool ok = true;
  for (const auto& c : cases) {
    bool pass = c.max_relative_error < tolerance;
    ok = ok && pass;
    std::cout << (pass ? "ok   " : "FAIL ") << c.name << " max_rel_err " << c.max_relative_error << " entries "
              << c.entries << '\n';
  }
  return ok ? kOk : kThreshold;
}

nlohmann::json values_json(const Tensor& t) {
  if (!t.defined()) return nullptr;
  auto v = t.values();
  if (t.rank() == 2) {
    nlohmann::json m = nlohmann::json::array();
    for (std::size_t i = 0; i < t.dim(0); ++i)
      m.push_back(std::vector<double>(v.begin() + i * t.dim(1), v.begin() + (i + 1) * t.dim(1)));
    return m;
  }
  return std::vector<double>(v.begin(), v.end());
}

int cmd_inspect(const Globals& g, const std::string& data_dir, std::string ckpt, const std::string& scene_id) {
  if (ckpt.empty()) ckpt = (fs::path(g.out) / kCheckpointFile).string();
  auto r = restore_model(ckpt, data_dir);
  std::size_t idx = r.data.split("test-seen").front();
  if (!scene_id.empty()) {
    auto it = std::find_if(r.ds.records.begin(), r.ds.records.end(),
                           [&](const world::SampleRecord& x) { return x.scene_id == scene_id; });
    if (it == r.ds.records.end()) throw ContractError("no scene '" + scene_id + "' in the dataset");
    idx = static_cast<std::size_t>(it - r.ds.records.begin());
  }
  const auto& rec = r.ds.records[idx];
  const auto& s = r.data.samples[idx];
  NoGradGuard ng;
  nlohmann::json j;
  j["scene_id"] = rec.scene_id;
  j["model"] = r.model->kind();
  j["labels"] = s.scene.labels;
  j["tokens"] = s.question.tokens;
  j["answer"] = rec.answer;
  if (auto* m = r.model->counting_model()) {
    auto o = counting::forward(*m, harness::counting_input(s), NormMode::eval);
    j["score"] = o.score.item();
    j["prediction"] = counting::round_count(o.score.item());
    j["mu"] = values_json(o.attention.mu);
    j["nu"] = values_json(o.attention.nu);
  } else if (auto* m = r.model->vqa_model()) {
    auto o = vqa::forward(*m, s.scene, s.question);
    j["prediction"] = vqa::predict_answer(o);
    j["gamma"] = values_json(o.gamma);
    j["visual_map"] = values_json(o.visual_map);
    j["linguistic_map"] = values_json(o.linguistic_map);
  } else if (auto* m = r.model->caption_model()) {
    const auto& cd = *r.model->captions();
    auto steps = caption::rollout(*m, s.scene, cd.references[idx]);
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t t = 0; t < steps.size(); ++t) {
      arr.push_back({{"input", cd.vocab.token(cd.references[idx][t])},
                     {"alpha", values_json(steps[t].attention.alpha)},
                     {"beta", values_json(steps[t].attention.beta)}});
    }
    j["steps"] = arr;
    std::vector<std::string> gen;
    for (auto w : caption::generate_caption(*m, s.scene, r.cfg.get_size("caption.max_len")))
      gen.push_back(cd.vocab.token(w));
    j["generated"] = gen;
  }
  std::cout << j.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lat: counting, VQA and captioning experiments on the synthetic world"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "override the master seed");
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");
  app.add_flag("--quiet", g.quiet, "no progress on stderr");

  std::string data_dir, ckpt, scene;
  bool check = false;
  double tolerance = 1e-4;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset into --out");
  auto* train = app.add_subcommand("train", "train the configured model; writes metrics.csv and checkpoint.lat");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on every split");
  auto* abl = app.add_subcommand("ablate", "train every counting variant in ablate.variants");
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every op and model");
  auto* insp = app.add_subcommand("inspect-attention", "print one scene's attention maps as JSON");
  for (auto* sc : {train, eval, abl, insp})
    sc->add_option("--data", data_dir, "dataset directory from gen-data (default: regenerate from config)");
  for (auto* sc : {eval, insp}) sc->add_option("--checkpoint", ckpt, "checkpoint file (default: <out>/checkpoint.lat)");
  insp->add_option("--scene", scene, "scene_id (default: first test-seen scene)");
  abl->add_flag("--check", check, "exit 2 when the expected variant orderings do not hold");
  grad->add_option("--tolerance", tolerance, "largest accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kContract;
  }

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g, data_dir);
    if (*eval) return cmd_eval(g, data_dir, ckpt);
    if (*abl) return cmd_ablate(g, data_dir, check);
    if (*grad) return cmd_grad_check(g, tolerance);
    if (*insp) return cmd_inspect(g, data_dir, ckpt, scene);
  } catch (const lat::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kContract;
  }
  return kContract;
}
