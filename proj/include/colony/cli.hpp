#pragma once

// Command-line driver: generate | train | search | predict | evaluate | gradcheck.
// Exit codes: 0 success, 1 usage error (bad flags, config values, missing or
// malformed inputs), 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "colony/config.hpp"
#include "colony/dishgen.hpp"
#include "colony/evalkit.hpp"
#include "colony/gradcheck.hpp"
#include "colony/pnm.hpp"
#include "colony/train.hpp"
#include "colony/unet.hpp"

namespace colony::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

inline constexpr const char* kTrainValFile = "train_val.txt";
inline constexpr const char* kTestFile = "test.txt";

// A failure that is not the caller's fault (divergence, failed check).
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing and file helpers

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string file_hash(const fs::path& path) { return hex64(fnv1a64(read_text(path))); }

/// Records every dataset file a run touches, tagged with the phase that
/// touched it, so the manifest can show the test split stayed unread until
/// the final evaluation.
class AuditLog {
 public:
  void set_phase(std::string phase) { phase_ = std::move(phase); }
  const std::string& phase() const { return phase_; }
  void read(const std::string& file) { entries_.push_back({phase_, file}); }

  json to_json() const {
    json a = json::array();
    for (const auto& [p, f] : entries_) a.push_back({{"phase", p}, {"file", f}});
    return a;
  }

 private:
  std::string phase_ = "setup";
  std::vector<std::pair<std::string, std::string>> entries_;
};

// ---------------------------------------------------------------------------
// Splits

/// Test ids are the first round(fraction * n) of a seeded shuffle; both lists
/// are returned in dataset order.
inline std::pair<std::vector<std::string>, std::vector<std::string>> make_split(
    const DatasetManifest& m, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) {
    throw ConfigError("test_fraction", "must be in (0, 1)");
  }
  const std::size_t n = m.entries.size();
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
  if (n_test < 1 || n_test >= n) {
    throw ConfigError("test_fraction", "leaves an empty train-val or test split for n=" +
                                           std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5B117ull));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
  std::vector<std::string> train_val, test;
  for (std::size_t i = 0; i < n; ++i) (is_test[i] ? test : train_val).push_back(m.entries[i].id);
  return {std::move(train_val), std::move(test)};
}

inline std::string ids_text(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) s += id + "\n";
  return s;
}

inline std::vector<std::string> read_ids(const fs::path& dir, const std::string& file,
                                         AuditLog& audit) {
  const std::string text = read_text(dir / file);
  audit.read(file);
  std::vector<std::string> ids;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

inline std::vector<Sample> load_samples(const fs::path& dir, const DatasetManifest& m,
                                        const std::vector<std::string>& ids, AuditLog& audit) {
  std::vector<Sample> out;
  for (const auto& id : ids) {
    const auto it = std::find_if(m.entries.begin(), m.entries.end(),
                                 [&](const DatasetEntry& e) { return e.id == id; });
    if (it == m.entries.end()) {
      throw IoError((dir / "manifest.json").string(), "split lists unknown id '" + id + "'");
    }
    Sample s{id, read_ppm(dir / it->image), read_pgm_mask(dir / it->mask)};
    audit.read(it->image);
    audit.read(it->mask);
    out.push_back(std::move(s));
  }
  return out;
}

inline void check_canvas(const std::vector<Sample>& samples, const RunConfig& cfg) {
  for (const auto& s : samples) {
    if (s.image.height() != cfg.image_size || s.image.width() != cfg.image_size) {
      throw ConfigError("image_size", "is " + std::to_string(cfg.image_size) +
                                          " but dataset image " + s.id + " is " +
                                          std::to_string(s.image.width()) + "x" +
                                          std::to_string(s.image.height()));
    }
  }
}

// ---------------------------------------------------------------------------
// Experiment manifest

struct Artifact {
  std::string name;
  std::string file;  // relative to the run directory
};

inline json experiment_manifest(const std::string& command, const RunConfig& cfg,
                                const fs::path& data_dir, const DatasetManifest& dataset,
                                const std::vector<std::string>& train_val,
                                const std::vector<std::string>& test,
                                const fs::path& out_dir, const std::vector<Artifact>& artifacts,
                                const AuditLog& audit) {
  json j;
  j["command"] = command;
  j["config"] = to_json(cfg);
  j["dataset"] = {{"dir", data_dir.generic_string()},
                  {"manifest_hash", file_hash(data_dir / "manifest.json")},
                  {"size", dataset.entries.size()}};
  j["split"] = {{"train_val", train_val},
                {"test", test},
                {"train_val_hash", file_hash(data_dir / kTrainValFile)},
                {"test_hash", file_hash(data_dir / kTestFile)}};
  j["seeds"] = {{"run", cfg.seed}, {"dataset", dataset.seed}};
  json a = json::object();
  for (const auto& art : artifacts) {
    a[art.name] = {{"file", art.file}, {"hash", file_hash(out_dir / art.file)}};
  }
  j["artifacts"] = a;
  j["audit"] = audit.to_json();
  return j;
}

/// Checks that every artifact listed in `run_dir`/manifest.json exists and
/// still hashes to the recorded value. Returns the names that fail.
inline std::vector<std::string> verify_manifest(const fs::path& run_dir) {
  const json j = json::parse(read_text(run_dir / "manifest.json"));
  std::vector<std::string> bad;
  for (const auto& [name, art] : j.at("artifacts").items()) {
    const fs::path p = run_dir / art.at("file").get<std::string>();
    if (!fs::exists(p) || file_hash(p) != art.at("hash").get<std::string>()) bad.push_back(name);
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Subcommand bodies

struct GenerateArgs {
  int n = 108;
  std::uint64_t seed = 1;
  std::string out;
  std::string preset = "realistic";
  int size = 128;
  double test_fraction = 0.2;
  GeneratorParams params;
};

inline int cmd_generate(GenerateArgs a, std::ostream& out) {
  a.params.preset = parse_preset(a.preset);
  a.params.height = a.params.width = a.size;
  const auto manifest = generate_dataset(a.params, a.n, a.seed, a.out);
  const auto [train_val, test] = make_split(manifest, a.test_fraction, a.seed);
  write_text_file(fs::path(a.out) / kTrainValFile, ids_text(train_val));
  write_text_file(fs::path(a.out) / kTestFile, ids_text(test));
  out << "generated " << manifest.entries.size() << " images (" << train_val.size()
      << " train-val, " << test.size() << " test) in " << a.out << "\n";
  return kExitOk;
}

struct RunArgs {
  std::string data;
  std::string out;
  std::string config_file;
  ConfigOverrides flags;
};

inline RunConfig resolve_config(const RunArgs& a) {
  const ConfigOverrides file = a.config_file.empty() ? ConfigOverrides{}
                                                     : read_config_file(a.config_file);
  return make_config(file, a.flags);
}

inline Log stderr_log(std::ostream& err) {
  return [&err](const std::string& s) { err << s << "\n" << std::flush; };
}

// Final held-out evaluation plus the train-val reference row.
inline std::vector<MetricsReport> final_reports(UNet<float>& model, const fs::path& data,
                                                const DatasetManifest& dm,
                                                const std::vector<Sample>& train_val,
                                                AuditLog& audit, const RunConfig& cfg,
                                                std::vector<std::string>& test_ids) {
  audit.set_phase("test");
  test_ids = read_ids(data, kTestFile, audit);
  const auto test = load_samples(data, dm, test_ids, audit);
  check_canvas(test, cfg);
  return {evaluate_model(model, train_val, "train_val", cfg.batch_size),
          evaluate_model(model, test, "test", cfg.batch_size)};
}

inline void write_reports(const fs::path& out_dir, const std::vector<MetricsReport>& reports) {
  json j = json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  write_text_file(out_dir / "report.json", j.dump(2) + "\n");
  write_text_file(out_dir / "report.txt", format_table(reports));
}

inline int cmd_train(const RunArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(a);
  const fs::path data(a.data), run(a.out);
  AuditLog audit;
  const auto dm = read_manifest(data);
  audit.read("manifest.json");

  audit.set_phase("train");
  const auto ids = read_ids(data, kTrainValFile, audit);
  const auto samples = load_samples(data, dm, ids, audit);
  check_canvas(samples, cfg);
  // Validation = first of four seeded folds of the train-val split.
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto fold = kfold_split(idx, 4, derive_seed(cfg.seed, 0xF01Dull)).front();
  std::vector<Sample> tr, va;
  for (auto i : fold.train) tr.push_back(samples[i]);
  for (auto i : fold.val) va.push_back(samples[i]);

  UNet<float> model(cfg.unet, cfg.seed);
  const auto history = train(model, tr, va, cfg, stderr_log(err));

  fs::create_directories(run);
  save_weights(model, run / "model.ckpt");
  write_text_file(run / "history.csv", history.to_csv());
  write_text_file(run / "config.txt", to_config_text(cfg));
  std::vector<std::string> test_ids;
  const auto reports = final_reports(model, data, dm, samples, audit, cfg, test_ids);
  write_reports(run, reports);
  const auto m = experiment_manifest(
      "train", cfg, data, dm, ids, test_ids, run,
      {{"checkpoint", "model.ckpt"}, {"history", "history.csv"}, {"config", "config.txt"},
       {"report_json", "report.json"}, {"report_txt", "report.txt"}},
      audit);
  write_text_file(run / "manifest.json", m.dump(2) + "\n");
  out << format_table(reports);
  if (history.stop_reason == StopReason::diverged) {
    throw RuntimeFailure("training diverged (non-finite loss)");
  }
  return kExitOk;
}

/// depth 2 with batchnorm, both losses, lr 1e-3: a desk-scale slice of the
/// default grid. Without batchnorm, lr 1e-3 runs at this size spike
/// mid-training and leave stray pixels that inflate counts.
inline std::vector<RunConfig> small_grid(const RunConfig& base) {
  std::vector<RunConfig> grid;
  for (LossKind loss : {LossKind::weighted_ce, LossKind::ce_soft_dice}) {
    RunConfig c = base;
    c.unet.depth = 2;
    c.unet.batchnorm = true;
    c.loss = loss;
    c.lr = 1e-3;
    grid.push_back(c);
  }
  return grid;
}

struct SearchArgs {
  RunArgs run;
  std::string grid = "default";
  int k = 4;
};

inline json to_json(const SearchResult& r) {
  json ranked = json::array();
  for (const auto& e : r.ranked) {
    ranked.push_back({{"grid_index", e.index},
                      {"label", e.config.label()},
                      {"config", to_json(e.config)},
                      {"mean_val_map", e.mean_map},
                      {"fold_val_maps", e.fold_maps},
                      {"fold_best_epochs", e.fold_best_epochs},
                      {"diverged_folds", e.diverged_folds}});
  }
  return {{"ranked", ranked}, {"retrain_epochs", r.retrain_epochs}};
}

inline int cmd_search(const SearchArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig base = resolve_config(a.run);
  std::vector<RunConfig> grid;
  if (a.grid == "default") {
    grid = default_grid(base);
  } else if (a.grid == "small") {
    grid = small_grid(base);
  } else {
    throw ConfigError("grid", "must be 'default' or 'small' (got '" + a.grid + "')");
  }
  for (const auto& c : grid) c.validate();

  const fs::path data(a.run.data), run(a.run.out);
  AuditLog audit;
  const auto dm = read_manifest(data);
  audit.read("manifest.json");

  audit.set_phase("search");
  const auto ids = read_ids(data, kTrainValFile, audit);
  const auto samples = load_samples(data, dm, ids, audit);
  check_canvas(samples, base);

  UNet<float> winner(base.unet, base.seed);
  const auto result = grid_search(grid, samples, a.k, base.seed, &winner, stderr_log(err));
  const RunConfig& best = result.ranked.front().config;

  fs::create_directories(run);
  save_weights(winner, run / "model.ckpt");
  write_text_file(run / "history.csv", result.final_history.to_csv());
  write_text_file(run / "config.txt", to_config_text(best));
  write_text_file(run / "search.json", to_json(result).dump(2) + "\n");
  std::vector<std::string> test_ids;
  const auto reports = final_reports(winner, data, dm, samples, audit, best, test_ids);
  write_reports(run, reports);
  RunConfig recorded = best;
  recorded.seed = base.seed;
  const auto m = experiment_manifest(
      "search --grid " + a.grid + " --k " + std::to_string(a.k), recorded, data, dm, ids,
      test_ids, run,
      {{"checkpoint", "model.ckpt"}, {"history", "history.csv"}, {"config", "config.txt"},
       {"search", "search.json"}, {"report_json", "report.json"}, {"report_txt", "report.txt"}},
      audit);
  write_text_file(run / "manifest.json", m.dump(2) + "\n");
  out << "winner: " << best.label() << " (mean val mAP " << result.ranked.front().mean_map
      << ", retrained " << result.retrain_epochs << " epochs)\n"
      << format_table(reports);
  return kExitOk;
}

struct PredictArgs {
  std::string model;
  std::string out;
  std::vector<std::string> images;
};

inline int cmd_predict(const PredictArgs& a, std::ostream& out) {
  const auto header = read_checkpoint_header(a.model);
  UNet<float> model = load_weights(a.model, header.config);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  json counts = json::array();
  for (const auto& path : a.images) {
    const RgbImage img = read_ppm(path);
    const RgbImage* ptr = &img;
    const LabelMask mask = predict(model, std::span<const RgbImage* const>(&ptr, 1)).front();
    const std::string stem = fs::path(path).stem().string();
    write_pgm(dir / (stem + "_pred.pgm"), mask);
    write_ppm(dir / (stem + "_overlay.ppm"), render_overlay(img, mask));
    const auto c = count_colonies(mask);
    counts.push_back({{"image", path}, {"bvg+", c.bvg_plus}, {"bvg-", c.bvg_minus}});
    out << stem << ": bvg+ " << c.bvg_plus << ", bvg- " << c.bvg_minus << "\n";
  }
  write_text_file(dir / "counts.json", counts.dump(2) + "\n");
  return kExitOk;
}

struct EvaluateArgs {
  std::string pred;
  std::string data;
  std::string split = "test";
  std::string out;
};

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const fs::path data(a.data), pred(a.pred);
  const auto dm = read_manifest(data);
  std::vector<std::string> ids;
  AuditLog audit;
  if (a.split == "test") {
    ids = read_ids(data, kTestFile, audit);
  } else if (a.split == "train_val") {
    ids = read_ids(data, kTrainValFile, audit);
  } else if (a.split == "all") {
    for (const auto& e : dm.entries) ids.push_back(e.id);
  } else {
    throw ConfigError("split", "must be test, train_val or all (got '" + a.split + "')");
  }
  std::vector<LabelMask> p, g;
  for (const auto& id : ids) {
    const auto it = std::find_if(dm.entries.begin(), dm.entries.end(),
                                 [&](const DatasetEntry& e) { return e.id == id; });
    if (it == dm.entries.end()) throw IoError(data.string(), "unknown id '" + id + "'");
    g.push_back(read_pgm_mask(data / it->mask));
    p.push_back(read_pgm_mask(pred / (fs::path(it->image).stem().string() + "_pred.pgm")));
  }
  const auto report = evaluate_masks(p, g, ids, a.split);
  if (!a.out.empty()) write_text_file(a.out, to_json(report).dump(2) + "\n");
  out << format_table(std::span<const MetricsReport>(&report, 1));
  return kExitOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double tolerance = 1e-3;
  double epsilon = 1e-6;
  std::string out;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (!(a.tolerance > 0)) throw ConfigError("tolerance", "must be > 0");
  if (!(a.epsilon > 0)) throw ConfigError("epsilon", "must be > 0");
  const auto suite = run_gradcheck_suite(a.seed, a.tolerance, a.epsilon);
  for (const auto& c : suite.cases) {
    out << std::left << std::setw(22) << c.label << " max rel err " << std::scientific
        << std::setprecision(3) << c.report.max_rel_error << std::defaultfloat
        << (c.report.pass ? "  ok" : "  FAIL") << "\n";
  }
  out << (suite.pass ? "PASS" : "FAIL") << " max rel err " << suite.max_rel_error
      << " (tolerance " << suite.tolerance << ")\n";
  if (!a.out.empty()) write_text_file(a.out, to_json(suite).dump(2) + "\n");
  if (!suite.pass) throw RuntimeFailure("gradient check failed");
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline void add_config_flags(CLI::App* cmd, RunArgs& a,
                             std::shared_ptr<std::map<std::string, std::string>> store) {
  cmd->add_option("--data", a.data, "Dataset directory")->required();
  cmd->add_option("--out", a.out, "Run output directory")->required();
  cmd->add_option("--config", a.config_file, "key=value config file");
  for (const auto& key : config_keys()) {
    cmd->add_option("--" + key, (*store)[key], "Override config key '" + key + "'");
  }
}

inline ConfigOverrides collect_flags(const CLI::App* cmd,
                                     const std::map<std::string, std::string>& store) {
  ConfigOverrides flags;
  for (const auto& key : config_keys()) {
    if (cmd->get_option("--" + key)->count() > 0) flags.emplace_back(key, store.at(key));
  }
  return flags;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"colony: synthetic petri-dish colony segmentation"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic dataset with a train-val/test split");
  g->add_option("--n", gen.n, "Number of images");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--preset", gen.preset, "easy | realistic");
  g->add_option("--size", gen.size, "Canvas side in pixels");
  g->add_option("--test_fraction", gen.test_fraction, "Held-out test share");
  g->add_option("--lambda_plus", gen.params.lambda_plus, "Mean bvg+ colonies per dish");
  g->add_option("--lambda_minus", gen.params.lambda_minus, "Mean bvg- colonies per dish");
  g->add_option("--radius_min", gen.params.radius_min, "Min colony radius at 480 px");
  g->add_option("--radius_max", gen.params.radius_max, "Max colony radius at 480 px");
  g->add_option("--p_touch", gen.params.p_touch, "Probability a colony touches another");
  g->add_option("--noise_sigma", gen.params.noise_sigma, "Pixel noise sigma");

  RunArgs tr;
  auto tr_store = std::make_shared<std::map<std::string, std::string>>();
  auto* t = app.add_subcommand("train", "Train one configuration on the train-val split");
  add_config_flags(t, tr, tr_store);

  SearchArgs se;
  auto se_store = std::make_shared<std::map<std::string, std::string>>();
  auto* s = app.add_subcommand("search", "k-fold grid search, retrain winner, report on test");
  add_config_flags(s, se.run, se_store);
  s->add_option("--grid", se.grid, "default (36 configs) | small");
  s->add_option("--k", se.k, "Cross-validation folds");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict masks, overlays and counts");
  p->add_option("--model", pr.model, "Checkpoint")->required();
  p->add_option("--out", pr.out, "Output directory")->required();
  p->add_option("images", pr.images, "PPM images")->required();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score predicted masks against ground truth");
  e->add_option("--pred", ev.pred, "Directory of <image stem>_pred.pgm masks")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "test | train_val | all");
  e->add_option("--out", ev.out, "Write the report JSON here");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every layer and loss");
  c->add_option("--seed", gc.seed, "Random seed");
  c->add_option("--tolerance", gc.tolerance, "Max relative error");
  c->add_option("--epsilon", gc.epsilon, "Central-difference step");
  c->add_option("--out", gc.out, "Write the report JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_generate(gen, out);
    if (*t) {
      tr.flags = collect_flags(t, *tr_store);
      return cmd_train(tr, out, err);
    }
    if (*s) {
      se.run.flags = collect_flags(s, *se_store);
      return cmd_search(se, out, err);
    }
    if (*p) return cmd_predict(pr, out);
    if (*e) return cmd_evaluate(ev, out);
    if (*c) return cmd_gradcheck(gc, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace colony::cli
