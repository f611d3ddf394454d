#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "cnc/dataset.hpp"
#include "cnc/depth_estimator.hpp"
#include "cnc/eval.hpp"
#include "cnc/trainer.hpp"

namespace cnc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kManifestName = "run_manifest.json";
inline constexpr const char* kLockName = ".cnc.lock";
inline constexpr const char* kQuarantineDir = ".quarantine";
inline constexpr const char* kStagingPrefix = ".staging-";

inline bool deterministic_env() {
  const char* v = std::getenv("CNC_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

/// Record of one CLI invocation.
struct RunManifest {
  std::vector<std::string> command_line;
  std::string command;
  std::string config_hash;
  json inputs = json::object();     ///< path -> git blob hash
  json seeds = json::object();      ///< label -> derived seed
  json artifacts = json::object();  ///< path relative to the output directory -> git blob hash
  double wall_seconds = 0;
  int exit_status = 0;
  std::string error;
  bool deterministic = false;
  bool reproduction = false;  ///< same command, config, inputs and artifacts as the previous run here

  json to_json() const {
    return {{"command_line", command_line}, {"command", command},   {"config_hash", config_hash},
            {"inputs", inputs},             {"seeds", seeds},       {"artifacts", artifacts},
            {"wall_seconds", wall_seconds}, {"exit_status", exit_status}, {"error", error},
            {"deterministic", deterministic}, {"reproduction", reproduction}};
  }
};

/// Files the CLI keeps next to artifacts but never lists as artifacts.
inline bool is_bookkeeping(const fs::path& rel) {
  const std::string first = rel.begin()->string();
  return first == kManifestName || first == kLockName || first == kQuarantineDir || first.rfind(kStagingPrefix, 0) == 0;
}

/// Every regular file under `root` (bookkeeping excluded) with its content hash, keyed by relative path.
inline json hash_tree(const fs::path& root) {
  json out = json::object();
  if (!fs::exists(root)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), root);
    if (!is_bookkeeping(rel)) files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out[f.generic_string()] = git_blob_hash_file(root / f);
  return out;
}

/// Advisory lock on `dir/.cnc.lock`; a second holder is rejected, not queued.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / kLockName) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    require(fd_ >= 0, ErrorKind::io, "cannot open lock file " + path_.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fail(ErrorKind::state, "another cnc process is using " + dir.string() + " (" + path_.string() + " is locked)");
    }
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

/// One side-effecting command. A staged job writes into a scratch directory that is merged into
/// `out` on success and quarantined on failure; an unstaged job (training) writes in place.
struct Job {
  std::string command;
  fs::path out;
  bool staged = true;
  std::string config_hash;
  json inputs = json::object();
  json seeds = json::object();
  std::function<void(const fs::path& workdir)> body;
};

inline Job make_job(std::string command, fs::path out, bool staged = true) {
  Job j;
  j.command = std::move(command);
  j.out = std::move(out);
  j.staged = staged;
  return j;
}

inline json file_inputs(const std::vector<fs::path>& paths) {
  json j = json::object();
  for (const auto& p : paths)
    if (fs::is_regular_file(p)) j[fs::absolute(p).lexically_normal().string()] = git_blob_hash_file(p);
  return j;
}

inline void merge_into(const fs::path& from, const fs::path& to) {
  for (const auto& e : fs::directory_iterator(from)) {
    const fs::path dest = to / e.path().filename();
    if (fs::exists(dest)) fs::remove_all(dest);
    fs::rename(e.path(), dest);
  }
  fs::remove_all(from);
}

inline int execute(const Job& job, const std::vector<std::string>& argv, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest m;
  m.command_line = argv;
  m.command = job.command;
  m.config_hash = job.config_hash;
  m.inputs = job.inputs;
  m.seeds = job.seeds;
  m.deterministic = deterministic_env();

  fs::create_directories(job.out);
  DirectoryLock lock(job.out);
  std::optional<json> previous;
  if (fs::exists(job.out / kManifestName)) {
    try {
      previous = data::read_json(job.out / kManifestName);
    } catch (const Error&) {
    }
  }
  const fs::path workdir = job.staged ? job.out / (kStagingPrefix + std::to_string(::getpid())) : job.out;
  if (job.staged) {
    fs::remove_all(workdir);
    fs::create_directories(workdir);
  }

  try {
    job.body(workdir);
    m.exit_status = kExitOk;
  } catch (const std::exception& e) {
    m.exit_status = kExitDomain;
    m.error = e.what();
  }
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (m.exit_status != kExitOk) {
    fs::path q = job.out / kQuarantineDir / (job.command + "-" + std::to_string(::getpid()));
    for (int k = 1; fs::exists(q); ++k) q = job.out / kQuarantineDir / (job.command + "-" + std::to_string(::getpid()) + "." + std::to_string(k));
    fs::create_directories(q.parent_path());
    if (job.staged) {
      fs::rename(workdir, q);
    } else {
      fs::create_directories(q);
    }
    m.artifacts = hash_tree(q);
    data::write_json(q / kManifestName, m.to_json());
    err << "error: " << m.error << "\n";
    err << "partial outputs quarantined in " << q.string() << "\n";
    return kExitDomain;
  }

  if (job.staged) merge_into(workdir, job.out);
  m.artifacts = hash_tree(job.out);
  if (previous) {
    const auto& p = *previous;
    m.reproduction = p.value("exit_status", -1) == 0 && p.value("command", "") == m.command &&
                     p.value("config_hash", "") == m.config_hash && p.value("inputs", json()) == m.inputs &&
                     p.value("artifacts", json()) == m.artifacts;
  }
  data::write_json(job.out / kManifestName, m.to_json());
  if (m.reproduction) err << "note: outputs reproduce the previous run in " << job.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------------------------
// Subcommand options

struct DatasetGenOptions {
  std::uint64_t seed = 0;
  int count = 2000;
  int val_count = 0;
  int resolution = 32;
  std::string out;
};

struct EstimatorOptions {
  std::string scenes, out;
  std::uint64_t seed = 0;
  int epochs = 10, hidden = 32;
  double threshold = 0.05;
};

struct TripletOptionsCli {
  std::string scenes, out;
  std::string condition_kind = "depth";
  std::string fg_depth_version = "foreground";
  std::string backend = "oracle";
  int dilation = -1;
};

struct TrainOptions {
  std::string config, stage, out, triplets;
  bool resume = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size, max_examples;
  int stop_after_epochs = -1;
};

struct SampleOptionsCli {
  std::string checkpoint, triplets, out, split = "val";
  int n = 8, steps = 50;
  float cfg_scale = 3.0f;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  std::string checkpoint, suite, out, scenes, estimator, split = "val";
  int n = 50, steps = 50, seeds = 20, lambda_items = 10;
  float cfg_scale = 3.0f;
  std::uint64_t seed = 0;
  std::vector<double> grid{0.5, 1.0, 1.5};
};

inline void required(const std::string& value, const std::string& command, const std::string& field) {
  require(!value.empty(), ErrorKind::config, command + ": " + field + ": required (pass --" + field + ")");
}

// ---------------------------------------------------------------------------------------------
// dataset / triplet

inline Job dataset_gen_job(const DatasetGenOptions& o) {
  required(o.out, "dataset gen", "out");
  data::DatasetSpec spec;
  spec.seed = o.seed;
  spec.count = o.count;
  spec.val_count = o.val_count;
  spec.resolution = o.resolution;
  spec.generator.validate();
  toy::check_resolution(spec.resolution);
  require(o.count >= 0, ErrorKind::config, "dataset gen: count: must be >= 0");
  require(o.val_count >= 0, ErrorKind::config, "dataset gen: val-count: must be >= 0");
  Job j = make_job("dataset gen", o.out);
  j.config_hash = sha1_hex(spec.to_json().dump());
  j.seeds = {{"root", o.seed}, {"scene_seed", "derive_seed(root, \"dataset.scene.<split>\", index)"}};
  j.body = [spec](const fs::path& w) { data::generate_dataset(w, spec); };
  return j;
}

inline Job estimator_job(const EstimatorOptions& o, std::ostream& err) {
  required(o.scenes, "dataset estimator", "scenes");
  required(o.out, "dataset estimator", "out");
  require(fs::exists(fs::path(o.scenes) / "manifest.json"), ErrorKind::input, "dataset estimator: scenes: no manifest.json in " + o.scenes);
  toy::DepthEstimatorConfig cfg;
  cfg.seed = o.seed;
  cfg.epochs = o.epochs;
  cfg.hidden = o.hidden;
  cfg.threshold = o.threshold;
  require(cfg.epochs >= 1, ErrorKind::config, "dataset estimator: epochs: must be >= 1");
  require(cfg.hidden >= 1, ErrorKind::config, "dataset estimator: hidden: must be >= 1");
  Job j = make_job("dataset estimator", o.out);
  j.config_hash = sha1_hex(json{{"seed", cfg.seed}, {"epochs", cfg.epochs}, {"hidden", cfg.hidden}, {"threshold", cfg.threshold}}.dump());
  j.inputs = file_inputs({fs::path(o.scenes) / "manifest.json"});
  j.seeds = {{"root", o.seed}, {"init", derive_seed(o.seed, "depth_estimator.init")},
             {"shuffle", derive_seed(o.seed, "depth_estimator.shuffle")}};
  const fs::path scenes = o.scenes;
  j.body = [cfg, scenes, &err](const fs::path& w) {
    auto rendered = [&](const std::string& split) {
      std::vector<toy::RenderedSample> v;
      for (auto& s : data::load_scenes(scenes, split)) v.push_back(std::move(s.rendered));
      return toy::depth_pairs(v);
    };
    std::vector<double> curve;
    const auto est = toy::train_depth_estimator(rendered("train"), rendered("val"), cfg, &curve);
    for (std::size_t e = 0; e < curve.size(); ++e) err << "[estimator] epoch " << e + 1 << " val mae " << curve[e] << "\n";
    est.save(w / "estimator.ckpt");
    data::write_json(w / "estimator.json", {{"validation_mae", est.validation_mae()}, {"epoch_val_mae", curve}});
  };
  return j;
}

inline Job triplet_job(const TripletOptionsCli& o) {
  required(o.scenes, "triplet build", "scenes");
  required(o.out, "triplet build", "out");
  require(fs::exists(fs::path(o.scenes) / "manifest.json"), ErrorKind::input, "triplet build: scenes: no manifest.json in " + o.scenes);
  triplets::TripletOptions opts;
  opts.condition_kind = triplets::condition_kind_from(o.condition_kind);
  opts.fg_depth_version = triplets::fg_depth_version_from(o.fg_depth_version);
  opts.backend = o.backend;
  require(o.backend == "oracle" || o.backend == "mean-fill", ErrorKind::config,
          "triplet build: backend: expected oracle or mean-fill, got '" + o.backend + "'");
  if (o.dilation >= 0) opts.dilation_radius = o.dilation;
  Job j = make_job("triplet build", o.out);
  j.config_hash = sha1_hex(json{{"condition_kind", o.condition_kind}, {"fg_depth_version", o.fg_depth_version},
                                {"backend", o.backend}, {"dilation", o.dilation}}.dump());
  j.inputs = file_inputs({fs::path(o.scenes) / "manifest.json"});
  const fs::path scenes = o.scenes;
  j.body = [opts, scenes](const fs::path& w) { data::build_triplet_store(scenes, w, opts); };
  return j;
}

// ---------------------------------------------------------------------------------------------
// train

/// Config file plus flag overrides (flags win), validated.
inline train::ExperimentConfig resolve_config(const TrainOptions& o) {
  required(o.config, "train", "config");
  auto cfg = train::ExperimentConfig::load(o.config);
  auto j = cfg.to_json();
  if (!o.out.empty()) j["out"] = fs::absolute(o.out).lexically_normal().string();
  if (!o.triplets.empty()) j["triplets"] = fs::absolute(o.triplets).lexically_normal().string();
  if (o.seed) j["seed"] = *o.seed;
  if (o.max_examples) j["max_examples"] = *o.max_examples;
  for (auto& [name, spec] : j["stages"].items()) {
    if (!o.stage.empty() && name != o.stage) continue;
    if (o.epochs) spec["epochs"] = *o.epochs;
    if (o.batch_size) spec["batch_size"] = *o.batch_size;
  }
  return train::ExperimentConfig::from_json(j);
}

inline Job train_job(const TrainOptions& o, std::ostream& err) {
  const auto cfg = resolve_config(o);
  std::optional<train::Stage> stage;
  if (!o.stage.empty()) stage = train::stage_from(o.stage);
  require(fs::exists(fs::path(cfg.triplets) / "manifest.json"), ErrorKind::input,
          "train: triplets: no triplet store at " + cfg.triplets);
  Job j = make_job("train", cfg.out, false);
  j.config_hash = cfg.hash();
  j.inputs = file_inputs({o.config, fs::path(cfg.triplets) / "manifest.json"});
  j.seeds["root"] = cfg.seed;
  j.seeds["model"] = derive_seed(cfg.seed, "model");
  for (auto s : train::kStageOrder) j.seeds["train." + train::to_string(s)] = derive_seed(cfg.seed, "train." + train::to_string(s));
  const bool resume = o.resume;
  const int stop = o.stop_after_epochs;
  j.body = [cfg, stage, resume, stop, &err](const fs::path&) {
    train::RunOptions run{.deterministic = deterministic_env(), .progress = &err, .stop_after_epochs = stop};
    std::vector<train::StageResult> results;
    if (stage) {
      std::optional<fs::path> from;
      if (resume) {
        const auto p = train::last_checkpoint(cfg, *stage);
        require(fs::exists(p), ErrorKind::state, "train: resume: no checkpoint at " + p.string());
        from = p;
      }
      results.push_back(train::run_stage(cfg, *stage, from, run));
    } else {
      results = train::run_curriculum(cfg, run);
    }
    for (const auto& r : results)
      err << "[" << r.last.stage() << "] steps " << r.steps << " smoothed loss " << r.smoothed_start << " -> "
          << r.smoothed_end << "\n";
  };
  return j;
}

// ---------------------------------------------------------------------------------------------
// Loading trained models for sampling and evaluation

struct LoadedModel {
  ckpt::Checkpoint checkpoint;
  std::unique_ptr<backbone::ControlledUNet<float>> model;
  diffusion::DiffusionSchedule schedule;
  backbone::ForwardOptions forward;
  std::string hash;
};

inline LoadedModel load_model(const fs::path& path) {
  require(fs::exists(path), ErrorKind::input, "checkpoint: no file at " + path.string());
  LoadedModel m;
  m.checkpoint = ckpt::load_checkpoint(path);
  m.model = ckpt::build_from(m.checkpoint);
  ckpt::restore(m.checkpoint, *m.model);
  const auto& cfg = m.checkpoint.meta.value("config", json::object());
  require(cfg.contains("schedule"), ErrorKind::load, path.string() + ": checkpoint carries no noise schedule");
  m.schedule = diffusion::DiffusionSchedule::from_json(cfg["schedule"]);
  const std::string stage = m.checkpoint.stage();
  m.forward = train::forward_options(stage.empty() ? train::Stage::finetune : train::stage_from(stage));
  m.hash = git_blob_hash_file(path);
  return m;
}

inline diffusion::SampleOptions sample_options(int steps, float cfg_scale, std::uint64_t seed) {
  diffusion::SampleOptions s;
  s.steps = steps;
  s.cfg_scale = cfg_scale;
  s.seed = seed;
  return s;
}

inline Job sample_job(const SampleOptionsCli& o) {
  required(o.checkpoint, "sample", "checkpoint");
  required(o.out, "sample", "out");
  require(o.n >= 1, ErrorKind::config, "sample: n: must be >= 1");
  require(o.steps >= 1, ErrorKind::config, "sample: steps: must be >= 1");
  auto loaded = std::make_shared<LoadedModel>(load_model(o.checkpoint));
  std::string triplets = o.triplets;
  if (triplets.empty()) triplets = loaded->checkpoint.meta.value("config", json::object()).value("triplets", "");
  required(triplets, "sample", "triplets");
  Job j = make_job("sample", o.out);
  j.config_hash = sha1_hex(json{{"n", o.n}, {"steps", o.steps}, {"cfg_scale", o.cfg_scale}, {"split", o.split}}.dump());
  j.inputs = file_inputs({o.checkpoint, fs::path(triplets) / "manifest.json"});
  j.seeds = {{"root", o.seed}, {"noise", derive_seed(o.seed, "sample")}};
  const auto opts = o;
  j.body = [loaded, opts, triplets](const fs::path& w) {
    const auto& unet = loaded->model->config();
    const auto vocab = embed::Vocabulary::load(fs::path(triplets) / "vocab.json");
    const embed::ImageEmbedder embedder(unet.embedding_dim);
    const auto ts = data::load_triplets(triplets, opts.split, opts.n);
    require(!ts.empty(), ErrorKind::input, "sample: split '" + opts.split + "' is empty");
    std::vector<ConditionSet> conds;
    for (const auto& t : ts) conds.push_back(train::condition_set(t, vocab, embedder, unet.text_tokens));
    const auto images = diffusion::ddim_sample(*loaded->model, conds, loaded->schedule,
                                               sample_options(opts.steps, opts.cfg_scale, derive_seed(opts.seed, "sample")),
                                               loaded->forward);
    std::vector<Image> tiles;
    json listing = json::array();
    for (int n = 0; n < images.dim(0); ++n) {
      const auto one = batch_item(images, n);
      const Image im = one.reshaped({one.dim(1), one.dim(2), one.dim(3)});
      const std::string name = "sample_" + ts[n].id + ".png";
      write_png(w / name, im, 8);
      listing.push_back({{"id", ts[n].id}, {"file", name}});
      tiles.push_back(ts[n].source);
      tiles.push_back(im);
    }
    write_png(w / "grid.png", eval::image_grid(tiles, 2), 8);
    data::write_json(w / "samples.json", {{"samples", listing}, {"steps", opts.steps}, {"cfg_scale", opts.cfg_scale}});
  };
  return j;
}

// ---------------------------------------------------------------------------------------------
// eval

inline void add_stat(eval::EvalReport& r, const std::string& name, const std::vector<double>& xs) {
  r.metrics[name] = eval::summarize(xs);
}

/// Scene dataset behind a triplet store, as recorded in its manifest.
inline std::string scenes_of_triplets(const std::string& triplets) {
  if (triplets.empty() || !fs::exists(fs::path(triplets) / "manifest.json")) return {};
  return data::read_json(fs::path(triplets) / "manifest.json").value("source", json::object()).value("path", "");
}

inline std::vector<Image> interleave(const std::vector<Image>& a, const std::vector<Image>& b, std::size_t limit) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < std::min({a.size(), b.size(), limit}); ++i) {
    out.push_back(a[i]);
    out.push_back(b[i]);
  }
  return out;
}

inline Job eval_job(const EvalOptions& o, std::ostream& err) {
  required(o.checkpoint, "eval", "checkpoint");
  required(o.suite, "eval", "suite");
  required(o.out, "eval", "out");
  require(o.n >= 1, ErrorKind::config, "eval: n: must be >= 1");
  const bool oracle = o.checkpoint == "oracle";
  std::shared_ptr<LoadedModel> loaded;
  backbone::UNetConfig unet;
  std::string scenes = o.scenes;
  if (!oracle) {
    loaded = std::make_shared<LoadedModel>(load_model(o.checkpoint));
    unet = loaded->model->config();
    if (scenes.empty())
      scenes = scenes_of_triplets(loaded->checkpoint.meta.value("config", json::object()).value("triplets", ""));
  }
  if (o.suite != "ordering") required(scenes, "eval", "scenes");
  if (o.suite == "recon") required(o.estimator, "eval", "estimator");
  if (o.suite == "lambda-sweep") require(o.seeds >= 1, ErrorKind::config, "eval: seeds: must be >= 1");

  fs::path out = o.out, report_name = "report.json";
  if (out.extension() == ".json") {
    report_name = out.filename();
    out = out.has_parent_path() ? out.parent_path() : fs::path(".");
  }
  Job j = make_job("eval " + o.suite, out);
  const json settings{{"suite", o.suite}, {"n", o.n},           {"steps", o.steps},   {"cfg_scale", o.cfg_scale},
                      {"split", o.split}, {"seeds", o.seeds},   {"grid", o.grid},     {"lambda_items", o.lambda_items}};
  j.config_hash = sha1_hex(settings.dump());
  std::vector<fs::path> inputs;
  if (!oracle) inputs.push_back(o.checkpoint);
  if (!scenes.empty()) inputs.push_back(fs::path(scenes) / "manifest.json");
  if (!o.estimator.empty()) inputs.push_back(o.estimator);
  j.inputs = file_inputs(inputs);
  j.seeds = {{"root", o.seed}, {"chunk_noise", "derive_seed(root, \"eval.chunk\", chunk)"},
             {"lambda", "derive_seed(root, \"eval.lambda\", s)"}, {"occlusion_scenes", "derive_seed(root, \"eval.occlusion\", attempt)"}};
  const auto opts = o;
  j.body = [loaded, unet, scenes, opts, oracle, settings, report_name, &err](const fs::path& w) {
    const eval::Renderer render =
        oracle ? eval::oracle_renderer()
               : eval::model_renderer(*loaded->model, loaded->schedule, sample_options(opts.steps, opts.cfg_scale, 0),
                                      loaded->forward);
    eval::EvalReport report;
    report.suite = opts.suite;
    report.checkpoint = oracle ? "oracle" : loaded->hash;
    report.config = settings;
    int expected = opts.n;
    auto items = [&](int n) { return eval::load_items(scenes, opts.split, n, unet); };

    if (opts.suite == "recon") {
      const auto est = toy::DepthEstimator::load(opts.estimator);
      report.config["estimator_validation_mae"] = est.validation_mae();
      const auto its = items(opts.n);
      const auto r = eval::reconstruction(its, render, est, opts.seed);
      report.metrics["ssim"] = r.ssim;
      report.metrics["depth_mae"] = r.depth_mae;
      report.records = r.records;
      write_png(w / "grid.png", eval::image_grid(interleave(eval::truths_of(its), r.generated, 16), 8), 8);
    } else if (opts.suite == "ordering") {
      eval::OcclusionSpec spec;
      spec.seed = opts.seed;
      spec.count = opts.n;
      spec.resolution = unet.resolution;
      const auto vocab = scenes.empty() ? embed::Vocabulary::toy_default() : embed::Vocabulary::load(fs::path(scenes) / "vocab.json");
      const auto pairs = eval::make_occlusion_pairs(spec, vocab, unet);
      const auto r = eval::occlusion_accuracy(pairs, render, opts.seed, &err);
      std::vector<double> hits;
      for (const auto& rec : r.records) hits.push_back(rec["correct"].get<bool>() ? 1.0 : 0.0);
      add_stat(report, "occlusion_accuracy", hits);
      report.records = r.records;
      report.config["skipped"] = r.skipped;
      expected = r.n;
      write_png(w / "grid.png", eval::image_grid(interleave(eval::truths_of(pairs), r.generated, 16), 8), 8);
    } else if (opts.suite == "semantics") {
      const auto its = items(opts.n);
      const auto r = eval::semantic_pairing(its, render, opts.seed);
      report.metrics["avg"] = r.correct.avg;
      report.metrics["fg_sim"] = r.correct.fg_sim;
      report.metrics["bg_sim"] = r.correct.bg_sim;
      report.metrics["swapped_avg"] = r.swapped.avg;
      report.metrics["margin"] = {r.margin, 0, r.correct.avg.n};
      report.records = r.records;
      report.config["fg_pixels_changed_at_lambda_bg_0"] = eval::fg_pixels_changed_by_bg_exemplar(its, render, opts.seed);
      write_png(w / "grid.png", eval::image_grid(interleave(eval::truths_of(its), r.generated, 16), 8), 8);
    } else {
      const auto its = items(std::min(opts.n, opts.lambda_items));
      const auto sweep = eval::lambda_sweep(its, render, opts.grid, opts.seeds, opts.seed);
      expected = static_cast<int>(its.size()) * opts.seeds;
      for (const auto& row : sweep.rows) {
        std::ostringstream key;
        key << row.lambda_bg;
        report.metrics["bg_sim@" + key.str()] = row.score.bg_sim;
        report.metrics["fg_sim@" + key.str()] = row.score.fg_sim;
        report.records.push_back({{"lambda_bg", row.lambda_bg}, {"fg_sim", row.score.fg_sim.mean},
                                  {"bg_sim", row.score.bg_sim.mean}, {"avg", row.score.avg.mean}});
      }
      report.config["bg_non_decreasing"] = sweep.bg_non_decreasing();
      std::ofstream(w / "lambda_sweep.csv") << sweep.csv();
      std::vector<Image> tiles;
      for (const auto& imgs : sweep.images)
        for (std::size_t i = 0; i < std::min<std::size_t>(imgs.size(), 8); ++i) tiles.push_back(imgs[i]);
      write_png(w / "grid.png", eval::image_grid(tiles, 8), 8);
    }
    report.validate(expected);
    data::write_json(w / report_name, report.to_json());
    std::ofstream(w / "records.csv") << report.records_csv();
    for (const auto& [name, s] : report.metrics) err << "[eval " << opts.suite << "] " << name << " " << s.mean << " (n " << s.n << ")\n";
  };
  return j;
}

// ---------------------------------------------------------------------------------------------
// Entry point

/// Parses argv and runs one subcommand. Exit codes: 0 success, 1 domain error, 2 usage error.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Toy-scale compositional conditioning for diffusion models", "cnc"};
  app.require_subcommand(1);

  auto* dataset = app.add_subcommand("dataset", "Scene datasets and the depth estimator");
  dataset->require_subcommand(1);
  DatasetGenOptions gen;
  auto* gen_cmd = dataset->add_subcommand("gen", "Render a procedural scene dataset");
  gen_cmd->add_option("--seed", gen.seed, "Root seed");
  gen_cmd->add_option("--count", gen.count, "Training scenes");
  gen_cmd->add_option("--val-count", gen.val_count, "Held-out scenes");
  gen_cmd->add_option("--resolution", gen.resolution, "Pixel side");
  gen_cmd->add_option("--out", gen.out, "Dataset directory");
  EstimatorOptions est;
  auto* est_cmd = dataset->add_subcommand("estimator", "Train the frozen depth estimator");
  est_cmd->add_option("--scenes", est.scenes, "Scene dataset directory");
  est_cmd->add_option("--out", est.out, "Output directory (estimator.ckpt)");
  est_cmd->add_option("--seed", est.seed);
  est_cmd->add_option("--epochs", est.epochs);
  est_cmd->add_option("--hidden", est.hidden);
  est_cmd->add_option("--threshold", est.threshold, "Maximum acceptable validation MAE");

  auto* triplet = app.add_subcommand("triplet", "Triplet stores");
  triplet->require_subcommand(1);
  TripletOptionsCli tri;
  auto* build_cmd = triplet->add_subcommand("build", "Decompose scenes into (source, foreground, background) triplets");
  build_cmd->add_option("--scenes", tri.scenes, "Scene dataset directory");
  build_cmd->add_option("--out", tri.out, "Triplet store directory");
  build_cmd->add_option("--condition-kind", tri.condition_kind)->check(CLI::IsMember({"depth", "edge"}));
  build_cmd->add_option("--fg-depth-version", tri.fg_depth_version)
      ->check(CLI::IsMember({"scene", "foreground", "masked-foreground"}));
  build_cmd->add_option("--dilation", tri.dilation, "Mask dilation radius (default ceil(0.03 * side))");
  build_cmd->add_option("--backend", tri.backend, "Inpainting backend")->check(CLI::IsMember({"oracle", "mean-fill"}));

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Run the staged training curriculum");
  train_cmd->add_option("--config", tr.config, "Experiment config (JSON)");
  train_cmd->add_option("--stage", tr.stage, "Run only this stage")->check(CLI::IsMember({"prior", "local", "global", "finetune"}));
  train_cmd->add_flag("--resume", tr.resume, "Continue the stage from its last checkpoint");
  train_cmd->add_option("--out", tr.out, "Override: run directory");
  train_cmd->add_option("--triplets", tr.triplets, "Override: triplet store");
  train_cmd->add_option("--seed", tr.seed, "Override: root seed");
  train_cmd->add_option("--epochs", tr.epochs, "Override: epochs of the selected stage(s)");
  train_cmd->add_option("--batch-size", tr.batch_size, "Override: batch size of the selected stage(s)");
  train_cmd->add_option("--max-examples", tr.max_examples, "Override: cap on training triplets");
  train_cmd->add_option("--stop-after-epochs", tr.stop_after_epochs, "End this invocation after N epochs (resumable)");

  SampleOptionsCli sm;
  auto* sample_cmd = app.add_subcommand("sample", "DDIM-sample from a checkpoint");
  sample_cmd->add_option("--checkpoint", sm.checkpoint);
  sample_cmd->add_option("--triplets", sm.triplets, "Condition source (default: the store the checkpoint trained on)");
  sample_cmd->add_option("--split", sm.split);
  sample_cmd->add_option("--n", sm.n);
  sample_cmd->add_option("--steps", sm.steps);
  sample_cmd->add_option("--cfg-scale", sm.cfg_scale);
  sample_cmd->add_option("--seed", sm.seed);
  sample_cmd->add_option("--out", sm.out);

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluation suites");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint, or 'oracle' for the analytic renderer");
  eval_cmd->add_option("--suite", ev.suite)->check(CLI::IsMember({"recon", "ordering", "semantics", "lambda-sweep"}));
  eval_cmd->add_option("--n", ev.n, "Held-out items");
  eval_cmd->add_option("--out", ev.out, "Output directory, or a report .json path");
  eval_cmd->add_option("--scenes", ev.scenes, "Scene dataset (default: source of the checkpoint's triplet store)");
  eval_cmd->add_option("--estimator", ev.estimator, "Depth estimator checkpoint (recon)");
  eval_cmd->add_option("--split", ev.split);
  eval_cmd->add_option("--steps", ev.steps);
  eval_cmd->add_option("--cfg-scale", ev.cfg_scale);
  eval_cmd->add_option("--seed", ev.seed);
  eval_cmd->add_option("--seeds", ev.seeds, "Sampling seeds per lambda (lambda-sweep)");
  eval_cmd->add_option("--lambda-items", ev.lambda_items, "Items per seed (lambda-sweep)");
  eval_cmd->add_option("--grid", ev.grid, "lambda_bg values (lambda-sweep)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::vector<std::string> args(argv, argv + argc);
  try {
    Job job;
    if (gen_cmd->parsed()) job = dataset_gen_job(gen);
    else if (est_cmd->parsed()) job = estimator_job(est, err);
    else if (build_cmd->parsed()) job = triplet_job(tri);
    else if (train_cmd->parsed()) job = train_job(tr, err);
    else if (sample_cmd->parsed()) job = sample_job(sm);
    else job = eval_job(ev, err);
    return execute(job, args, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace cnc::cli
