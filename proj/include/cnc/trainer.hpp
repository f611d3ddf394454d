#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnc/backbone.hpp"
#include "cnc/checkpoint.hpp"
#include "cnc/dataset.hpp"
#include "cnc/diffusion.hpp"
#include "cnc/embedders.hpp"

namespace cnc::train {

namespace fs = std::filesystem;

enum class Stage { prior, local, global, finetune };

inline const std::vector<Stage> kStageOrder{Stage::prior, Stage::local, Stage::global, Stage::finetune};

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::prior: return "prior";
    case Stage::local: return "local";
    case Stage::global: return "global";
    case Stage::finetune: return "finetune";
  }
  return "?";
}

inline Stage stage_from(const std::string& s) {
  for (Stage st : kStageOrder)
    if (to_string(st) == s) return st;
  fail(ErrorKind::config, "unknown stage '" + s + "' (expected prior, local, global or finetune)");
}

inline std::optional<Stage> prerequisite(Stage s) {
  switch (s) {
    case Stage::prior: return std::nullopt;
    case Stage::local: return Stage::prior;
    case Stage::global: return Stage::local;
    case Stage::finetune: return Stage::global;
  }
  return std::nullopt;
}

struct StageSpec {
  int epochs = 1;
  int batch_size = 16;
  double lr = 1e-4;
  diffusion::DropoutConfig dropout;

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"dropout", dropout.to_json()}};
  }
};

/// Everything a staged run depends on. Serialized as one JSON document.
struct ExperimentConfig {
  std::string triplets;  ///< triplet store root
  std::string out;       ///< run directory
  std::uint64_t seed = 0;
  int max_examples = -1;  ///< -1: whole training split
  backbone::UNetConfig unet;
  diffusion::DiffusionSchedule schedule;
  std::map<Stage, StageSpec> stages{{Stage::prior, {20, 16, 3e-4, {}}},
                                    {Stage::local, {15, 16, 1e-4, {}}},
                                    {Stage::global, {15, 16, 1e-4, {}}},
                                    {Stage::finetune, {5, 16, 1e-5, {}}}};
  double grad_clip = 1.0;
  bool global_trains_clone = false;  ///< global stage also updates E' and C'
  std::string condition_kind = "depth";

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::object();
    for (const auto& [s, spec] : stages) st[to_string(s)] = spec.to_json();
    return {{"triplets", triplets},       {"out", out},
            {"seed", seed},               {"max_examples", max_examples},
            {"unet", unet.to_json()},     {"schedule", schedule.to_json()},
            {"stages", st},               {"grad_clip", grad_clip},
            {"global_trains_clone", global_trains_clone}, {"condition_kind", condition_kind}};
  }

  /// The config minus its output location, as stored in checkpoints.
  nlohmann::json snapshot() const {
    auto j = to_json();
    j.erase("out");
    return j;
  }

  /// Content hash of the training-relevant fields.
  std::string hash() const { return sha1_hex(snapshot().dump()); }

  void validate() const {
    unet.validate();
    require(!triplets.empty(), ErrorKind::config, "triplets: path is required");
    require(!out.empty(), ErrorKind::config, "out: path is required");
    require(grad_clip > 0, ErrorKind::config, "grad_clip: must be positive");
    require(unet.timesteps == schedule.steps, ErrorKind::config, "schedule.steps: must equal unet.timesteps");
    triplets::condition_kind_from(condition_kind);
    for (const auto& [s, spec] : stages) {
      const std::string at = "stages." + to_string(s) + ".";
      require(spec.epochs >= 0, ErrorKind::config, at + "epochs: must be >= 0");
      require(spec.batch_size >= 1, ErrorKind::config, at + "batch_size: must be >= 1");
      require(spec.lr > 0, ErrorKind::config, at + "lr: must be positive");
      spec.dropout.validate();
    }
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
      c.triplets = j.value("triplets", c.triplets);
      c.out = j.value("out", c.out);
      c.seed = j.value("seed", c.seed);
      c.max_examples = j.value("max_examples", c.max_examples);
      if (j.contains("unet")) c.unet = backbone::UNetConfig::from_json(j["unet"]);
      if (j.contains("schedule")) c.schedule = diffusion::DiffusionSchedule::from_json(j["schedule"]);
      if (j.contains("stages")) {
        for (const auto& [name, sj] : j["stages"].items()) {
          const Stage s = stage_from(name);
          StageSpec& spec = c.stages[s];
          spec.epochs = sj.value("epochs", spec.epochs);
          spec.batch_size = sj.value("batch_size", spec.batch_size);
          spec.lr = sj.value("lr", spec.lr);
          if (sj.contains("dropout")) spec.dropout = diffusion::DropoutConfig::from_json(sj["dropout"]);
        }
      }
      c.grad_clip = j.value("grad_clip", c.grad_clip);
      c.global_trains_clone = j.value("global_trains_clone", c.global_trains_clone);
      c.condition_kind = j.value("condition_kind", c.condition_kind);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config, std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
  }

  /// Relative `triplets` / `out` paths resolve against the config file's directory.
  static ExperimentConfig load(const fs::path& path) {
    auto j = data::read_json(path);
    const fs::path base = fs::absolute(path).parent_path();
    for (const char* key : {"triplets", "out"})
      if (j.contains(key) && j[key].is_string() && fs::path(j[key].get<std::string>()).is_relative())
        j[key] = (base / j[key].get<std::string>()).lexically_normal().string();
    return from_json(j);
  }
};

/// Parameter groups each stage may change.
inline std::set<std::string> trainable_groups(Stage s, const ExperimentConfig& cfg) {
  using namespace backbone;
  switch (s) {
    case Stage::prior: return {kFrozen};
    case Stage::local: return {kClone, kLocal};
    case Stage::global:
      if (cfg.global_trains_clone) return {kGlobal, kClone};
      return {kGlobal};
    case Stage::finetune: return {kClone, kLocal, kGlobal};
  }
  return {};
}

inline backbone::ForwardOptions forward_options(Stage s) { return {.use_control = s != Stage::prior}; }

// ---------------------------------------------------------------------------------------------
// Data

/// Conditions of a triplet: its maps and mask, embeddings of I_f and I_b, tokenized prompt.
inline ConditionSet condition_set(const triplets::ImageTriplet& t, const embed::Vocabulary& vocab,
                                  const embed::ImageEmbedder& embedder, int text_tokens) {
  ConditionSet c;
  c.fg_condition = t.fg_condition;
  c.bg_condition = t.bg_condition;
  c.fg_embedding = embedder(t.foreground).vector;
  c.bg_embedding = embedder(t.background).vector;
  c.text_ids = embed::tokenize(t.prompt, vocab, text_tokens);
  c.mask = t.mask;
  return c;
}

inline std::vector<diffusion::TrainingExample> make_examples(const std::vector<triplets::ImageTriplet>& ts,
                                                             const embed::Vocabulary& vocab,
                                                             const backbone::UNetConfig& unet) {
  const embed::ImageEmbedder embedder(unet.embedding_dim);
  const backbone::LatentCodec<float> codec{unet.codec};
  std::vector<diffusion::TrainingExample> out;
  for (const auto& t : ts) {
    require(height(t.source) == unet.resolution, ErrorKind::config,
            "triplet " + t.id + " resolution " + std::to_string(height(t.source)) + " != unet.resolution " +
                std::to_string(unet.resolution));
    const int P = unet.resolution;
    const auto z = codec.encode(t.source.reshaped({1, 3, P, P}));
    out.push_back({z.reshaped({z.dim(1), z.dim(2), z.dim(3)}), condition_set(t, vocab, embedder, unet.text_tokens)});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Stage execution

struct RunOptions {
  bool deterministic = false;  ///< logs carry wall_time 0 so reruns are byte-identical
  std::ostream* progress = nullptr;
  int stop_after_epochs = -1;  ///< end this invocation early (a resumable interruption)
};

struct StageResult {
  ckpt::Checkpoint last;
  fs::path last_path, best_path, log_path;
  long steps = 0;
  double smoothed_start = 0, smoothed_end = 0;
  double wall_seconds = 0;
};

inline fs::path stage_dir(const ExperimentConfig& cfg, Stage s) { return fs::path(cfg.out) / to_string(s); }
inline fs::path last_checkpoint(const ExperimentConfig& cfg, Stage s) { return stage_dir(cfg, s) / "last.ckpt"; }

struct LogRecord {
  long step;
  double loss;
};

inline std::vector<LogRecord> read_log(const fs::path& path) {
  std::vector<LogRecord> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("step").get<long>(), j.at("loss").get<double>()});
    }
  return out;
}

/// Means of the first and last 20% of logged losses.
inline std::pair<double, double> smoothed_endpoints(const std::vector<LogRecord>& log, double fraction = 0.2) {
  if (log.empty()) return {0, 0};
  const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(log.size())));
  double a = 0, b = 0;
  for (std::size_t i = 0; i < w; ++i) {
    a += log[i].loss;
    b += log[log.size() - 1 - i].loss;
  }
  return {a / static_cast<double>(w), b / static_cast<double>(w)};
}

inline nlohmann::json group_hashes(const backbone::ControlledUNet<float>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& g : m.params().groups()) j[g] = backbone::group_hash(m.params(), g);
  return j;
}

/// Runs one curriculum stage. Fresh stages start from the prerequisite stage's last checkpoint;
/// `resume` continues a partially trained run of the same stage from an epoch boundary.
inline StageResult run_stage(const ExperimentConfig& cfg, Stage stage, const std::optional<fs::path>& resume = {},
                             const RunOptions& run = {}) {
  cfg.validate();
  const auto t_begin = std::chrono::steady_clock::now();
  const StageSpec& spec = cfg.stages.at(stage);
  const fs::path dir = stage_dir(cfg, stage);

  auto model = backbone::build_unet<float>(cfg.unet, derive_seed(cfg.seed, "model"));
  const auto groups = trainable_groups(stage, cfg);
  for (const auto& g : groups)
    require(model->params().groups().count(g) > 0, ErrorKind::config, "stage group '" + g + "' not in model");
  model->params().set_trainable(groups);
  nn::Adam<float> opt(spec.lr);
  std::mt19937_64 rng(derive_seed(cfg.seed, "train." + to_string(stage)));

  nlohmann::json inherited = nlohmann::json::object();
  int start_epoch = 0;
  long step = 0;
  if (resume) {
    const auto c = ckpt::load_checkpoint(*resume);
    require(c.stage() == to_string(stage), ErrorKind::staging,
            "resume checkpoint is from stage '" + c.stage() + "', not '" + to_string(stage) + "'");
    ckpt::restore(c, *model, &opt, &rng);
    start_epoch = c.meta.value("epoch", 0);
    step = c.step();
    inherited = c.meta.value("pretrain_frozen_hash", nlohmann::json());
  } else if (auto pre = prerequisite(stage)) {
    const fs::path p = last_checkpoint(cfg, *pre);
    require(fs::exists(p), ErrorKind::staging,
            "stage '" + to_string(stage) + "' requires a completed '" + to_string(*pre) + "' stage (" + p.string() + " missing)");
    const auto c = ckpt::load_checkpoint(p);
    require(c.meta.value("complete", false), ErrorKind::staging, p.string() + " is not a completed stage checkpoint");
    ckpt::restore(c, *model);
    inherited = c.meta.value("pretrain_frozen_hash", nlohmann::json());
    if (stage == Stage::local) model->clone_control();  // E', C' start from the trained prior
  }
  opt.set_lr(spec.lr);

  const auto frozen_at_start = group_hashes(*model);

  const fs::path triplet_root(cfg.triplets);
  const auto vocab = embed::Vocabulary::load(triplet_root / "vocab.json");
  require(vocab.size() <= cfg.unet.vocab_size, ErrorKind::config,
          "unet.vocab_size: " + std::to_string(cfg.unet.vocab_size) + " < vocabulary size " + std::to_string(vocab.size()));
  const auto store = data::read_json(triplet_root / "manifest.json");
  const std::string kind = store.at("options").value("condition_kind", "depth");
  require(kind == cfg.condition_kind, ErrorKind::config,
          "condition_kind: config says " + cfg.condition_kind + ", triplet store holds " + kind);
  const auto examples = make_examples(data::load_triplets(triplet_root, "train", cfg.max_examples), vocab, cfg.unet);
  require(!examples.empty(), ErrorKind::input, "no training examples in " + triplet_root.string());

  fs::create_directories(dir);
  const fs::path log_path = dir / "log.jsonl";
  {
    // Keep only records up to the resumed step; a fresh stage truncates.
    std::vector<std::string> keep;
    if (resume && fs::exists(log_path)) {
      std::ifstream in(log_path);
      std::string line;
      while (std::getline(in, line))
        if (!line.empty() && nlohmann::json::parse(line).at("step").get<long>() <= step) keep.push_back(line);
    }
    std::ofstream out(log_path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
  }
  std::ofstream log(log_path, std::ios::app);

  const auto pred = diffusion::predictor(*model, forward_options(stage));
  const std::size_t B = static_cast<std::size_t>(spec.batch_size);
  std::vector<std::size_t> order(examples.size());
  double best = std::numeric_limits<double>::infinity();
  if (resume) best = ckpt::load_checkpoint(*resume).meta.value("best_epoch_loss", best);

  auto meta_for = [&](int epoch, bool complete, double epoch_loss) {
    nlohmann::json m{{"stage", to_string(stage)},
                     {"step", step},
                     {"epoch", epoch},
                     {"complete", complete},
                     {"epoch_loss", epoch_loss},
                     {"best_epoch_loss", best},
                     {"config", cfg.snapshot()},
                     {"config_hash", cfg.hash()},
                     {"trainable_groups", groups},
                     {"group_hashes", group_hashes(*model)}};
    m["pretrain_frozen_hash"] = stage == Stage::prior ? nlohmann::json(backbone::group_hash(model->params(), backbone::kFrozen))
                                                      : inherited;
    return m;
  };

  StageResult result;
  result.log_path = log_path;
  result.last_path = dir / "last.ckpt";
  result.best_path = dir / "best.ckpt";
  ckpt::Checkpoint last;
  for (int epoch = start_epoch; epoch < spec.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0;
    long epoch_steps = 0;
    for (std::size_t s = 0; s < order.size(); s += B) {
      std::vector<diffusion::TrainingExample> batch;
      for (std::size_t k = s; k < std::min(order.size(), s + B); ++k) batch.push_back(examples[order[k]]);
      model->params().zero_grad();
      auto loss = diffusion::loss_step<float>(pred, batch, cfg.schedule, spec.dropout, rng, vocab.pad_id());
      const double lv = loss.value()[0];
      require(std::isfinite(lv), ErrorKind::numeric, "non-finite loss at step " + std::to_string(step));
      backward(loss);
      nn::clip_grad_norm(model->params(), cfg.grad_clip);
      opt.step(model->params());
      ++step;
      epoch_sum += lv;
      ++epoch_steps;
      const double wall = run.deterministic ? 0.0
                                            : std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
      log << nlohmann::json{{"step", step}, {"stage", to_string(stage)}, {"loss", lv}, {"lr", opt.lr()}, {"wall_time", wall}}.dump()
          << '\n';
    }
    log.flush();
    const double epoch_loss = epoch_sum / static_cast<double>(std::max<long>(1, epoch_steps));
    const bool improved = epoch_loss < best;
    if (improved) best = epoch_loss;
    last = ckpt::capture(*model, &opt, &rng, meta_for(epoch + 1, epoch + 1 == spec.epochs, epoch_loss));
    ckpt::save_checkpoint(last, result.last_path);
    if (improved) ckpt::save_checkpoint(last, result.best_path);
    if (run.progress)
      *run.progress << "[" << to_string(stage) << "] epoch " << epoch + 1 << "/" << spec.epochs << " loss " << epoch_loss
                    << " steps " << step << '\n';
    if (run.stop_after_epochs >= 0 && epoch + 1 - start_epoch >= run.stop_after_epochs) break;
  }
  if (spec.epochs == 0 || start_epoch >= spec.epochs) {
    last = ckpt::capture(*model, &opt, &rng, meta_for(spec.epochs, true, 0.0));
    ckpt::save_checkpoint(last, result.last_path);
    if (!fs::exists(result.best_path)) ckpt::save_checkpoint(last, result.best_path);
  }

  // Freeze contract: groups outside the stage's trainable set are bit-stable.
  const auto after = group_hashes(*model);
  for (const auto& [g, h] : frozen_at_start.items())
    if (!groups.count(g))
      require(after[g] == h, ErrorKind::state, "group '" + g + "' changed during stage " + to_string(stage));

  result.last = std::move(last);
  result.steps = step;
  std::tie(result.smoothed_start, result.smoothed_end) = smoothed_endpoints(read_log(log_path));
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  data::write_json(dir / "summary.json",
                   {{"stage", to_string(stage)}, {"steps", result.steps}, {"smoothed_start", result.smoothed_start},
                    {"smoothed_end", result.smoothed_end},
                    {"wall_seconds", run.deterministic ? 0.0 : result.wall_seconds}, {"config_hash", cfg.hash()}});
  return result;
}

/// Runs every stage from `first` onward, skipping stages whose completed checkpoint already
/// carries the same config hash.
inline std::vector<StageResult> run_curriculum(const ExperimentConfig& cfg, const RunOptions& run = {},
                                               Stage first = Stage::prior) {
  std::vector<StageResult> out;
  bool started = false;
  for (Stage s : kStageOrder) {
    if (s == first) started = true;
    if (!started) continue;
    const fs::path p = last_checkpoint(cfg, s);
    if (fs::exists(p)) {
      const auto c = ckpt::load_checkpoint(p);
      if (c.meta.value("complete", false) && c.meta.value("config_hash", "") == cfg.hash()) {
        if (run.progress) *run.progress << "[" << to_string(s) << "] reusing completed checkpoint\n";
        continue;
      }
      if (c.meta.value("config_hash", "") == cfg.hash() && c.meta.value("epoch", 0) > 0) {
        out.push_back(run_stage(cfg, s, p, run));
        continue;
      }
    }
    out.push_back(run_stage(cfg, s, std::nullopt, run));
  }
  return out;
}

/// Loads the model saved in a checkpoint (architecture from its recorded config).
inline std::unique_ptr<backbone::ControlledUNet<float>> load_model(const fs::path& path) {
  const auto c = ckpt::load_checkpoint(path);
  auto model = ckpt::build_from(c);
  ckpt::restore(c, *model);
  return model;
}

}  // namespace cnc::train
