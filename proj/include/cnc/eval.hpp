#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnc/dataset.hpp"
#include "cnc/depth_estimator.hpp"
#include "cnc/diffusion.hpp"
#include "cnc/trainer.hpp"

namespace cnc::eval {

namespace fs = std::filesystem;

inline constexpr int kReportSchemaVersion = 1;

struct Stat {
  double mean = 0;
  double std = 0;  ///< population standard deviation
  int n = 0;
};

/// Two-pass mean and standard deviation.
inline Stat summarize(const std::vector<double>& xs) {
  Stat s;
  s.n = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return s;
}

inline nlohmann::json to_json(const Stat& s) { return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; }

// ---------------------------------------------------------------------------------------------
// Image metrics

/// Luma plane (0.299, 0.587, 0.114) of an RGB image; single-channel input is passed through.
inline std::vector<double> luma(const Image& im) {
  const std::size_t hw = static_cast<std::size_t>(height(im)) * width(im);
  std::vector<double> y(hw);
  if (channels(im) == 1) {
    for (std::size_t p = 0; p < hw; ++p) y[p] = im[p];
    return y;
  }
  require(channels(im) == 3, ErrorKind::shape, "ssim expects 1- or 3-channel images");
  for (std::size_t p = 0; p < hw; ++p) y[p] = 0.299 * im[p] + 0.587 * im[hw + p] + 0.114 * im[2 * hw + p];
  return y;
}

/// Mean SSIM over valid 7x7 Gaussian windows (sigma 1.5), data range 1, K1 = 0.01, K2 = 0.03.
inline double ssim(const Image& a, const Image& b) {
  require(a.same_shape(b), ErrorKind::shape, "ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  constexpr int kWin = 7;
  constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const int H = height(a), W = width(a);
  require(H >= kWin && W >= kWin, ErrorKind::shape, "ssim: images smaller than the 7x7 window");
  double w[kWin];
  double total = 0;
  for (int i = 0; i < kWin; ++i) total += w[i] = std::exp(-0.5 * (i - 3) * (i - 3) / (kSigma * kSigma));
  for (double& v : w) v /= total;
  const auto x = luma(a), y = luma(b);
  double sum = 0;
  int count = 0;
  for (int r = 0; r + kWin <= H; ++r)
    for (int c = 0; c + kWin <= W; ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          const double g = w[i] * w[j];
          const std::size_t p = static_cast<std::size_t>(r + i) * W + (c + j);
          mx += g * x[p];
          my += g * y[p];
          sxx += g * x[p] * x[p];
          syy += g * y[p] * y[p];
          sxy += g * x[p] * y[p];
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      sum += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
      ++count;
    }
  return sum / count;
}

/// Mean |estimator(generated) - gt_depth| in the toy [0, 1] depth convention.
inline double depth_mae(const Image& generated, const Image& gt_depth, const toy::DepthEstimator& estimator) {
  require(estimator.trained(), ErrorKind::state, "depth_mae needs a trained depth estimator");
  return toy::mean_abs_error(estimator.predict(generated), gt_depth);
}

// ---------------------------------------------------------------------------------------------
// Generators

/// Produces one image per condition set. `truths` carries the reference renders (used only by the
/// oracle); `seed` selects the sampling noise.
using Renderer =
    std::function<std::vector<Image>(std::span<const ConditionSet> conds, std::span<const Image> truths, std::uint64_t seed)>;

/// The analytic renderer: returns the ground truth. Calibrates each suite's upper bound.
inline Renderer oracle_renderer() {
  return [](std::span<const ConditionSet> conds, std::span<const Image> truths, std::uint64_t) {
    require(conds.size() == truths.size(), ErrorKind::argument, "oracle renderer needs one truth per condition set");
    return std::vector<Image>(truths.begin(), truths.end());
  };
}

/// DDIM sampling with a trained model, in fixed-size chunks (chunk c uses seed stream c).
inline Renderer model_renderer(const backbone::ControlledUNet<float>& model, const diffusion::DiffusionSchedule& schedule,
                               diffusion::SampleOptions options, backbone::ForwardOptions forward = {}, int chunk = 16) {
  return [&model, schedule, options, forward, chunk](std::span<const ConditionSet> conds, std::span<const Image>,
                                                       std::uint64_t seed) {
    std::vector<Image> out;
    for (std::size_t s = 0, c = 0; s < conds.size(); s += static_cast<std::size_t>(chunk), ++c) {
      auto opts = options;
      opts.seed = derive_seed(seed, "eval.chunk", c);
      const auto part = conds.subspan(s, std::min(conds.size() - s, static_cast<std::size_t>(chunk)));
      const auto images = diffusion::ddim_sample(model, part, schedule, opts, forward);
      for (int n = 0; n < images.dim(0); ++n) {
        const auto one = batch_item(images, n);
        out.push_back(one.reshaped({one.dim(1), one.dim(2), one.dim(3)}));
      }
    }
    return out;
  };
}

// ---------------------------------------------------------------------------------------------
// Held-out evaluation items

/// One held-out scene with its triplet conditions and ground truth.
struct EvalItem {
  std::string id;
  ConditionSet conditions;
  Image truth;        ///< source image [3, P, P]
  Image depth;        ///< ground-truth scene depth [1, P, P]
  Image fg_exemplar;  ///< I_f
  Image bg_exemplar;  ///< I_b
  Mask mask;
};

inline EvalItem make_item(const triplets::ToySource& src, const triplets::TripletOptions& opts,
                          const embed::Vocabulary& vocab, const backbone::UNetConfig& unet) {
  const auto t = triplets::build_triplet(src, opts);
  const embed::ImageEmbedder embedder(unet.embedding_dim);
  return {t.id, train::condition_set(t, vocab, embedder, unet.text_tokens), t.source, src.rendered.depth_map,
          t.foreground, t.background, t.mask};
}

/// The first `n` scenes of a dataset split as evaluation items.
inline std::vector<EvalItem> load_items(const fs::path& scenes_root, const std::string& split, int n,
                                        const backbone::UNetConfig& unet, const triplets::TripletOptions& opts = {}) {
  const auto vocab = embed::Vocabulary::load(scenes_root / "vocab.json");
  std::vector<EvalItem> out;
  for (const auto& src : data::load_scenes(scenes_root, split, n)) out.push_back(make_item(src, opts, vocab, unet));
  require(n < 0 || static_cast<int>(out.size()) == n, ErrorKind::input,
          "split '" + split + "' holds " + std::to_string(out.size()) + " scenes, " + std::to_string(n) + " requested");
  return out;
}

template <typename Item>
std::vector<ConditionSet> conditions_of(const std::vector<Item>& items) {
  std::vector<ConditionSet> c;
  for (const auto& i : items) c.push_back(i.conditions);
  return c;
}

template <typename Item>
std::vector<Image> truths_of(const std::vector<Item>& items) {
  std::vector<Image> t;
  for (const auto& i : items) t.push_back(i.truth);
  return t;
}

// ---------------------------------------------------------------------------------------------
// Reconstruction

struct ReconstructionResult {
  Stat ssim, depth_mae;
  nlohmann::json records = nlohmann::json::array();
  std::vector<Image> generated;
};

inline ReconstructionResult reconstruction(const std::vector<EvalItem>& items, const Renderer& render,
                                           const toy::DepthEstimator& estimator, std::uint64_t seed) {
  require(!items.empty(), ErrorKind::argument, "reconstruction: no items");
  const auto conds = conditions_of(items);
  const auto truths = truths_of(items);
  ReconstructionResult r;
  r.generated = render(conds, truths, seed);
  std::vector<double> s, d;
  for (std::size_t i = 0; i < items.size(); ++i) {
    s.push_back(ssim(r.generated[i], items[i].truth));
    d.push_back(depth_mae(r.generated[i], items[i].depth, estimator));
    r.records.push_back({{"id", items[i].id}, {"ssim", s.back()}, {"depth_mae", d.back()}});
  }
  r.ssim = summarize(s);
  r.depth_mae = summarize(d);
  return r;
}

// ---------------------------------------------------------------------------------------------
// Occlusion ordering

/// Two overlapping objects with distinct styles; the nearer one should own the overlap.
struct OcclusionPair {
  std::string id;
  toy::ToyScene scene;
  ConditionSet conditions;
  Image truth;
  Mask overlap;  ///< pixels covered by both footprints
  int expected_style = 0;
  int other_style = 0;
  std::vector<float> ref_expected;  ///< embedding of the overlap painted in the expected style
  std::vector<float> ref_other;
};

struct OcclusionSpec {
  std::uint64_t seed = 0;
  int count = 50;
  int resolution = 32;
  int min_overlap = 6;  ///< pixels
};

inline Mask footprint(const toy::ToyScene& scene, std::size_t k, int resolution) {
  std::vector<bool> only(scene.objects.size(), false);
  only[k] = true;
  const auto l = toy::rasterize(scene, resolution, only);
  Mask m(resolution, resolution);
  for (std::size_t p = 0; p < l.visible.size(); ++p)
    if (l.visible[p] >= 0) m.set(static_cast<int>(p) / resolution, static_cast<int>(p) % resolution, true);
  return m;
}

/// Masked-region embedding used for palette classification.
inline std::vector<float> region_embedding(const Image& im, const Mask& region, const embed::ImageEmbedder& embedder) {
  return embedder(triplets::apply_mask(im, region)).vector;
}

/// Builds the pair for a two-object scene (nearest object last).
inline OcclusionPair make_occlusion_pair(const std::string& id, const toy::ToyScene& scene, int resolution,
                                         const embed::Vocabulary& vocab, const backbone::UNetConfig& unet) {
  require(scene.objects.size() == 2, ErrorKind::argument, "occlusion pairs need exactly two objects");
  OcclusionPair p;
  p.id = id;
  p.scene = scene;
  triplets::ToySource src{id, scene, toy::render_scene(scene, resolution)};
  p.conditions = make_item(src, {}, vocab, unet).conditions;
  p.truth = src.rendered.image;
  const Mask a = footprint(scene, 0, resolution), b = footprint(scene, 1, resolution);
  p.overlap = Mask(resolution, resolution);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] && b[i]) p.overlap.set(static_cast<int>(i) / resolution, static_cast<int>(i) % resolution, true);
  const auto& near = scene.objects[1];
  const auto& far = scene.objects[0];
  p.expected_style = near.style;
  p.other_style = far.style;
  // Reference: the truth with the overlap repainted in the far object's (hazed) color.
  Image wrong = p.truth;
  const toy::Rgb c = toy::hazed(toy::kObjectStyles.at(static_cast<std::size_t>(far.style)).color, far.z);
  const std::size_t hw = static_cast<std::size_t>(resolution) * resolution;
  for (std::size_t i = 0; i < hw; ++i)
    if (p.overlap[i]) {
      wrong[i] = c.r;
      wrong[hw + i] = c.g;
      wrong[2 * hw + i] = c.b;
    }
  const embed::ImageEmbedder embedder(unet.embedding_dim);
  p.ref_expected = region_embedding(p.truth, p.overlap, embedder);
  p.ref_other = region_embedding(wrong, p.overlap, embedder);
  return p;
}

/// The same geometry with the depth order reversed: the other object now wins the overlap.
inline OcclusionPair swapped(const OcclusionPair& p, const embed::Vocabulary& vocab, const backbone::UNetConfig& unet) {
  toy::ToyScene s = p.scene;
  std::swap(s.objects[0], s.objects[1]);
  std::swap(s.objects[0].z, s.objects[1].z);
  return make_occlusion_pair(p.id + "-swapped", s, height(p.truth), vocab, unet);
}

/// Held-out two-object scenes whose footprints overlap by at least `min_overlap` pixels.
inline std::vector<OcclusionPair> make_occlusion_pairs(const OcclusionSpec& spec, const embed::Vocabulary& vocab,
                                                       const backbone::UNetConfig& unet) {
  toy::GeneratorConfig g;
  g.min_objects = g.max_objects = 2;
  std::vector<OcclusionPair> out;
  for (std::uint64_t attempt = 0; static_cast<int>(out.size()) < spec.count; ++attempt) {
    require(attempt < 100000, ErrorKind::state, "could not find enough overlapping scenes");
    const auto scene = toy::sample_scene(derive_seed(spec.seed, "eval.occlusion", attempt), g);
    const Mask a = footprint(scene, 0, spec.resolution), b = footprint(scene, 1, spec.resolution);
    int overlap = 0;
    for (std::size_t i = 0; i < a.size(); ++i) overlap += a[i] && b[i];
    if (overlap < spec.min_overlap) continue;
    out.push_back(make_occlusion_pair(data::sample_id("occlusion", out.size()), scene, spec.resolution, vocab, unet));
  }
  return out;
}

/// True when the overlap region of `generated` is nearer the expected style's reference.
inline bool overlap_matches(const Image& generated, const OcclusionPair& p, const embed::ImageEmbedder& embedder) {
  const auto e = region_embedding(generated, p.overlap, embedder);
  return embed::cosine_similarity(e, p.ref_expected) > embed::cosine_similarity(e, p.ref_other);
}

struct OcclusionResult {
  double accuracy = 0;
  int n = 0;
  std::vector<std::string> skipped;
  nlohmann::json records = nlohmann::json::array();
  std::vector<Image> generated;
};

inline OcclusionResult occlusion_accuracy(const std::vector<OcclusionPair>& pairs, const Renderer& render,
                                          std::uint64_t seed, std::ostream* warn = nullptr) {
  OcclusionResult r;
  std::vector<OcclusionPair> used;
  for (const auto& p : pairs) {
    if (p.overlap.popcount() == 0) {
      r.skipped.push_back(p.id);
      if (warn) *warn << "warning: occlusion pair " << p.id << " has an empty overlap region, skipped\n";
      continue;
    }
    used.push_back(p);
  }
  require(!used.empty(), ErrorKind::argument, "occlusion_accuracy: no pair with a nonempty overlap");
  const embed::ImageEmbedder embedder(static_cast<int>(used[0].ref_expected.size()));
  r.generated = render(conditions_of(used), truths_of(used), seed);
  int correct = 0;
  for (std::size_t i = 0; i < used.size(); ++i) {
    const bool ok = overlap_matches(r.generated[i], used[i], embedder);
    correct += ok;
    r.records.push_back({{"id", used[i].id}, {"expected_style", toy::kObjectStyles.at(used[i].expected_style).name},
                         {"correct", ok}, {"overlap_pixels", used[i].overlap.popcount()}});
  }
  r.n = static_cast<int>(used.size());
  r.accuracy = static_cast<double>(correct) / r.n;
  return r;
}

// ---------------------------------------------------------------------------------------------
// Semantic localization

struct SemanticScore {
  std::optional<double> fg_sim, bg_sim;
  /// Mean of the defined sides; nullopt when neither side is.
  std::optional<double> avg() const {
    if (fg_sim && bg_sim) return (*fg_sim + *bg_sim) / 2;
    if (fg_sim) return fg_sim;
    return bg_sim;
  }
};

inline SemanticScore semantic_localization_score(const Image& generated, const Mask& mask, const Image& fg_exemplar,
                                                 const Image& bg_exemplar, const embed::ImageEmbedder& embedder = embed::ImageEmbedder()) {
  require(mask.height() == height(generated) && mask.width() == width(generated), ErrorKind::shape,
          "semantic score: mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
              " does not match the image");
  SemanticScore s;
  const std::size_t on = mask.popcount();
  if (on > 0)
    s.fg_sim = embed::cosine_similarity(embedder(triplets::apply_mask(generated, mask)).vector, embedder(fg_exemplar).vector);
  if (on < mask.size())
    s.bg_sim = embed::cosine_similarity(embedder(triplets::apply_mask(generated, mask.complement())).vector,
                                        embedder(bg_exemplar).vector);
  return s;
}

struct SemanticAggregate {
  Stat fg_sim, bg_sim, avg;
};

inline SemanticAggregate aggregate(const std::vector<SemanticScore>& scores) {
  std::vector<double> f, b, a;
  for (const auto& s : scores) {
    if (s.fg_sim) f.push_back(*s.fg_sim);
    if (s.bg_sim) b.push_back(*s.bg_sim);
    if (auto v = s.avg()) a.push_back(*v);
  }
  return {summarize(f), summarize(b), summarize(a)};
}

struct PairingResult {
  SemanticAggregate correct, swapped;
  double margin = 0;  ///< correct.avg.mean - swapped.avg.mean
  nlohmann::json records = nlohmann::json::array();
  std::vector<Image> generated;
};

/// Scores each generated image against its own exemplars and against the exemplars swapped in
/// the call.
inline PairingResult semantic_pairing(const std::vector<EvalItem>& items, const Renderer& render, std::uint64_t seed,
                                      const embed::ImageEmbedder& embedder = embed::ImageEmbedder()) {
  require(!items.empty(), ErrorKind::argument, "semantic_pairing: no items");
  PairingResult r;
  r.generated = render(conditions_of(items), truths_of(items), seed);
  std::vector<SemanticScore> good, bad;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    good.push_back(semantic_localization_score(r.generated[i], it.mask, it.fg_exemplar, it.bg_exemplar, embedder));
    bad.push_back(semantic_localization_score(r.generated[i], it.mask, it.bg_exemplar, it.fg_exemplar, embedder));
    r.records.push_back({{"id", it.id},
                         {"avg", good.back().avg().value_or(NAN)},
                         {"swapped_avg", bad.back().avg().value_or(NAN)}});
  }
  r.correct = aggregate(good);
  r.swapped = aggregate(bad);
  r.margin = r.correct.avg.mean - r.swapped.avg.mean;
  return r;
}

// ---------------------------------------------------------------------------------------------
// Lambda sweep

struct LambdaRow {
  double lambda_bg = 1;
  SemanticAggregate score;
};

struct LambdaSweep {
  std::vector<LambdaRow> rows;
  std::vector<std::vector<Image>> images;  ///< [grid][seed * items + item]

  bool bg_non_decreasing() const {
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].score.bg_sim.mean < rows[i - 1].score.bg_sim.mean) return false;
    return true;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "lambda_bg,fg_sim_mean,fg_sim_std,bg_sim_mean,bg_sim_std,avg_mean,avg_std,n\n";
    os.precision(9);
    for (const auto& r : rows)
      os << r.lambda_bg << ',' << r.score.fg_sim.mean << ',' << r.score.fg_sim.std << ',' << r.score.bg_sim.mean << ','
         << r.score.bg_sim.std << ',' << r.score.avg.mean << ',' << r.score.avg.std << ',' << r.score.avg.n << '\n';
    return os.str();
  }
};

/// Semantic scores per lambda_bg (lambda_fg fixed at 1), each over `seeds` sampling seeds.
inline LambdaSweep lambda_sweep(const std::vector<EvalItem>& items, const Renderer& render, const std::vector<double>& grid,
                                int seeds, std::uint64_t seed, const embed::ImageEmbedder& embedder = embed::ImageEmbedder()) {
  require(!grid.empty(), ErrorKind::argument, "lambda_sweep: empty grid");
  require(!items.empty() && seeds >= 1, ErrorKind::argument, "lambda_sweep: needs items and at least one seed");
  LambdaSweep out;
  const auto truths = truths_of(items);
  for (double lambda : grid) {
    require(std::isfinite(lambda) && lambda >= 0, ErrorKind::argument, "lambda_sweep: lambda must be finite and >= 0");
    auto conds = conditions_of(items);
    for (auto& c : conds) {
      c.lambda_fg = 1.0f;
      c.lambda_bg = static_cast<float>(lambda);
    }
    std::vector<SemanticScore> scores;
    std::vector<Image> images;
    for (int s = 0; s < seeds; ++s) {
      const auto gen = render(conds, truths, derive_seed(seed, "eval.lambda", static_cast<std::uint64_t>(s)));
      for (std::size_t i = 0; i < items.size(); ++i) {
        scores.push_back(semantic_localization_score(gen[i], items[i].mask, items[i].fg_exemplar, items[i].bg_exemplar, embedder));
        images.push_back(gen[i]);
      }
    }
    out.rows.push_back({lambda, aggregate(scores)});
    out.images.push_back(std::move(images));
  }
  return out;
}

/// Regenerates with lambda_bg = 0 after swapping in another item's background exemplar; returns
/// the number of foreground-region pixel values that changed (0 when the branch is annihilated).
inline std::size_t fg_pixels_changed_by_bg_exemplar(const std::vector<EvalItem>& items, const Renderer& render,
                                                    std::uint64_t seed) {
  require(items.size() >= 2, ErrorKind::argument, "needs at least two items to exchange exemplars");
  auto base = conditions_of(items);
  for (auto& c : base) c.lambda_bg = 0.0f;
  auto other = base;
  for (std::size_t i = 0; i < other.size(); ++i) other[i].bg_embedding = base[(i + 1) % base.size()].bg_embedding;
  const auto truths = truths_of(items);
  const auto a = render(base, truths, seed), b = render(other, truths, seed);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t hw = items[i].mask.size();
    for (int c = 0; c < channels(a[i]); ++c)
      for (std::size_t p = 0; p < hw; ++p)
        if (items[i].mask[p] && a[i][c * hw + p] != b[i][c * hw + p]) ++changed;
  }
  return changed;
}

// ---------------------------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string suite;
  std::string checkpoint;  ///< content hash of the evaluated checkpoint, or "oracle"
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Stat> metrics;
  nlohmann::json records = nlohmann::json::array();

  void validate(int requested) const {
    for (const auto& [name, s] : metrics) {
      require(std::isfinite(s.mean) && std::isfinite(s.std), ErrorKind::numeric, "metric " + name + " is not finite");
      require(requested < 0 || s.n == requested, ErrorKind::state,
              "metric " + name + " aggregates " + std::to_string(s.n) + " samples, " + std::to_string(requested) + " requested");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, s] : metrics) m[name] = eval::to_json(s);
    return {{"schema_version", kReportSchemaVersion}, {"suite", suite},   {"checkpoint", checkpoint},
            {"config", config},                       {"metrics", m},     {"records", records}};
  }

  /// One row per record; columns are the union of record keys in first-seen order.
  std::string records_csv() const {
    std::vector<std::string> cols;
    for (const auto& r : records)
      for (const auto& [k, _] : r.items())
        if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
    std::ostringstream os;
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
    for (const auto& r : records) {
      for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) os << ',';
        if (!r.contains(cols[i])) continue;
        const auto& v = r[cols[i]];
        os << (v.is_string() ? v.get<std::string>() : v.dump());
      }
      os << '\n';
    }
    return os.str();
  }
};

/// Images tiled row-major, `cols` per row; missing tiles are black.
inline Image image_grid(const std::vector<Image>& images, int cols) {
  require(!images.empty() && cols >= 1, ErrorKind::argument, "image_grid: nothing to tile");
  const int rows = static_cast<int>((images.size() + cols - 1) / cols);
  std::vector<Image> row_images;
  for (int r = 0; r < rows; ++r) {
    std::vector<Image> row;
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      row.push_back(i < images.size() ? images[i] : Image(images[0].shape()));
    }
    row_images.push_back(hconcat(row));
  }
  return vconcat(row_images);
}

}  // namespace cnc::eval
