#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cnc/core/image.hpp"
#include "cnc/toy_world.hpp"

/// Synthetic image triplets {foreground, background, mask} derived from one source image.
namespace cnc::triplets {

enum class ConditionKind { depth, edge };

inline std::string to_string(ConditionKind k) { return k == ConditionKind::depth ? "depth" : "edge"; }
inline ConditionKind condition_kind_from(const std::string& s) {
  if (s == "depth") return ConditionKind::depth;
  if (s == "edge") return ConditionKind::edge;
  fail(ErrorKind::argument, "unknown condition kind '" + s + "' (expected depth or edge)");
}

/// Which depth map feeds the foreground stream: the whole scene, the salient object alone
/// (training default), or the salient-object depth masked by M.
enum class ForegroundDepthVersion { scene, foreground, masked_foreground };

inline std::string to_string(ForegroundDepthVersion v) {
  switch (v) {
    case ForegroundDepthVersion::scene: return "scene";
    case ForegroundDepthVersion::foreground: return "foreground";
    case ForegroundDepthVersion::masked_foreground: return "masked-foreground";
  }
  return "foreground";
}
inline ForegroundDepthVersion fg_depth_version_from(const std::string& s) {
  if (s == "scene") return ForegroundDepthVersion::scene;
  if (s == "foreground") return ForegroundDepthVersion::foreground;
  if (s == "masked-foreground") return ForegroundDepthVersion::masked_foreground;
  fail(ErrorKind::argument, "unknown foreground depth version '" + s + "'");
}

struct ImageTriplet {
  std::string id;
  Image source;      ///< I_s
  Image foreground;  ///< I_f = I_s * M
  Image background;  ///< I_b, inpainted I_s * (1 - M~)
  Mask mask;         ///< M
  Mask dilated_mask; ///< M~
  std::vector<std::string> prompt;
  Image fg_condition;  ///< [1, H, W]
  Image bg_condition;  ///< [1, H, W]
  ConditionKind condition_kind = ConditionKind::depth;
};

// ---------------------------------------------------------------------------------------------

inline void check_mask_shape(const Image& image, const Mask& mask, const char* op) {
  require(height(image) == mask.height() && width(image) == mask.width(), ErrorKind::shape,
          std::string(op) + ": image " + shape_str(image.shape()) + " vs mask " + std::to_string(mask.height()) + "x" +
              std::to_string(mask.width()));
}

/// Channel-broadcast Hadamard product image * mask.
inline Image apply_mask(const Image& image, const Mask& mask) {
  check_mask_shape(image, mask, "apply_mask");
  Image out = image;
  const std::size_t hw = mask.size();
  for (int c = 0; c < channels(image); ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (!mask[p]) out[static_cast<std::size_t>(c) * hw + p] = 0.0f;
  return out;
}

inline Image make_foreground(const Image& source, const Mask& mask) {
  check_mask_shape(source, mask, "make_foreground");
  return apply_mask(source, mask);
}

/// Morphological dilation with a Euclidean disk of the given radius.
inline Mask dilate_mask(const Mask& mask, int radius) {
  require(radius >= 0, ErrorKind::argument, "dilation radius must be >= 0, got " + std::to_string(radius));
  if (radius == 0) return mask;
  const int H = mask.height(), W = mask.width();
  Mask out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!mask(y, x)) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dy * dy + dx * dx > radius * radius) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < H && xx >= 0 && xx < W) out.set(yy, xx, true);
        }
    }
  return out;
}

inline int default_dilation_radius(int side) { return static_cast<int>(std::ceil(0.03 * side)); }

// ---------------------------------------------------------------------------------------------
// Inpainting backends

class Inpainter {
 public:
  virtual ~Inpainter() = default;
  virtual std::string backend_id() const = 0;
  /// Whether fill() may be called concurrently on one instance.
  virtual bool thread_safe() const { return true; }
  virtual Image fill(const Image& image, const Mask& hole) const = 0;
};

/// Prompt a future diffusion-inpainting adapter would use; no in-repo backend consumes it.
inline constexpr const char* kDiffusionInpaintPrompt = "empty scenery, highly detailed, no people";

/// Pastes a known ground-truth background into the hole (toy world only).
class OracleInpainter : public Inpainter {
 public:
  explicit OracleInpainter(Image truth) : truth_(std::move(truth)) {}
  std::string backend_id() const override { return "oracle"; }
  Image fill(const Image& image, const Mask& hole) const override {
    check_mask_shape(image, hole, "oracle fill");
    require(truth_.same_shape(image), ErrorKind::inpainting, "oracle: ground truth does not match image shape");
    Image out = image;
    const std::size_t hw = hole.size();
    for (int c = 0; c < channels(image); ++c)
      for (std::size_t p = 0; p < hw; ++p)
        if (hole[p]) out[c * hw + p] = truth_[c * hw + p];
    return out;
  }

 private:
  Image truth_;
};

/// Onion-peel fill: hole pixels adjacent to known pixels take the mean of their known
/// 8-neighbours, repeated until the hole is closed.
class MeanFillInpainter : public Inpainter {
 public:
  std::string backend_id() const override { return "mean-fill"; }
  Image fill(const Image& image, const Mask& hole) const override {
    check_mask_shape(image, hole, "mean-fill");
    const int C = channels(image), H = height(image), W = width(image);
    const std::size_t hw = hole.size();
    Image out = image;
    std::vector<std::uint8_t> known(hw);
    for (std::size_t p = 0; p < hw; ++p) known[p] = hole[p] ? 0 : 1;
    if (std::none_of(known.begin(), known.end(), [](auto k) { return k != 0; }))
      fail(ErrorKind::inpainting, "mean-fill: hole covers the whole image");
    for (;;) {
      std::vector<std::size_t> frontier;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * W + x;
          if (known[p]) continue;
          bool near_known = false;
          for (int dy = -1; dy <= 1 && !near_known; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < H && xx >= 0 && xx < W && known[static_cast<std::size_t>(yy) * W + xx]) {
                near_known = true;
                break;
              }
            }
          if (near_known) frontier.push_back(p);
        }
      if (frontier.empty()) break;
      std::vector<float> values(frontier.size() * static_cast<std::size_t>(C));
      for (std::size_t f = 0; f < frontier.size(); ++f) {
        const int y = static_cast<int>(frontier[f]) / W, x = static_cast<int>(frontier[f]) % W;
        std::vector<double> sum(static_cast<std::size_t>(C), 0.0);
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            const std::size_t q = static_cast<std::size_t>(yy) * W + xx;
            if (!known[q]) continue;
            for (int c = 0; c < C; ++c) sum[static_cast<std::size_t>(c)] += out[c * hw + q];
            ++n;
          }
        for (int c = 0; c < C; ++c) values[f * C + c] = static_cast<float>(sum[static_cast<std::size_t>(c)] / n);
      }
      for (std::size_t f = 0; f < frontier.size(); ++f) {
        for (int c = 0; c < C; ++c) out[c * hw + frontier[f]] = values[f * C + c];
        known[frontier[f]] = 1;
      }
    }
    return out;
  }
};

inline std::unique_ptr<Inpainter> make_inpainter(const std::string& backend, const Image* truth = nullptr) {
  if (backend == "oracle") {
    require(truth != nullptr, ErrorKind::inpainting, "oracle backend needs the analytic background");
    return std::make_unique<OracleInpainter>(*truth);
  }
  if (backend == "mean-fill") return std::make_unique<MeanFillInpainter>();
  fail(ErrorKind::argument, "unknown inpainting backend '" + backend + "'");
}

/// I_b = fill(I_s * (1 - M~), M~). Verifies backend locality.
inline Image make_background(const Image& source, const Mask& dilated, const Inpainter& inpainter) {
  check_mask_shape(source, dilated, "make_background");
  const Image cut = apply_mask(source, dilated.complement());
  Image out;
  try {
    out = inpainter.fill(cut, dilated);
  } catch (const Error& e) {
    fail(ErrorKind::inpainting, "backend '" + inpainter.backend_id() + "': " + e.what());
  } catch (const std::exception& e) {
    fail(ErrorKind::inpainting, "backend '" + inpainter.backend_id() + "': " + e.what());
  }
  require(out.same_shape(source), ErrorKind::inpainting,
          "backend '" + inpainter.backend_id() + "' changed the image shape");
  const std::size_t hw = dilated.size();
  for (int c = 0; c < channels(source); ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (!dilated[p] && out[c * hw + p] != cut[c * hw + p])
        fail(ErrorKind::inpainting, "backend '" + inpainter.backend_id() + "' modified pixels outside the hole");
  return out;
}

// ---------------------------------------------------------------------------------------------

struct TripletOptions {
  std::optional<int> dilation_radius;  ///< default: ceil(0.03 * side)
  ConditionKind condition_kind = ConditionKind::depth;
  ForegroundDepthVersion fg_depth_version = ForegroundDepthVersion::foreground;
  std::string backend = "oracle";
};

/// Toy-world source: the scene graph gives exact component depth maps.
struct ToySource {
  std::string id;
  toy::ToyScene scene;
  toy::RenderedSample rendered;
};

/// Externally supplied record; conditions come from a trained depth estimator.
struct ExternalRecord {
  std::string id;
  Image image;
  std::optional<Mask> mask;
  std::vector<std::string> prompt;
};

using ConditionExtractor = std::function<Image(const Image&)>;

inline Image to_condition(const Image& depth, ConditionKind kind) {
  return kind == ConditionKind::depth ? depth : toy::edge_map(depth);
}

inline ImageTriplet build_triplet(const ToySource& src, const TripletOptions& opts,
                                  const Inpainter* inpainter_override = nullptr) {
  const auto& r = src.rendered;
  const int side = height(r.image);
  ImageTriplet t;
  t.id = src.id;
  t.source = r.image;
  t.mask = r.salient_mask;
  t.prompt = r.prompt;
  t.condition_kind = opts.condition_kind;
  t.foreground = make_foreground(r.image, r.salient_mask);
  t.dilated_mask = dilate_mask(r.salient_mask, opts.dilation_radius.value_or(default_dilation_radius(side)));
  std::unique_ptr<Inpainter> owned;
  const Inpainter* inpainter = inpainter_override;
  if (!inpainter) {
    owned = make_inpainter(opts.backend, &r.true_background);
    inpainter = owned.get();
  }
  t.background = make_background(r.image, t.dilated_mask, *inpainter);

  const std::size_t n = src.scene.objects.size();
  std::vector<bool> only_salient(n, false), without_salient(n, true);
  only_salient.back() = true;
  without_salient.back() = false;
  Image fg_depth;
  switch (opts.fg_depth_version) {
    case ForegroundDepthVersion::scene: fg_depth = r.depth_map; break;
    case ForegroundDepthVersion::foreground: fg_depth = toy::render_depth(src.scene, side, only_salient); break;
    case ForegroundDepthVersion::masked_foreground:
      fg_depth = apply_mask(toy::render_depth(src.scene, side, only_salient), r.salient_mask);
      break;
  }
  t.fg_condition = to_condition(fg_depth, opts.condition_kind);
  t.bg_condition = to_condition(toy::render_depth(src.scene, side, without_salient), opts.condition_kind);
  return t;
}

/// External images: mask required; mean-fill (or supplied) inpainting; estimated depth.
inline ImageTriplet build_triplet(const ExternalRecord& rec, const TripletOptions& opts, const Inpainter& inpainter,
                                  const ConditionExtractor& estimate_depth) {
  require(rec.mask.has_value(), ErrorKind::ingestion, "record '" + rec.id + "' has no mask");
  require(channels(rec.image) == 3, ErrorKind::ingestion, "record '" + rec.id + "' image must be RGB");
  require(rec.mask->height() == height(rec.image) && rec.mask->width() == width(rec.image), ErrorKind::ingestion,
          "record '" + rec.id + "' mask resolution " + std::to_string(rec.mask->height()) + "x" +
              std::to_string(rec.mask->width()) + " does not match image " + std::to_string(height(rec.image)) + "x" +
              std::to_string(width(rec.image)));
  ImageTriplet t;
  t.id = rec.id;
  t.source = rec.image;
  t.mask = *rec.mask;
  t.prompt = rec.prompt;
  t.condition_kind = opts.condition_kind;
  t.foreground = make_foreground(rec.image, t.mask);
  t.dilated_mask = dilate_mask(t.mask, opts.dilation_radius.value_or(default_dilation_radius(height(rec.image))));
  t.background = make_background(rec.image, t.dilated_mask, inpainter);
  Image fg_depth = estimate_depth(opts.fg_depth_version == ForegroundDepthVersion::scene ? rec.image : t.foreground);
  if (opts.fg_depth_version == ForegroundDepthVersion::masked_foreground) fg_depth = apply_mask(fg_depth, t.mask);
  t.fg_condition = to_condition(fg_depth, opts.condition_kind);
  t.bg_condition = to_condition(estimate_depth(t.background), opts.condition_kind);
  return t;
}

/// Throws with a description of the first violated triplet invariant.
inline void validate_triplet(const ImageTriplet& t) {
  const std::size_t hw = t.mask.size();
  for (int c = 0; c < channels(t.source); ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t i = c * hw + p;
      const float expect_fg = t.mask[p] ? t.source[i] : 0.0f;
      require(t.foreground[i] == expect_fg, ErrorKind::state, t.id + ": foreground != source * mask");
      require(t.foreground[i] + (t.mask[p] ? 0.0f : t.source[i]) == t.source[i], ErrorKind::state,
              t.id + ": reconstruction identity violated");
      if (!t.dilated_mask[p]) require(t.background[i] == t.source[i], ErrorKind::state, t.id + ": background differs outside dilated mask");
    }
  for (std::size_t p = 0; p < hw; ++p)
    if (t.mask[p]) require(t.dilated_mask[p], ErrorKind::state, t.id + ": dilated mask does not contain mask");
}

}  // namespace cnc::triplets
