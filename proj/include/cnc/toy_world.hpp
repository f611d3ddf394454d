#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cnc/core/image.hpp"
#include "cnc/core/rng.hpp"

/// Procedural layered-shapes world with analytic ground truth for depth, occlusion, the salient
/// mask and the scene behind the salient object.
namespace cnc::toy {

enum class ShapeKind { circle, square, triangle };

inline constexpr std::array<const char*, 3> kShapeNames{"circle", "square", "triangle"};

struct Rgb {
  float r, g, b;
};

struct ObjectStyle {
  const char* name;
  Rgb color;
};

enum class Pattern { gradient, stripes, checker, flat, mortar };

struct BackgroundStyle {
  const char* name;
  Pattern pattern;
  Rgb a;
  Rgb b;
};

inline constexpr std::array<ObjectStyle, 8> kObjectStyles{{
    {"red", {0.90f, 0.12f, 0.12f}},
    {"green", {0.10f, 0.80f, 0.20f}},
    {"blue", {0.12f, 0.25f, 0.95f}},
    {"yellow", {0.95f, 0.88f, 0.10f}},
    {"cyan", {0.05f, 0.85f, 0.90f}},
    {"magenta", {0.90f, 0.15f, 0.85f}},
    {"orange", {1.00f, 0.55f, 0.05f}},
    {"purple", {0.50f, 0.15f, 0.80f}},
}};

inline constexpr std::array<BackgroundStyle, 6> kBackgroundStyles{{
    {"sky", Pattern::gradient, {0.45f, 0.62f, 0.92f}, {0.85f, 0.90f, 1.00f}},
    {"grass", Pattern::stripes, {0.28f, 0.52f, 0.22f}, {0.20f, 0.42f, 0.16f}},
    {"sand", Pattern::flat, {0.86f, 0.76f, 0.52f}, {0.86f, 0.76f, 0.52f}},
    {"night", Pattern::gradient, {0.04f, 0.04f, 0.18f}, {0.16f, 0.10f, 0.30f}},
    {"stone", Pattern::checker, {0.50f, 0.50f, 0.52f}, {0.38f, 0.38f, 0.41f}},
    {"brick", Pattern::mortar, {0.55f, 0.24f, 0.18f}, {0.75f, 0.70f, 0.62f}},
}};

/// Depth assigned to background pixels (depth maps use larger = nearer).
inline constexpr float kBackgroundDepth = 0.05f;
/// Objects are blended toward this fog color by kHazeStrength * z (atmospheric depth cue).
inline constexpr Rgb kFogColor{0.60f, 0.60f, 0.60f};
inline constexpr float kHazeStrength = 0.4f;

struct SceneObject {
  ShapeKind shape = ShapeKind::square;
  float cx = 0;    ///< center x, canvas pixels
  float cy = 0;    ///< center y, canvas pixels
  float size = 0;  ///< extent, canvas pixels
  float z = 0.5f;  ///< (0, 1], smaller = nearer
  int style = 0;   ///< index into kObjectStyles

  bool operator==(const SceneObject&) const = default;
};

/// Objects are ordered farthest first; the last one is the salient object.
struct ToyScene {
  int canvas = 32;
  int background_style = 0;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  const SceneObject& salient() const { return objects.back(); }
  bool operator==(const ToyScene&) const = default;
};

struct GeneratorConfig {
  int canvas = 32;
  int min_objects = 1;
  int max_objects = 3;
  float min_size = 10.0f;
  float max_size = 18.0f;
  float min_z = 0.15f;
  float max_z = 0.95f;
  int num_object_styles = static_cast<int>(kObjectStyles.size());
  int num_background_styles = static_cast<int>(kBackgroundStyles.size());

  void validate() const {
    require(canvas > 0, ErrorKind::config, "canvas must be positive");
    require(min_objects >= 1, ErrorKind::config, "min_objects must be >= 1");
    require(min_objects <= max_objects, ErrorKind::config,
            "object count range min " + std::to_string(min_objects) + " > max " + std::to_string(max_objects));
    require(min_size > 0 && min_size <= max_size, ErrorKind::config, "invalid size range");
    require(min_z > 0 && min_z < max_z && max_z <= 1.0f, ErrorKind::config, "invalid depth range");
    require(num_object_styles >= 1 && num_object_styles <= static_cast<int>(kObjectStyles.size()),
            ErrorKind::config, "object style vocabulary out of range");
    require(num_background_styles >= 1 && num_background_styles <= static_cast<int>(kBackgroundStyles.size()),
            ErrorKind::config, "background style vocabulary out of range");
  }
};

struct RenderedSample {
  Image image;            ///< [3, H, W]
  Mask salient_mask;      ///< H x W
  Image true_background;  ///< [3, H, W], scene without the salient object
  Image depth_map;        ///< [1, H, W], larger = nearer, background kBackgroundDepth
  Image edge_map;         ///< [1, H, W], normalized depth gradient magnitude
  std::vector<std::string> prompt;
};

// ---------------------------------------------------------------------------------------------

inline bool covers(const SceneObject& o, float px, float py) {
  const float h = o.size * 0.5f;
  switch (o.shape) {
    case ShapeKind::circle: return (px - o.cx) * (px - o.cx) + (py - o.cy) * (py - o.cy) <= h * h;
    case ShapeKind::square: return std::abs(px - o.cx) <= h && std::abs(py - o.cy) <= h;
    case ShapeKind::triangle: {
      const float top = o.cy - h;
      if (py < top || py > o.cy + h) return false;
      return std::abs(px - o.cx) <= (py - top) * 0.5f;
    }
  }
  return false;
}

inline Rgb hazed(const Rgb& c, float z) {
  const float a = kHazeStrength * z;
  return {c.r + (kFogColor.r - c.r) * a, c.g + (kFogColor.g - c.g) * a, c.b + (kFogColor.b - c.b) * a};
}

/// Background color at normalized position (u, v) in [0, 1).
inline Rgb background_color(int style, float u, float v) {
  const auto& s = kBackgroundStyles.at(static_cast<std::size_t>(style));
  auto lerp = [](const Rgb& a, const Rgb& b, float t) {
    return Rgb{a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
  };
  switch (s.pattern) {
    case Pattern::gradient: return lerp(s.a, s.b, v);
    case Pattern::stripes: return (static_cast<int>(std::floor(v * 4.0f)) % 2 == 0) ? s.a : s.b;
    case Pattern::checker:
      return ((static_cast<int>(std::floor(u * 4.0f)) + static_cast<int>(std::floor(v * 4.0f))) % 2 == 0) ? s.a : s.b;
    case Pattern::flat: return s.a;
    case Pattern::mortar: {
      const float row = v * 4.0f;
      return (row - std::floor(row)) < 0.125f ? s.b : s.a;
    }
  }
  return s.a;
}

/// Per-pixel layered render: index of the visible object (-1 = background) for a subset of objects.
struct Layers {
  int resolution = 0;
  std::vector<int> visible;  ///< H*W object indices
};

inline Layers rasterize(const ToyScene& scene, int resolution, const std::vector<bool>& include) {
  Layers out{resolution, std::vector<int>(static_cast<std::size_t>(resolution) * resolution, -1)};
  const float scale = static_cast<float>(scene.canvas) / static_cast<float>(resolution);
  // Painter's algorithm: far to near, later writes win.
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    if (!include[k]) continue;
    const auto& o = scene.objects[k];
    for (int y = 0; y < resolution; ++y)
      for (int x = 0; x < resolution; ++x)
        if (covers(o, (static_cast<float>(x) + 0.5f) * scale, (static_cast<float>(y) + 0.5f) * scale))
          out.visible[static_cast<std::size_t>(y) * resolution + x] = static_cast<int>(k);
  }
  return out;
}

inline Image shade(const ToyScene& scene, const Layers& layers) {
  const int R = layers.resolution;
  Image im({3, R, R});
  for (int y = 0; y < R; ++y)
    for (int x = 0; x < R; ++x) {
      const int k = layers.visible[static_cast<std::size_t>(y) * R + x];
      const Rgb c = k < 0 ? background_color(scene.background_style, (x + 0.5f) / R, (y + 0.5f) / R)
                          : hazed(kObjectStyles.at(static_cast<std::size_t>(scene.objects[k].style)).color,
                                  scene.objects[k].z);
      const std::size_t p = static_cast<std::size_t>(y) * R + x;
      im[p] = c.r;
      im[static_cast<std::size_t>(R) * R + p] = c.g;
      im[2 * static_cast<std::size_t>(R) * R + p] = c.b;
    }
  return im;
}

inline Image depth_of(const ToyScene& scene, const Layers& layers) {
  const int R = layers.resolution;
  Image d({1, R, R}, kBackgroundDepth);
  for (std::size_t p = 0; p < layers.visible.size(); ++p)
    if (layers.visible[p] >= 0) d[p] = 1.0f - scene.objects[static_cast<std::size_t>(layers.visible[p])].z;
  return d;
}

/// Sobel gradient magnitude of a single-channel map, normalized to [0, 1] by its maximum.
inline Image edge_map(const Image& map) {
  const int H = height(map), W = width(map);
  Image out({1, H, W});
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, H - 1);
    x = std::clamp(x, 0, W - 1);
    return map[static_cast<std::size_t>(y) * W + x];
  };
  float mx = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const float gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                       (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const float gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                       (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      const float m = std::sqrt(gx * gx + gy * gy);
      out[static_cast<std::size_t>(y) * W + x] = m;
      mx = std::max(mx, m);
    }
  if (mx > 0)
    for (auto& v : out.storage()) v /= mx;
  return out;
}

inline std::vector<std::string> describe(const ToyScene& scene) {
  std::vector<std::string> words;
  const auto& s = scene.salient();
  words.emplace_back(kObjectStyles.at(static_cast<std::size_t>(s.style)).name);
  words.emplace_back(kShapeNames.at(static_cast<std::size_t>(s.shape)));
  if (scene.objects.size() >= 2) {
    const auto& o = scene.objects[scene.objects.size() - 2];
    words.emplace_back("front");
    words.emplace_back(kObjectStyles.at(static_cast<std::size_t>(o.style)).name);
    words.emplace_back(kShapeNames.at(static_cast<std::size_t>(o.shape)));
  }
  words.emplace_back("on");
  words.emplace_back(kBackgroundStyles.at(static_cast<std::size_t>(scene.background_style)).name);
  return words;
}

/// Throws a configuration error naming the first violated scene invariant.
inline void validate_scene(const ToyScene& scene) {
  require(!scene.objects.empty(), ErrorKind::config, "scene has no objects");
  require(scene.background_style >= 0 && scene.background_style < static_cast<int>(kBackgroundStyles.size()),
          ErrorKind::config, "background style out of range");
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const auto& o = scene.objects[k];
    require(o.z > 0 && o.z <= 1, ErrorKind::config, "object depth outside (0, 1]");
    require(o.style >= 0 && o.style < static_cast<int>(kObjectStyles.size()), ErrorKind::config,
            "object style out of range");
    const float h = o.size * 0.5f;
    require(o.cx + h > 0 && o.cx - h < scene.canvas && o.cy + h > 0 && o.cy - h < scene.canvas, ErrorKind::config,
            "object bounding box misses the canvas");
    if (k > 0)
      require(scene.objects[k - 1].z > o.z, ErrorKind::config, "objects not strictly ordered far to near");
  }
}

/// Deterministic scene for (seed, config). The nearest object is the salient one.
inline ToyScene sample_scene(std::uint64_t seed, const GeneratorConfig& config) {
  config.validate();
  std::mt19937_64 rng(derive_seed(seed, "toy.scene"));
  auto uni = [&](double lo, double hi) { return static_cast<float>(std::uniform_real_distribution<double>(lo, hi)(rng)); };
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (;;) {
    ToyScene scene;
    scene.canvas = config.canvas;
    scene.seed = seed;
    scene.background_style = pick(0, config.num_background_styles - 1);
    const int count = pick(config.min_objects, config.max_objects);
    std::vector<float> zs;
    for (int k = 0; k < count; ++k) zs.push_back(uni(config.min_z, config.max_z));
    std::sort(zs.begin(), zs.end(), std::greater<>());
    if (std::adjacent_find(zs.begin(), zs.end()) != zs.end()) continue;
    for (int k = 0; k < count; ++k) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(pick(0, 2));
      o.size = uni(config.min_size, config.max_size);
      o.cx = uni(0.2 * config.canvas, 0.8 * config.canvas);
      o.cy = uni(0.2 * config.canvas, 0.8 * config.canvas);
      o.z = zs[static_cast<std::size_t>(k)];
      o.style = pick(0, config.num_object_styles - 1);
      scene.objects.push_back(o);
    }
    // Neighbouring layers get distinct colors so occlusion is visible.
    for (std::size_t k = 1; k < scene.objects.size(); ++k)
      while (config.num_object_styles > 1 && scene.objects[k].style == scene.objects[k - 1].style)
        scene.objects[k].style = pick(0, config.num_object_styles - 1);
    std::vector<bool> only_salient(scene.objects.size(), false);
    only_salient.back() = true;
    const Layers l = rasterize(scene, config.canvas, only_salient);
    if (std::count(l.visible.begin(), l.visible.end(), -1) == static_cast<long>(l.visible.size())) continue;
    validate_scene(scene);
    return scene;
  }
}

inline void check_resolution(int resolution) {
  require(resolution > 0 && resolution % 8 == 0, ErrorKind::shape,
          "resolution " + std::to_string(resolution) + " is not a positive multiple of 8");
}

inline RenderedSample render_scene(const ToyScene& scene, int resolution) {
  check_resolution(resolution);
  validate_scene(scene);
  const std::size_t n = scene.objects.size();
  const Layers all = rasterize(scene, resolution, std::vector<bool>(n, true));
  std::vector<bool> without_salient(n, true);
  without_salient.back() = false;
  const Layers behind = rasterize(scene, resolution, without_salient);

  RenderedSample out;
  out.image = shade(scene, all);
  out.true_background = shade(scene, behind);
  out.depth_map = depth_of(scene, all);
  out.edge_map = edge_map(out.depth_map);
  out.salient_mask = Mask(resolution, resolution);
  for (std::size_t p = 0; p < all.visible.size(); ++p)
    if (all.visible[p] == static_cast<int>(n - 1)) out.salient_mask.set(static_cast<int>(p) / resolution, static_cast<int>(p) % resolution, true);
  out.prompt = describe(scene);
  return out;
}

/// Depth map of the scene restricted to the chosen objects (others removed).
inline Image render_depth(const ToyScene& scene, int resolution, const std::vector<bool>& include) {
  check_resolution(resolution);
  return depth_of(scene, rasterize(scene, resolution, include));
}

inline Image render_image(const ToyScene& scene, int resolution, const std::vector<bool>& include) {
  check_resolution(resolution);
  return shade(scene, rasterize(scene, resolution, include));
}

}  // namespace cnc::toy
