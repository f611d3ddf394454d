#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnc/core/hash.hpp"
#include "cnc/core/image.hpp"
#include "cnc/embedders.hpp"
#include "cnc/toy_world.hpp"
#include "cnc/triplets.hpp"

/// On-disk toy datasets and triplet stores.
///
///   scenes/{split}/{id}/  image.png mask.png background.png depth.png(16-bit) edge.png(16-bit) scene.json
///   triplets/{split}/{id}/ source.png foreground.png background.png mask.png dilated_mask.png
///                          fg_condition.png(16-bit) bg_condition.png(16-bit) triplet.json
/// Each root holds manifest.json (ids, seeds, prompts, per-file content hashes) and vocab.json.
namespace cnc::data {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

inline std::string sample_id(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05zu", split.c_str(), index);
  return buf;
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::input, path.string() + ": invalid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline Mask read_mask(const fs::path& path) { return Mask::from_image(read_png(path)); }
inline void write_mask(const fs::path& path, const Mask& m) { write_png(path, m.to_image(), 8); }

// ---------------------------------------------------------------------------------------------
// Scene graphs

inline nlohmann::json to_json(const toy::ToyScene& s) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : s.objects)
    objects.push_back({{"shape", toy::kShapeNames.at(static_cast<std::size_t>(o.shape))},
                       {"cx", o.cx}, {"cy", o.cy}, {"size", o.size}, {"z", o.z}, {"style", o.style}});
  return {{"canvas", s.canvas}, {"background_style", s.background_style}, {"seed", s.seed}, {"objects", objects}};
}

inline toy::ToyScene scene_from_json(const nlohmann::json& j) {
  toy::ToyScene s;
  s.canvas = j.at("canvas").get<int>();
  s.background_style = j.at("background_style").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& o : j.at("objects")) {
    toy::SceneObject so;
    const auto shape = o.at("shape").get<std::string>();
    bool known = false;
    for (std::size_t k = 0; k < toy::kShapeNames.size(); ++k)
      if (shape == toy::kShapeNames[k]) {
        so.shape = static_cast<toy::ShapeKind>(k);
        known = true;
      }
    require(known, ErrorKind::input, "unknown shape '" + shape + "'");
    so.cx = o.at("cx").get<float>();
    so.cy = o.at("cy").get<float>();
    so.size = o.at("size").get<float>();
    so.z = o.at("z").get<float>();
    so.style = o.at("style").get<int>();
    s.objects.push_back(so);
  }
  toy::validate_scene(s);
  return s;
}

// ---------------------------------------------------------------------------------------------
// Scene datasets

struct DatasetSpec {
  std::uint64_t seed = 0;
  int count = 2000;      ///< training scenes
  int val_count = 200;   ///< held-out scenes
  int resolution = 32;
  toy::GeneratorConfig generator;

  nlohmann::json to_json() const {
    const auto& g = generator;
    return {{"seed", seed}, {"count", count}, {"val_count", val_count}, {"resolution", resolution},
            {"generator", {{"canvas", g.canvas}, {"min_objects", g.min_objects}, {"max_objects", g.max_objects},
                           {"min_size", g.min_size}, {"max_size", g.max_size}, {"min_z", g.min_z},
                           {"max_z", g.max_z}, {"num_object_styles", g.num_object_styles},
                           {"num_background_styles", g.num_background_styles}}}};
  }
};

inline std::uint64_t scene_seed(std::uint64_t root, const std::string& split, std::size_t index) {
  return derive_seed(root, "dataset.scene." + split, index);
}

/// Files of one sample directory, relative to the dataset root, with their content hashes.
inline nlohmann::json file_entries(const fs::path& root, const fs::path& dir, const std::vector<std::string>& names) {
  nlohmann::json files = nlohmann::json::object();
  for (const auto& n : names) files[n] = {{"path", fs::relative(dir / n, root).generic_string()},
                                          {"hash", git_blob_hash_file(dir / n)}};
  return files;
}

/// Writes scenes/{train,val}; returns the manifest. `root` is the dataset directory.
inline nlohmann::json generate_dataset(const fs::path& root, const DatasetSpec& spec) {
  spec.generator.validate();
  toy::check_resolution(spec.resolution);
  require(spec.count >= 0 && spec.val_count >= 0, ErrorKind::config, "sample counts must be nonnegative");
  const auto vocab = embed::Vocabulary::toy_default();
  fs::create_directories(root);
  vocab.save(root / "vocab.json");
  nlohmann::json manifest{{"format_version", kFormatVersion}, {"kind", "scenes"}, {"spec", spec.to_json()}};
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", spec.count}, {"val", spec.val_count}}) {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) {
      const std::string id = sample_id(split, i);
      const std::uint64_t seed = scene_seed(spec.seed, split, i);
      const auto scene = toy::sample_scene(seed, spec.generator);
      const auto r = toy::render_scene(scene, spec.resolution);
      const fs::path dir = root / "scenes" / split / id;
      fs::create_directories(dir);
      write_png(dir / "image.png", r.image, 8);
      write_mask(dir / "mask.png", r.salient_mask);
      write_png(dir / "background.png", r.true_background, 8);
      write_png(dir / "depth.png", r.depth_map, 16);
      write_png(dir / "edge.png", r.edge_map, 16);
      write_json(dir / "scene.json", {{"id", id}, {"scene", to_json(scene)}, {"prompt", r.prompt}});
      entries.push_back({{"id", id}, {"seed", seed}, {"prompt", r.prompt},
                         {"files", file_entries(root, dir, {"image.png", "mask.png", "background.png", "depth.png",
                                                            "edge.png", "scene.json"})}});
    }
    manifest["splits"][split] = entries;
  }
  write_json(root / "manifest.json", manifest);
  return manifest;
}

/// Loads the rendered sample (from its PNGs) and scene graph of every listed sample in a split.
inline std::vector<triplets::ToySource> load_scenes(const fs::path& root, const std::string& split, int limit = -1) {
  const auto manifest = read_json(root / "manifest.json");
  require(manifest.value("kind", "") == "scenes", ErrorKind::input, root.string() + " is not a scene dataset");
  require(manifest.contains("splits") && manifest["splits"].contains(split), ErrorKind::input,
          root.string() + ": no split '" + split + "'");
  std::vector<triplets::ToySource> out;
  for (const auto& e : manifest["splits"][split]) {
    if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
    const std::string id = e.at("id").get<std::string>();
    const fs::path dir = root / "scenes" / split / id;
    const auto meta = read_json(dir / "scene.json");
    triplets::ToySource s;
    s.id = id;
    s.scene = scene_from_json(meta.at("scene"));
    auto& r = s.rendered;
    r.image = read_png(dir / "image.png");
    r.salient_mask = read_mask(dir / "mask.png");
    r.true_background = read_png(dir / "background.png");
    r.depth_map = read_png(dir / "depth.png");
    r.edge_map = read_png(dir / "edge.png");
    r.prompt = meta.at("prompt").get<std::vector<std::string>>();
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Triplet stores

inline void write_triplet(const fs::path& dir, const triplets::ImageTriplet& t, const nlohmann::json& extra = {}) {
  fs::create_directories(dir);
  write_png(dir / "source.png", t.source, 8);
  write_png(dir / "foreground.png", t.foreground, 8);
  write_png(dir / "background.png", t.background, 8);
  write_mask(dir / "mask.png", t.mask);
  write_mask(dir / "dilated_mask.png", t.dilated_mask);
  write_png(dir / "fg_condition.png", t.fg_condition, 16);
  write_png(dir / "bg_condition.png", t.bg_condition, 16);
  nlohmann::json j{{"id", t.id}, {"prompt", t.prompt}, {"condition_kind", triplets::to_string(t.condition_kind)}};
  if (extra.is_object()) j.update(extra);
  write_json(dir / "triplet.json", j);
}

inline triplets::ImageTriplet read_triplet(const fs::path& dir) {
  const auto j = read_json(dir / "triplet.json");
  triplets::ImageTriplet t;
  t.id = j.at("id").get<std::string>();
  t.prompt = j.at("prompt").get<std::vector<std::string>>();
  t.condition_kind = triplets::condition_kind_from(j.at("condition_kind").get<std::string>());
  t.source = read_png(dir / "source.png");
  t.foreground = read_png(dir / "foreground.png");
  t.background = read_png(dir / "background.png");
  t.mask = read_mask(dir / "mask.png");
  t.dilated_mask = read_mask(dir / "dilated_mask.png");
  t.fg_condition = read_png(dir / "fg_condition.png");
  t.bg_condition = read_png(dir / "bg_condition.png");
  return t;
}

inline const std::vector<std::string> kTripletFiles{"source.png",       "foreground.png",   "background.png",
                                                    "mask.png",         "dilated_mask.png", "fg_condition.png",
                                                    "bg_condition.png", "triplet.json"};

/// Builds triplets for every split of a scene dataset and writes the store; returns its manifest.
inline nlohmann::json build_triplet_store(const fs::path& scenes_root, const fs::path& out_root,
                                          const triplets::TripletOptions& opts) {
  const auto src_manifest = read_json(scenes_root / "manifest.json");
  fs::create_directories(out_root);
  fs::copy_file(scenes_root / "vocab.json", out_root / "vocab.json", fs::copy_options::overwrite_existing);
  const nlohmann::json options{{"condition_kind", triplets::to_string(opts.condition_kind)},
                               {"fg_depth_version", triplets::to_string(opts.fg_depth_version)},
                               {"backend", opts.backend},
                               {"dilation_radius", opts.dilation_radius ? nlohmann::json(*opts.dilation_radius) : nlohmann::json()}};
  nlohmann::json manifest{{"format_version", kFormatVersion}, {"kind", "triplets"}, {"options", options},
                          {"source", {{"path", fs::absolute(scenes_root).lexically_normal().string()},
                                      {"manifest_hash", git_blob_hash_file(scenes_root / "manifest.json")}}}};
  for (const auto& [split, _] : src_manifest.at("splits").items()) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& src : load_scenes(scenes_root, split)) {
      const auto t = triplets::build_triplet(src, opts);
      triplets::validate_triplet(t);
      const fs::path dir = out_root / "triplets" / split / t.id;
      write_triplet(dir, t, {{"fg_depth_version", triplets::to_string(opts.fg_depth_version)}, {"backend", opts.backend}});
      entries.push_back({{"id", t.id}, {"prompt", t.prompt}, {"files", file_entries(out_root, dir, kTripletFiles)}});
    }
    manifest["splits"][split] = entries;
  }
  write_json(out_root / "manifest.json", manifest);
  return manifest;
}

inline std::vector<triplets::ImageTriplet> load_triplets(const fs::path& root, const std::string& split, int limit = -1) {
  const auto manifest = read_json(root / "manifest.json");
  require(manifest.value("kind", "") == "triplets", ErrorKind::input, root.string() + " is not a triplet store");
  require(manifest.contains("splits") && manifest["splits"].contains(split), ErrorKind::input,
          root.string() + ": no split '" + split + "'");
  std::vector<triplets::ImageTriplet> out;
  for (const auto& e : manifest["splits"][split]) {
    if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
    out.push_back(read_triplet(root / "triplets" / split / e.at("id").get<std::string>()));
  }
  return out;
}

/// Re-hashes every file listed in a manifest; returns the relative paths that do not match.
inline std::vector<std::string> verify_manifest(const fs::path& root) {
  const auto manifest = read_json(root / "manifest.json");
  std::vector<std::string> bad;
  for (const auto& [split, entries] : manifest.at("splits").items())
    for (const auto& e : entries)
      for (const auto& [name, f] : e.at("files").items()) {
        const fs::path p = root / f.at("path").get<std::string>();
        if (!fs::exists(p) || git_blob_hash_file(p) != f.at("hash").get<std::string>()) bad.push_back(f.at("path"));
      }
  return bad;
}

}  // namespace cnc::data
