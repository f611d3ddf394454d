#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cnc/dataset.hpp"

namespace cnc {
namespace {

namespace fs = std::filesystem;

class DatasetTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("cnc_dataset_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    spec_.seed = 17;
    spec_.count = 6;
    spec_.val_count = 2;
    spec_.resolution = 16;
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path root_;
  data::DatasetSpec spec_;
};

TEST_F(DatasetTest, GeneratedScenesRoundTrip) {
  const auto manifest = data::generate_dataset(root_ / "scenes", spec_);
  EXPECT_EQ(manifest["splits"]["train"].size(), 6u);
  EXPECT_EQ(manifest["splits"]["val"].size(), 2u);
  EXPECT_TRUE(data::verify_manifest(root_ / "scenes").empty());

  const auto loaded = data::load_scenes(root_ / "scenes", "train");
  ASSERT_EQ(loaded.size(), 6u);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const auto scene = toy::sample_scene(data::scene_seed(spec_.seed, "train", i), spec_.generator);
    const auto r = toy::render_scene(scene, spec_.resolution);
    EXPECT_EQ(loaded[i].id, data::sample_id("train", i));
    EXPECT_EQ(loaded[i].rendered.prompt, r.prompt);
    EXPECT_EQ(loaded[i].rendered.salient_mask, r.salient_mask);
    // 8-bit image, 16-bit depth.
    for (std::size_t k = 0; k < r.image.size(); ++k) EXPECT_NEAR(loaded[i].rendered.image[k], r.image[k], 0.5 / 255 + 1e-6);
    for (std::size_t k = 0; k < r.depth_map.size(); ++k)
      EXPECT_NEAR(loaded[i].rendered.depth_map[k], r.depth_map[k], 0.5 / 65535 + 1e-6);
    EXPECT_EQ(data::to_json(loaded[i].scene), data::to_json(scene));
  }
  EXPECT_EQ(data::load_scenes(root_ / "scenes", "val", 1).size(), 1u);
  EXPECT_THROW(data::load_scenes(root_ / "scenes", "test"), Error);
}

TEST_F(DatasetTest, GenerationIsDeterministic) {
  const auto a = data::generate_dataset(root_ / "a", spec_);
  const auto b = data::generate_dataset(root_ / "b", spec_);
  EXPECT_EQ(a["splits"], b["splits"]);
  spec_.seed = 18;
  const auto c = data::generate_dataset(root_ / "c", spec_);
  EXPECT_NE(a["splits"], c["splits"]);
}

TEST_F(DatasetTest, ManifestDetectsTampering) {
  data::generate_dataset(root_ / "scenes", spec_);
  const fs::path victim = root_ / "scenes" / "scenes" / "train" / data::sample_id("train", 2) / "depth.png";
  std::ofstream(victim, std::ios::app) << "x";
  const auto bad = data::verify_manifest(root_ / "scenes");
  ASSERT_EQ(bad.size(), 1u);
  EXPECT_NE(bad[0].find("train-00002/depth.png"), std::string::npos);
}

TEST_F(DatasetTest, TripletStoreRoundTrip) {
  data::generate_dataset(root_ / "scenes", spec_);
  triplets::TripletOptions opts;
  const auto manifest = data::build_triplet_store(root_ / "scenes", root_ / "triplets", opts);
  EXPECT_EQ(manifest["options"]["condition_kind"], "depth");
  EXPECT_TRUE(data::verify_manifest(root_ / "triplets").empty());
  EXPECT_TRUE(fs::exists(root_ / "triplets" / "vocab.json"));

  const auto sources = data::load_scenes(root_ / "scenes", "train");
  const auto stored = data::load_triplets(root_ / "triplets", "train");
  ASSERT_EQ(stored.size(), sources.size());
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto fresh = triplets::build_triplet(sources[i], opts);
    EXPECT_EQ(stored[i].id, fresh.id);
    EXPECT_EQ(stored[i].prompt, fresh.prompt);
    EXPECT_EQ(stored[i].mask, fresh.mask);
    EXPECT_EQ(stored[i].dilated_mask, fresh.dilated_mask);
    for (std::size_t k = 0; k < fresh.fg_condition.size(); ++k)
      EXPECT_NEAR(stored[i].fg_condition[k], fresh.fg_condition[k], 1e-5);
    EXPECT_NO_THROW(triplets::validate_triplet(stored[i]));
  }
  EXPECT_THROW(data::load_triplets(root_ / "scenes", "train"), Error);
}

}  // namespace
}  // namespace cnc
