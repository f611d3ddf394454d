#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cnc/trainer.hpp"
#include "support/fixtures.hpp"

namespace cnc {
namespace {

namespace fs = std::filesystem;
using train::Stage;

std::string digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return sha1_hex(ss.str());
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / ("cnc_trainer_" + std::to_string(::getpid())));
    fs::remove_all(*root_);
    data::DatasetSpec spec;
    spec.seed = 5;
    spec.count = 8;
    spec.val_count = 2;
    spec.resolution = 16;
    data::generate_dataset(*root_ / "scenes", spec);
    data::build_triplet_store(*root_ / "scenes", *root_ / "triplets", {});
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }

  static train::ExperimentConfig config(const std::string& out) {
    train::ExperimentConfig c;
    c.triplets = (*root_ / "triplets").string();
    c.out = (*root_ / out).string();
    c.seed = 9;
    c.unet = testing::tiny_config();
    c.unet.vocab_size = 64;
    c.unet.text_tokens = 8;
    c.unet.timesteps = 100;
    c.schedule = diffusion::DiffusionSchedule(100);
    for (auto& [s, spec] : c.stages) {
      spec.epochs = 2;
      spec.batch_size = 4;
    }
    return c;
  }

  static fs::path* root_;
};

fs::path* TrainerTest::root_ = nullptr;

TEST_F(TrainerTest, ConfigJsonRoundTripAndValidation) {
  const auto c = config("cfg");
  const auto back = train::ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  auto moved = c;
  moved.out = "elsewhere";
  EXPECT_EQ(moved.hash(), c.hash());

  auto j = c.to_json();
  j["stages"]["local"]["lr"] = -1;
  try {
    train::ExperimentConfig::from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("stages.local.lr"), std::string::npos);
  }
  j = c.to_json();
  j["stages"]["warmup"] = nlohmann::json::object();
  EXPECT_THROW(train::ExperimentConfig::from_json(j), Error);
}

TEST_F(TrainerTest, StagesRequireTheirPrerequisite) {
  const auto c = config("orphan");
  try {
    train::run_stage(c, Stage::global);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::staging);
    EXPECT_NE(std::string(e.what()).find("'local'"), std::string::npos);
  }
}

TEST_F(TrainerTest, CurriculumRespectsFreezingAndLogs) {
  const auto c = config("full");
  const auto results = train::run_curriculum(c, {.deterministic = true});
  ASSERT_EQ(results.size(), 4u);

  const auto prior = ckpt::load_checkpoint(train::last_checkpoint(c, Stage::prior));
  const auto local = ckpt::load_checkpoint(train::last_checkpoint(c, Stage::local));
  const auto global = ckpt::load_checkpoint(train::last_checkpoint(c, Stage::global));
  const auto fine = ckpt::load_checkpoint(train::last_checkpoint(c, Stage::finetune));
  auto gh = [](const ckpt::Checkpoint& k, const char* g) { return k.meta["group_hashes"][g].get<std::string>(); };

  // Prior weights never move after the prior stage.
  EXPECT_EQ(gh(local, backbone::kFrozen), gh(prior, backbone::kFrozen));
  EXPECT_EQ(gh(fine, backbone::kFrozen), gh(prior, backbone::kFrozen));
  EXPECT_EQ(fine.meta["pretrain_frozen_hash"], prior.meta["pretrain_frozen_hash"]);
  // Local stage leaves the global fuser alone; global stage leaves the clone and local fuser alone.
  EXPECT_EQ(gh(local, backbone::kGlobal), gh(prior, backbone::kGlobal));
  EXPECT_NE(gh(local, backbone::kLocal), gh(prior, backbone::kLocal));
  EXPECT_EQ(gh(global, backbone::kClone), gh(local, backbone::kClone));
  EXPECT_EQ(gh(global, backbone::kLocal), gh(local, backbone::kLocal));
  EXPECT_NE(gh(global, backbone::kGlobal), gh(local, backbone::kGlobal));
  for (const char* g : {backbone::kClone, backbone::kLocal, backbone::kGlobal})
    EXPECT_NE(gh(fine, g), gh(global, g)) << g;

  // The clone starts as a copy of the trained prior encoder.
  {
    auto m = train::load_model(train::last_checkpoint(c, Stage::prior));
    auto copy = train::load_model(train::last_checkpoint(c, Stage::prior));
    copy->clone_control();
    EXPECT_NE(backbone::group_hash(copy->params(), backbone::kClone), backbone::group_hash(m->params(), backbone::kClone));
  }

  // 8 examples at batch 4 for 2 epochs.
  const auto log = train::read_log(results[0].log_path);
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log.front().step, 1);
  EXPECT_EQ(log.back().step, 4);
  std::ifstream in(results[0].log_path);
  std::string line;
  std::getline(in, line);
  const auto rec = nlohmann::json::parse(line);
  for (const char* k : {"step", "stage", "loss", "lr", "wall_time"}) EXPECT_TRUE(rec.contains(k)) << k;
  EXPECT_EQ(rec["wall_time"], 0.0);
  EXPECT_TRUE(fs::exists(fs::path(c.out) / "finetune" / "best.ckpt"));

  // Completed stages with the same config are reused rather than retrained.
  const auto again = train::run_curriculum(c, {.deterministic = true});
  EXPECT_TRUE(again.empty());
}

TEST_F(TrainerTest, RerunIsBitwiseReproducible) {
  const auto a = config("repro_a"), b = config("repro_b");
  train::run_stage(a, Stage::prior, std::nullopt, {.deterministic = true});
  train::run_stage(b, Stage::prior, std::nullopt, {.deterministic = true});
  EXPECT_EQ(digest(train::last_checkpoint(a, Stage::prior)), digest(train::last_checkpoint(b, Stage::prior)));
  EXPECT_EQ(digest(fs::path(a.out) / "prior" / "log.jsonl"), digest(fs::path(b.out) / "prior" / "log.jsonl"));
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  const auto straight = config("straight"), split = config("split");
  train::run_stage(straight, Stage::prior, std::nullopt, {.deterministic = true});
  train::run_stage(split, Stage::prior, std::nullopt, {.deterministic = true, .stop_after_epochs = 1});
  const auto half = ckpt::load_checkpoint(train::last_checkpoint(split, Stage::prior));
  EXPECT_FALSE(half.meta["complete"].get<bool>());
  EXPECT_THROW(train::run_stage(split, Stage::local), Error);  // prerequisite incomplete
  train::run_stage(split, Stage::prior, train::last_checkpoint(split, Stage::prior), {.deterministic = true});
  EXPECT_EQ(digest(train::last_checkpoint(straight, Stage::prior)), digest(train::last_checkpoint(split, Stage::prior)));
  EXPECT_EQ(digest(fs::path(straight.out) / "prior" / "log.jsonl"), digest(fs::path(split.out) / "prior" / "log.jsonl"));
}

TEST(TrainerMath, SmoothedEndpoints) {
  std::vector<train::LogRecord> log;
  for (int i = 0; i < 10; ++i) log.push_back({i + 1, 10.0 - i});
  const auto [a, b] = train::smoothed_endpoints(log);
  EXPECT_DOUBLE_EQ(a, 9.5);
  EXPECT_DOUBLE_EQ(b, 1.5);
  EXPECT_EQ(train::trainable_groups(Stage::global, {}), std::set<std::string>{backbone::kGlobal});
}

}  // namespace
}  // namespace cnc
