#include <gtest/gtest.h>

#include <sstream>

#include "cnc/eval.hpp"
#include "support/fixtures.hpp"

namespace cnc {
namespace {

using eval::EvalItem;

backbone::UNetConfig eval_config() {
  auto c = testing::tiny_config();
  c.resolution = 32;
  c.text_tokens = 8;
  c.vocab_size = 64;
  c.timesteps = 100;
  return c;
}

Image checkerboard(int side) {
  Image im({3, side, side});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) im[(static_cast<std::size_t>(c) * side + y) * side + x] = static_cast<float>((x + y) % 2);
  return im;
}

Image inverse(const Image& im) {
  Image out = im;
  for (auto& v : out.storage()) v = 1.0f - v;
  return out;
}

// Direct SSIM: 2-D kernel built in one pass, statistics from explicit window sums.
double reference_ssim(const Image& a, const Image& b) {
  const int H = height(a), W = width(a);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  auto Y = [&](const Image& im, std::size_t p) { return 0.299 * im[p] + 0.587 * im[hw + p] + 0.114 * im[2 * hw + p]; };
  double k[7][7], z = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) z += k[i][j] = std::exp(-((i - 3) * (i - 3) + (j - 3) * (j - 3)) / (2 * 1.5 * 1.5));
  double total = 0;
  int n = 0;
  for (int r = 0; r <= H - 7; ++r)
    for (int c = 0; c <= W - 7; ++c) {
      double mx = 0, my = 0;
      for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
          const std::size_t p = static_cast<std::size_t>(r + i) * W + c + j;
          mx += k[i][j] / z * Y(a, p);
          my += k[i][j] / z * Y(b, p);
        }
      double vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
          const std::size_t p = static_cast<std::size_t>(r + i) * W + c + j;
          vx += k[i][j] / z * (Y(a, p) - mx) * (Y(a, p) - mx);
          vy += k[i][j] / z * (Y(b, p) - my) * (Y(b, p) - my);
          cov += k[i][j] / z * (Y(a, p) - mx) * (Y(b, p) - my);
        }
      const double c1 = 1e-4, c2 = 9e-4;
      total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++n;
    }
  return total / n;
}

TEST(Ssim, SelfSimilaritySymmetryAndBounds) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = rand_uniform<float>({3, 16, 16}, rng, 0.0f, 1.0f);
    const auto b = rand_uniform<float>({3, 16, 16}, rng, 0.0f, 1.0f);
    EXPECT_NEAR(eval::ssim(a, a), 1.0, 1e-12);
    EXPECT_NEAR(eval::ssim(a, b), eval::ssim(b, a), 1e-9);
    const double s = eval::ssim(a, b);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_LT(s, 0.5);
    EXPECT_NEAR(s, reference_ssim(a, b), 1e-9);
  }
  EXPECT_THROW(eval::ssim(Image({3, 16, 16}), Image({3, 8, 8})), Error);
}

TEST(Ssim, CheckerboardAgainstInverseIsNegative) {
  const auto x = checkerboard(16);
  const double s = eval::ssim(x, inverse(x));
  EXPECT_LT(s, -0.9);
  EXPECT_NEAR(s, reference_ssim(x, inverse(x)), 1e-9);
}

class EstimatorFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::vector<toy::RenderedSample> tr, va;
    for (int i = 0; i < 500; ++i) tr.push_back(toy::render_scene(toy::sample_scene(derive_seed(1, "tr", i), {}), 32));
    for (int i = 0; i < 40; ++i) va.push_back(toy::render_scene(toy::sample_scene(derive_seed(2, "va", i), {}), 32));
    toy::DepthEstimatorConfig cfg;
    cfg.hidden = 16;
    cfg.epochs = 8;
    cfg.threshold = 0.2;
    estimator_ = new toy::DepthEstimator(toy::train_depth_estimator(toy::depth_pairs(tr), toy::depth_pairs(va), cfg));
  }
  static void TearDownTestSuite() { delete estimator_; }
  static toy::DepthEstimator* estimator_;
};
toy::DepthEstimator* EstimatorFixture::estimator_ = nullptr;

TEST_F(EstimatorFixture, DepthMaeOfGroundTruthIsBoundedByEstimatorError) {
  double sum = 0;
  const int n = 40;
  for (int i = 0; i < n; ++i) {
    const auto r = toy::render_scene(toy::sample_scene(derive_seed(3, "heldout", i), {}), 32);
    const double d = eval::depth_mae(r.image, r.depth_map, *estimator_);
    EXPECT_EQ(d, eval::depth_mae(r.image, r.depth_map, *estimator_));
    sum += d;
  }
  EXPECT_LE(sum / n, estimator_->validation_mae() + 0.01);
}

TEST_F(EstimatorFixture, DepthMaeOfConstantImageMatchesDirectComputation) {
  const Image gray({3, 32, 32}, 0.5f);
  const Image pred = estimator_->predict(gray);
  double gray_total = 0, truth_total = 0;
  const int scenes = 20;
  for (int i = 0; i < scenes; ++i) {
    const auto r = toy::render_scene(toy::sample_scene(700 + i, {}), 32);
    double direct = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) direct += std::abs(static_cast<double>(pred[p]) - r.depth_map[p]);
    direct /= static_cast<double>(pred.size());
    EXPECT_NEAR(eval::depth_mae(gray, r.depth_map, *estimator_), direct, 1e-12);
    gray_total += direct;
    truth_total += eval::depth_mae(r.image, r.depth_map, *estimator_);
  }
  // A constant image cannot track per-scene depth; the rendered truth can.
  EXPECT_GT(gray_total / scenes, truth_total / scenes);
  EXPECT_THROW(eval::depth_mae(gray, Image({1, 32, 32}, 0.5f), toy::DepthEstimator(4)), Error);
}

class OcclusionTest : public ::testing::Test {
 protected:
  OcclusionTest() : vocab_(embed::Vocabulary::toy_default()), cfg_(eval_config()) {
    eval::OcclusionSpec spec;
    spec.count = 12;
    spec.seed = 4;
    pairs_ = eval::make_occlusion_pairs(spec, vocab_, cfg_);
  }
  embed::Vocabulary vocab_;
  backbone::UNetConfig cfg_;
  std::vector<eval::OcclusionPair> pairs_;
};

TEST_F(OcclusionTest, OracleScoresPerfectlyInBothDepthOrders) {
  ASSERT_EQ(pairs_.size(), 12u);
  for (const auto& p : pairs_) {
    EXPECT_GE(p.overlap.popcount(), 6u);
    EXPECT_NE(p.expected_style, p.other_style);
  }
  EXPECT_EQ(eval::occlusion_accuracy(pairs_, eval::oracle_renderer(), 0).accuracy, 1.0);
  std::vector<eval::OcclusionPair> flipped;
  for (const auto& p : pairs_) {
    flipped.push_back(eval::swapped(p, vocab_, cfg_));
    EXPECT_EQ(flipped.back().expected_style, p.other_style);
    EXPECT_EQ(flipped.back().overlap, p.overlap);
  }
  EXPECT_EQ(eval::occlusion_accuracy(flipped, eval::oracle_renderer(), 0).accuracy, 1.0);
}

TEST_F(OcclusionTest, ConditionBlindRenderersScoreNearChance) {
  std::vector<eval::OcclusionPair> both = pairs_;
  for (const auto& p : pairs_) both.push_back(eval::swapped(p, vocab_, cfg_));
  // The same image for a pair and its swap: at most one of the two can be right.
  const eval::Renderer noise = [](std::span<const ConditionSet> conds, std::span<const Image>, std::uint64_t seed) {
    std::vector<Image> out;
    const std::size_t half = conds.size() / 2;
    for (std::size_t i = 0; i < conds.size(); ++i) {
      std::mt19937_64 rng(derive_seed(seed, "noise", i % half));
      out.push_back(rand_uniform<float>({3, 32, 32}, rng, 0.0f, 1.0f));
    }
    return out;
  };
  EXPECT_LE(eval::occlusion_accuracy(both, noise, 3).accuracy, 0.5);

  auto model = backbone::build_unet<float>(cfg_, 2);
  const diffusion::DiffusionSchedule schedule(100);
  diffusion::SampleOptions opts;
  opts.steps = 5;
  const auto r = eval::occlusion_accuracy(both, eval::model_renderer(*model, schedule, opts), 1);
  EXPECT_EQ(r.n, 24);
  EXPECT_LE(r.accuracy, 0.6);
}

TEST_F(OcclusionTest, EmptyOverlapIsSkippedWithWarning) {
  auto pairs = pairs_;
  pairs[3].overlap = Mask(32, 32);
  std::ostringstream warn;
  const auto r = eval::occlusion_accuracy(pairs, eval::oracle_renderer(), 0, &warn);
  EXPECT_EQ(r.n, 11);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0], pairs[3].id);
  EXPECT_NE(warn.str().find("empty overlap"), std::string::npos);
}

class SemanticTest : public ::testing::Test {
 protected:
  SemanticTest() : cfg_(eval_config()) {
    const auto vocab = embed::Vocabulary::toy_default();
    for (int i = 0; i < 6; ++i) {
      const auto scene = toy::sample_scene(derive_seed(8, "semantic", i), {});
      items_.push_back(eval::make_item({data::sample_id("sem", i), scene, toy::render_scene(scene, 32)}, {}, vocab, cfg_));
    }
  }
  static Image stitch(const EvalItem& it) {
    Image out = it.bg_exemplar;
    const std::size_t hw = it.mask.size();
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        if (it.mask[p]) out[c * hw + p] = it.fg_exemplar[c * hw + p];
    return out;
  }
  backbone::UNetConfig cfg_;
  std::vector<EvalItem> items_;
};

TEST_F(SemanticTest, StitchedExemplarsScoreHigh) {
  for (const auto& it : items_) {
    const auto s = eval::semantic_localization_score(stitch(it), it.mask, it.fg_exemplar, it.bg_exemplar);
    ASSERT_TRUE(s.avg().has_value());
    EXPECT_GE(*s.avg(), 0.9) << it.id;
  }
}

TEST_F(SemanticTest, SwappedExemplarsSwapRoles) {
  const embed::ImageEmbedder e;
  for (const auto& it : items_) {
    const auto g = stitch(it);
    const auto s = eval::semantic_localization_score(g, it.mask, it.bg_exemplar, it.fg_exemplar);
    EXPECT_DOUBLE_EQ(*s.fg_sim, embed::cosine_similarity(e(triplets::apply_mask(g, it.mask)).vector, e(it.bg_exemplar).vector));
    EXPECT_DOUBLE_EQ(*s.bg_sim,
                     embed::cosine_similarity(e(triplets::apply_mask(g, it.mask.complement())).vector, e(it.fg_exemplar).vector));
  }
  const auto r = eval::semantic_pairing(items_, eval::oracle_renderer(), 0);
  EXPECT_GT(r.margin, 0.05);
  EXPECT_EQ(r.correct.avg.n, 6);
}

TEST_F(SemanticTest, UniformGrayCarriesNoLocalizationSignal) {
  // Gray carries the mask silhouette and no palette. Masking zeroes the same pixels in the
  // foreground crop and in I_f, so fg_sim stays high; the palette-bearing side is where gray
  // loses to the stitched image.
  const Image gray_image({3, 32, 32}, 0.5f);
  const eval::Renderer gray = [&](std::span<const ConditionSet> c, std::span<const Image>, std::uint64_t) {
    return std::vector<Image>(c.size(), gray_image);
  };
  for (const auto& it : items_) {
    const auto s = eval::semantic_localization_score(gray_image, it.mask, it.fg_exemplar, it.bg_exemplar);
    const auto o = eval::semantic_localization_score(stitch(it), it.mask, it.fg_exemplar, it.bg_exemplar);
    EXPECT_LT(*s.bg_sim, *o.bg_sim - 0.2) << it.id;
    EXPECT_LE(*s.fg_sim, *o.fg_sim + 1e-6) << it.id;
  }
  const auto g = eval::semantic_pairing(items_, gray, 0);
  const auto o = eval::semantic_pairing(items_, eval::oracle_renderer(), 0);
  EXPECT_LT(g.correct.avg.mean, o.correct.avg.mean - 0.15);
  EXPECT_LT(g.margin, o.margin - 0.15);
}

TEST_F(SemanticTest, UndefinedSidesAndShapeErrors) {
  const auto& it = items_[0];
  const auto s = eval::semantic_localization_score(it.truth, Mask(32, 32), it.fg_exemplar, it.bg_exemplar);
  EXPECT_FALSE(s.fg_sim.has_value());
  ASSERT_TRUE(s.bg_sim.has_value());
  EXPECT_EQ(*s.avg(), *s.bg_sim);
  EXPECT_FALSE(eval::SemanticScore{}.avg().has_value());
  EXPECT_THROW(eval::semantic_localization_score(it.truth, Mask(16, 16), it.fg_exemplar, it.bg_exemplar), Error);
}

TEST_F(SemanticTest, LambdaSweepDegenerateGridAndErrors) {
  const auto sweep = eval::lambda_sweep(items_, eval::oracle_renderer(), {1.0}, 1, 0);
  ASSERT_EQ(sweep.rows.size(), 1u);
  std::vector<eval::SemanticScore> direct;
  for (const auto& it : items_)
    direct.push_back(eval::semantic_localization_score(it.truth, it.mask, it.fg_exemplar, it.bg_exemplar));
  const auto agg = eval::aggregate(direct);
  EXPECT_DOUBLE_EQ(sweep.rows[0].score.avg.mean, agg.avg.mean);
  EXPECT_DOUBLE_EQ(sweep.rows[0].score.bg_sim.mean, agg.bg_sim.mean);
  EXPECT_NE(sweep.csv().find("lambda_bg,"), std::string::npos);
  EXPECT_THROW(eval::lambda_sweep(items_, eval::oracle_renderer(), {}, 1, 0), Error);

  eval::LambdaSweep fake;
  for (double b : {0.2, 0.3, 0.3}) fake.rows.push_back({0, {{}, {b, 0, 1}, {}}});
  EXPECT_TRUE(fake.bg_non_decreasing());
  fake.rows.push_back({0, {{}, {0.1, 0, 1}, {}}});
  EXPECT_FALSE(fake.bg_non_decreasing());
}

TEST_F(SemanticTest, ZeroLambdaAnnihilatesTheBackgroundExemplar) {
  auto model = backbone::build_unet<float>(cfg_, 6);
  std::mt19937_64 rng(12);
  // Wake every branch, including the zero-initialized ones.
  for (auto& p : model->params().params())
    if (p.group != backbone::kFrozen) p.var.mutable_value() = randn<float>(p.var.shape(), rng, 0.05f);
  const diffusion::DiffusionSchedule schedule(100);
  diffusion::SampleOptions opts;
  opts.steps = 4;
  const auto render = eval::model_renderer(*model, schedule, opts);
  EXPECT_EQ(eval::fg_pixels_changed_by_bg_exemplar(items_, render, 5), 0u);

  // Control: with lambda_bg = 1 the exemplar does reach the image.
  auto a = eval::conditions_of(items_), b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i].bg_embedding = a[(i + 1) % a.size()].bg_embedding;
  const auto ia = render(a, {}, 5), ib = render(b, {}, 5);
  double diff = 0;
  for (std::size_t i = 0; i < ia.size(); ++i) diff += max_abs_diff(ia[i], ib[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(EvalReport, ValidationAndCsv) {
  eval::EvalReport r;
  r.suite = "recon";
  r.metrics["ssim"] = eval::summarize({0.5, 0.7});
  EXPECT_DOUBLE_EQ(r.metrics["ssim"].mean, 0.6);
  EXPECT_DOUBLE_EQ(r.metrics["ssim"].std, 0.1);
  EXPECT_NO_THROW(r.validate(2));
  EXPECT_THROW(r.validate(3), Error);
  r.metrics["bad"] = {NAN, 0, 2};
  EXPECT_THROW(r.validate(2), Error);
  r.records = {{{"id", "a"}, {"ssim", 0.5}}, {{"id", "b"}, {"extra", 1}}};
  EXPECT_EQ(r.records_csv(), "id,ssim,extra\na,0.5,\nb,,1\n");
  EXPECT_EQ(r.to_json()["schema_version"], eval::kReportSchemaVersion);
  const auto grid = eval::image_grid({Image({3, 4, 4}, 1.0f), Image({3, 4, 4}, 0.5f), Image({3, 4, 4})}, 2);
  EXPECT_EQ(channels(grid), 3);
}

}  // namespace
}  // namespace cnc
