#include <gtest/gtest.h>

#include "cnc/triplets.hpp"

namespace cnc::triplets {
namespace {

Image random_image(int c, int s, unsigned seed) {
  std::mt19937_64 rng(seed);
  return rand_uniform<float>({c, s, s}, rng, 0.0f, 1.0f);
}

Mask random_mask(int s, unsigned seed) {
  std::mt19937_64 rng(seed);
  Mask m(s, s);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) m.set(y, x, (rng() & 3) == 0);
  return m;
}

ToySource toy_source(std::uint64_t seed) {
  auto scene = toy::sample_scene(seed, {});
  auto rendered = toy::render_scene(scene, 32);
  return {"s" + std::to_string(seed), scene, rendered};
}

TEST(Triplets, ForegroundIdentityAndNullMasks) {
  const Image im = random_image(3, 16, 1);
  EXPECT_EQ(make_foreground(im, Mask(16, 16, true)), im);
  EXPECT_EQ(max_abs(make_foreground(im, Mask(16, 16, false))), 0.0f);
}

TEST(Triplets, ReconstructionIdentityExact) {
  for (unsigned seed = 0; seed < 20; ++seed) {
    const Image im = random_image(3, 16, seed);
    const Mask m = random_mask(16, seed + 100);
    const Image fg = make_foreground(im, m), rest = apply_mask(im, m.complement());
    for (std::size_t i = 0; i < im.size(); ++i) ASSERT_EQ(fg[i] + rest[i], im[i]);
  }
}

TEST(Triplets, ShapeMismatch) {
  try {
    make_foreground(random_image(3, 16, 1), Mask(8, 8));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
}

TEST(Triplets, DilationPlusShapeAndMonotone) {
  Mask m(9, 9);
  m.set(4, 4, true);
  EXPECT_EQ(dilate_mask(m, 0), m);
  const Mask d = dilate_mask(m, 1);
  Mask expect(9, 9);
  for (auto [y, x] : {std::pair{4, 4}, {3, 4}, {5, 4}, {4, 3}, {4, 5}}) expect.set(y, x, true);
  EXPECT_EQ(d, expect);
  for (unsigned seed = 0; seed < 20; ++seed) {
    const Mask r = random_mask(16, seed);
    for (int rad = 0; rad < 4; ++rad) {
      const Mask dd = dilate_mask(r, rad);
      EXPECT_GE(dd.popcount(), r.popcount());
      for (std::size_t p = 0; p < r.size(); ++p)
        if (r[p]) {
          EXPECT_TRUE(dd[p]);
        }
    }
  }
  EXPECT_THROW(dilate_mask(m, -1), Error);
  EXPECT_EQ(default_dilation_radius(32), 1);
  EXPECT_EQ(default_dilation_radius(64), 2);
}

TEST(Triplets, BackgroundWithEmptyHoleIsSource) {
  const Image im = random_image(3, 16, 3);
  EXPECT_EQ(make_background(im, Mask(16, 16), MeanFillInpainter{}), im);
}

TEST(Triplets, MeanFillOnUniformBackground) {
  Image im({3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 256; ++p) im[static_cast<std::size_t>(c) * 256 + p] = 0.25f * (c + 1);
  Mask hole(16, 16);
  for (int y = 4; y < 11; ++y)
    for (int x = 3; x < 9; ++x) hole.set(y, x, true);
  const Image out = make_background(im, hole, MeanFillInpainter{});
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 256; ++p) EXPECT_FLOAT_EQ(out[static_cast<std::size_t>(c) * 256 + p], 0.25f * (c + 1));
}

TEST(Triplets, OracleBackgroundMatchesRenderer) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto src = toy_source(seed);
    const auto t = build_triplet(src, {});
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < t.mask.size(); ++p) {
        const std::size_t i = c * t.mask.size() + p;
        ASSERT_EQ(t.background[i], t.dilated_mask[p] ? src.rendered.true_background[i] : src.rendered.image[i]);
      }
  }
}

TEST(Triplets, ToyTripletInvariantsAndBackgroundCondition) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto src = toy_source(seed);
    const auto t = build_triplet(src, {});
    ASSERT_NO_THROW(validate_triplet(t)) << seed;
    std::vector<bool> behind(src.scene.objects.size(), true);
    behind.back() = false;
    const Image oracle = toy::render_depth(src.scene, 32, behind);
    ASSERT_LT(max_abs_diff(t.bg_condition, oracle), 1e-6f);
    // Foreground depth carries the salient object only.
    for (std::size_t p = 0; p < t.mask.size(); ++p)
      if (t.mask[p]) {
        ASSERT_FLOAT_EQ(t.fg_condition[p], 1.0f - src.scene.salient().z);
      }
  }
}

TEST(Triplets, EdgeConditionIsEdgeOfForegroundDepth) {
  const auto src = toy_source(4);
  TripletOptions depth_opts, edge_opts;
  edge_opts.condition_kind = ConditionKind::edge;
  const auto td = build_triplet(src, depth_opts), te = build_triplet(src, edge_opts);
  EXPECT_EQ(te.fg_condition, toy::edge_map(td.fg_condition));
  EXPECT_EQ(te.bg_condition, toy::edge_map(td.bg_condition));
}

TEST(Triplets, DepthVersions) {
  const auto src = toy_source(9);
  TripletOptions o;
  o.fg_depth_version = ForegroundDepthVersion::scene;
  EXPECT_EQ(build_triplet(src, o).fg_condition, src.rendered.depth_map);
  o.fg_depth_version = ForegroundDepthVersion::masked_foreground;
  const auto t = build_triplet(src, o);
  for (std::size_t p = 0; p < t.mask.size(); ++p)
    if (!t.mask[p]) {
      EXPECT_EQ(t.fg_condition[p], 0.0f);
    }
}

TEST(Triplets, ExternalRecordValidation) {
  ExternalRecord rec{"ext", random_image(3, 16, 5), std::nullopt, {}};
  auto constant_depth = [](const Image& im) { return Image({1, height(im), width(im)}, 0.5f); };
  const MeanFillInpainter fill;
  try {
    build_triplet(rec, {}, fill, constant_depth);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ingestion);
  }
  rec.mask = Mask(8, 8);
  try {
    build_triplet(rec, {}, fill, constant_depth);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ingestion);
  }
  rec.mask = random_mask(16, 6);
  const auto t = build_triplet(rec, {}, fill, constant_depth);
  EXPECT_NO_THROW(validate_triplet(t));
}

class LeakyInpainter : public Inpainter {
 public:
  std::string backend_id() const override { return "leaky"; }
  Image fill(const Image& image, const Mask&) const override {
    Image out = image;
    out[0] += 0.5f;
    return out;
  }
};

class BrokenInpainter : public Inpainter {
 public:
  std::string backend_id() const override { return "broken"; }
  Image fill(const Image&, const Mask&) const override { throw std::runtime_error("model unavailable"); }
};

TEST(Triplets, InpainterFailuresNameBackend) {
  const Image im = random_image(3, 16, 8);
  Mask hole(16, 16);
  hole.set(8, 8, true);
  for (const Inpainter* b : std::initializer_list<const Inpainter*>{new LeakyInpainter, new BrokenInpainter}) {
    try {
      make_background(im, hole, *b);
      ADD_FAILURE();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::inpainting);
      EXPECT_NE(std::string(e.what()).find(b->backend_id()), std::string::npos);
    }
    delete b;
  }
}

TEST(Triplets, InpainterLocalityProperty) {
  const MeanFillInpainter fill;
  for (unsigned seed = 0; seed < 30; ++seed) {
    const Image im = random_image(3, 16, seed);
    const Mask hole = random_mask(16, seed + 7);
    const Image out = fill.fill(im, hole);
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < hole.size(); ++p)
        if (!hole[p]) {
          ASSERT_EQ(out[c * hole.size() + p], im[c * hole.size() + p]);
        }
  }
}

}  // namespace
}  // namespace cnc::triplets
