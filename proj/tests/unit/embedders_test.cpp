#include <gtest/gtest.h>

#include <limits>

#include "cnc/embedders.hpp"

namespace cnc::embed {
namespace {

Image solid(float r, float g, float b, int side = 32) {
  Image im({3, side, side});
  const std::size_t hw = static_cast<std::size_t>(side) * side;
  for (std::size_t p = 0; p < hw; ++p) {
    im[p] = r;
    im[hw + p] = g;
    im[2 * hw + p] = b;
  }
  return im;
}

TextEncoder<float> make_encoder(const Vocabulary& v) {
  nn::ParamStore<float> store;
  std::mt19937_64 rng(5);
  return TextEncoder<float>(nn::Builder<float>(store, "frozen", rng, "text"), v.size());
}

TEST(Embedders, VocabularyCoversToyWorld) {
  const auto v = Vocabulary::toy_default();
  EXPECT_LE(v.size(), 64);
  for (std::uint64_t seed = 0; seed < 200; ++seed)
    EXPECT_NO_THROW(tokenize(toy::render_scene(toy::sample_scene(seed, {}), 32).prompt, v));
  const auto round = Vocabulary::from_json(v.to_json());
  EXPECT_EQ(round.size(), v.size());
  EXPECT_EQ(round.id("sky"), v.id("sky"));
}

TEST(Embedders, EmptyPromptIsAllPad) {
  const auto v = Vocabulary::toy_default();
  const auto enc = make_encoder(v);
  const auto t = embed_text({}, v, enc);
  EXPECT_EQ(t.ids, std::vector<int>(8, v.pad_id()));
  EXPECT_EQ(t.tokens.shape(), (Shape{8, 64}));
}

TEST(Embedders, OutOfVocabularyNamesWord) {
  const auto v = Vocabulary::toy_default();
  try {
    tokenize({"red", "zeppelin"}, v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::vocabulary);
    EXPECT_NE(std::string(e.what()).find("zeppelin"), std::string::npos);
  }
}

TEST(Embedders, TextDeterministicAndLocal) {
  const auto v = Vocabulary::toy_default();
  const auto enc = make_encoder(v);
  const auto a = embed_text({"red", "circle", "on", "sky"}, v, enc);
  const auto b = embed_text({"red", "circle", "on", "sky"}, v, enc);
  EXPECT_EQ(a.tokens, b.tokens);
  const auto c = embed_text({"red", "square", "on", "sky"}, v, enc);
  // Subtract the positional offset and compare against direct table lookup.
  const auto pe = positional_offset<float>(8, 64);
  for (int t = 0; t < 8; ++t) {
    bool differs = false;
    for (int d = 0; d < 64; ++d) {
      const std::size_t i = static_cast<std::size_t>(t) * 64 + d;
      const float ra = a.tokens[i] - pe[i], rc = c.tokens[i] - pe[i];
      EXPECT_NEAR(rc, enc.table.value()[static_cast<std::size_t>(c.ids[t]) * 64 + d], 1e-6f);
      differs |= ra != rc;
    }
    EXPECT_EQ(differs, t == 1) << t;
  }
}

TEST(Embedders, ImageSelfSimilarityAndNorm) {
  const auto im = toy::render_scene(toy::sample_scene(11, {}), 32).image;
  const auto e = embed_image(im);
  EXPECT_EQ(e.vector.size(), 64u);
  EXPECT_NEAR(cosine_similarity(e, e), 1.0, 1e-9);
  double n = 0;
  for (float x : e.vector) n += x * x;
  EXPECT_NEAR(n, 1.0, 1e-5);
  EXPECT_EQ(embed_image(im).vector, e.vector);
}

TEST(Embedders, RedVersusBlue) {
  EXPECT_LT(cosine_similarity(embed_image(solid(1, 0, 0)), embed_image(solid(0, 0, 1))), 0.9);
}

TEST(Embedders, TranslationTolerance) {
  double worst = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto im = toy::render_scene(toy::sample_scene(seed, {}), 32).image;
    Image shifted = im;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 1; x < 32; ++x)
          shifted[(static_cast<std::size_t>(c) * 32 + y) * 32 + x] = im[(static_cast<std::size_t>(c) * 32 + y) * 32 + x - 1];
    worst = std::min(worst, cosine_similarity(embed_image(im), embed_image(shifted)));
  }
  EXPECT_GT(worst, 0.95);
}

TEST(Embedders, NonFiniteRejected) {
  Image im = solid(0.5f, 0.5f, 0.5f);
  im[7] = std::numeric_limits<float>::quiet_NaN();
  try {
    embed_image(im);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::input);
  }
}

TEST(Embedders, StyleSeparation) {
  // 240 rendered backgrounds (40 per style), object-free renders so only the style varies.
  std::vector<std::pair<int, SemanticEmbedding>> items;
  for (std::uint64_t seed = 0; seed < 240; ++seed) {
    auto scene = toy::sample_scene(seed, {});
    scene.background_style = static_cast<int>(seed % toy::kBackgroundStyles.size());
    std::vector<bool> none(scene.objects.size(), false);
    // Keep non-salient objects so renders within a style are not identical.
    for (std::size_t k = 0; k + 1 < scene.objects.size(); ++k) none[k] = true;
    items.emplace_back(scene.background_style, embed_image(toy::render_image(scene, 32, none)));
  }
  double intra = 0, inter = 0;
  long n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      const double s = cosine_similarity(items[i].second, items[j].second);
      if (items[i].first == items[j].first) {
        intra += s;
        ++n_intra;
      } else {
        inter += s;
        ++n_inter;
      }
    }
  EXPECT_GT(intra / n_intra, inter / n_inter);
}

}  // namespace
}  // namespace cnc::embed
