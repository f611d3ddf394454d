#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnc/core/image.hpp"
#include "cnc/core/nn.hpp"
#include "cnc/core/rng.hpp"
#include "cnc/toy_world.hpp"

/// Deterministic stand-ins for the text and image encoders.
namespace cnc::embed {

inline constexpr int kDefaultContextLength = 8;  // T
inline constexpr int kDefaultContextDim = 64;    // D_ctx
inline constexpr int kDefaultEmbeddingDim = 64;  // D_emb
inline constexpr const char* kPadWord = "<pad>";

/// Closed word list. Id 0 is the pad token.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const auto& w : words) add(w);
  }

  static Vocabulary toy_default() {
    std::vector<std::string> words{kPadWord};
    for (const auto& s : toy::kObjectStyles) words.emplace_back(s.name);
    for (const auto* s : toy::kShapeNames) words.emplace_back(s);
    for (const auto& s : toy::kBackgroundStyles) words.emplace_back(s.name);
    for (const char* w : {"front", "on",     "in",      "of",     "behind", "a",      "the",      "and",
                          "small", "large",  "near",    "far",    "left",   "right",  "top",      "bottom",
                          "solid", "striped", "checkered", "gradient", "plain", "scene", "object", "with",
                          "over",  "under",  "shape",   "bright", "dark",   "light",  "center",   "edge",
                          "above", "below",  "beside",  "tiny",   "big",    "round",  "corner",   "empty",
                          "background", "foreground"})
      words.emplace_back(w);
    return Vocabulary(words);
  }

  int add(const std::string& word) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(words_.size());
    ids_[word] = id;
    words_.push_back(word);
    return id;
  }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) fail(ErrorKind::vocabulary, "out-of-vocabulary word '" + word + "'");
    return it->second;
  }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  int pad_id() const { return 0; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [w, i] : ids_) j[w] = i;
    return j;
  }
  static Vocabulary from_json(const nlohmann::json& j) {
    std::vector<std::string> words(j.size());
    for (const auto& [w, i] : j.items()) {
      const int id = i.get<int>();
      require(id >= 0 && id < static_cast<int>(words.size()) && words[static_cast<std::size_t>(id)].empty(),
              ErrorKind::vocabulary, "vocabulary ids must be a permutation of 0..n-1");
      words[static_cast<std::size_t>(id)] = w;
    }
    return Vocabulary(words);
  }
  void save(const std::filesystem::path& path) const { std::ofstream(path) << to_json().dump(2) << '\n'; }
  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot read vocabulary " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

 private:
  std::map<std::string, int> ids_;
  std::vector<std::string> words_;
};

/// Token ids of a prompt padded to `length`. Throws on unknown words or overlong prompts.
inline std::vector<int> tokenize(const std::vector<std::string>& prompt, const Vocabulary& vocab,
                                 int length = kDefaultContextLength) {
  require(static_cast<int>(prompt.size()) <= length, ErrorKind::vocabulary,
          "prompt has " + std::to_string(prompt.size()) + " words, context holds " + std::to_string(length));
  std::vector<int> ids(static_cast<std::size_t>(length), vocab.pad_id());
  for (std::size_t i = 0; i < prompt.size(); ++i) ids[i] = vocab.id(prompt[i]);
  return ids;
}

/// Fixed sinusoidal positional offset [T, D].
template <typename T>
Tensor<T> positional_offset(int length, int dim) {
  Tensor<T> pe({length, dim});
  for (int p = 0; p < length; ++p)
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe[static_cast<std::size_t>(p) * dim + i] = static_cast<T>(i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq));
    }
  return pe;
}

/// Learned word table + positional offset. The table belongs to the frozen prior.
template <typename T>
struct TextEncoder {
  Var<T> table;  ///< [V, D_ctx]
  int length = kDefaultContextLength;
  int dim = kDefaultContextDim;
  Tensor<T> positions;

  TextEncoder() = default;
  TextEncoder(nn::Builder<T> b, int vocab_size, int length_ = kDefaultContextLength, int dim_ = kDefaultContextDim)
      : length(length_), dim(dim_), positions(positional_offset<T>(length_, dim_)) {
    table = b.normal("table", {vocab_size, dim}, 1.0);
  }

  /// ids: N*T token ids (row-major). Returns [N, T, D] = table[ids] + positional offset.
  Var<T> operator()(const std::vector<int>& ids) const {
    require(ids.size() % static_cast<std::size_t>(length) == 0, ErrorKind::shape, "token ids not a multiple of T");
    const int N = static_cast<int>(ids.size()) / length, V = table.dim(0);
    Tensor<T> out({N, length, dim});
    for (std::size_t r = 0; r < ids.size(); ++r) {
      require(ids[r] >= 0 && ids[r] < V, ErrorKind::vocabulary, "token id " + std::to_string(ids[r]) + " outside vocabulary");
      const T* src = table.value().data() + static_cast<std::size_t>(ids[r]) * dim;
      const T* pos = positions.data() + (r % static_cast<std::size_t>(length)) * dim;
      for (int d = 0; d < dim; ++d) out[r * dim + d] = src[d] + pos[d];
    }
    const int D = dim;
    return make_result<T>(std::move(out), {table}, [ids, D](Node<T>& self) {
      if (auto* g = grad_sink(self, 0))
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (int d = 0; d < D; ++d) (*g)[static_cast<std::size_t>(ids[r]) * D + d] += self.grad[r * D + d];
    });
  }
};

struct TextTokens {
  std::vector<int> ids;  ///< length T
  Tensor<float> tokens;  ///< [T, D_ctx]
};

inline TextTokens embed_text(const std::vector<std::string>& prompt, const Vocabulary& vocab,
                             const TextEncoder<float>& encoder) {
  TextTokens out;
  out.ids = tokenize(prompt, vocab, encoder.length);
  NoGradGuard guard;
  out.tokens = encoder(out.ids).value().reshaped({encoder.length, encoder.dim});
  return out;
}

// ---------------------------------------------------------------------------------------------
// Image embedder

struct SemanticEmbedding {
  std::vector<float> vector;  ///< unit norm, D_emb entries
  std::string source_id;
};

inline double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  require(a.size() == b.size(), ErrorKind::shape, "cosine_similarity: dimension mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return ab / std::sqrt(aa * bb);
}

inline double cosine_similarity(const SemanticEmbedding& a, const SemanticEmbedding& b) {
  return cosine_similarity(a.vector, b.vector);
}

/// Frozen feature embedder: centered 8x8x3 thumbnail and 3x16-bin color histogram, a seeded
/// Gaussian projection, then unit normalization.
class ImageEmbedder {
 public:
  static constexpr int kThumb = 8;
  static constexpr int kBins = 16;
  static constexpr int kFeatures = kThumb * kThumb * 3 + 3 * kBins;
  static constexpr std::uint64_t kDefaultSeed = 0xC0FFEEULL;

  explicit ImageEmbedder(int dim = kDefaultEmbeddingDim, std::uint64_t seed = kDefaultSeed) : dim_(dim), seed_(seed) {
    std::mt19937_64 rng(derive_seed(seed, "embed.image.projection"));
    projection_ = randn<float>({dim, kFeatures}, rng, 1.0f / std::sqrt(static_cast<float>(dim)));
  }

  int dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<float> features(const Image& image) const {
    require(channels(image) == 3, ErrorKind::shape, "embed_image expects an RGB image");
    require(all_finite(image), ErrorKind::input, "embed_image: non-finite pixel values");
    const int H = height(image), W = width(image);
    require(H % kThumb == 0 && W % kThumb == 0, ErrorKind::shape, "embed_image: size must be a multiple of 8");
    Tensor<float> batched = image.reshaped({1, 3, H, W});
    const Tensor<float> thumb = ops::area_downsample(batched, H / kThumb);
    std::vector<float> f;
    f.reserve(kFeatures);
    for (float v : thumb.storage()) f.push_back(v - 0.5f);
    // Histogram weight keeps both blocks at comparable norm.
    const float weight = static_cast<float>(kThumb);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < 3; ++c) {
      std::vector<float> hist(kBins, 0.0f);
      for (std::size_t p = 0; p < hw; ++p) {
        const float v = std::clamp(image[c * hw + p], 0.0f, 1.0f);
        hist[static_cast<std::size_t>(std::min(kBins - 1, static_cast<int>(v * kBins)))] += 1.0f;
      }
      for (float h : hist) f.push_back(weight * (h / static_cast<float>(hw) - 1.0f / kBins));
    }
    return f;
  }

  SemanticEmbedding operator()(const Image& image, std::string source_id = {}) const {
    const auto f = features(image);
    SemanticEmbedding e;
    e.source_id = std::move(source_id);
    e.vector.assign(static_cast<std::size_t>(dim_), 0.0f);
    double norm = 0;
    for (int o = 0; o < dim_; ++o) {
      double s = 0;
      for (int i = 0; i < kFeatures; ++i) s += static_cast<double>(projection_[static_cast<std::size_t>(o) * kFeatures + i]) * f[i];
      e.vector[static_cast<std::size_t>(o)] = static_cast<float>(s);
      norm += s * s;
    }
    norm = std::sqrt(norm);
    if (norm > 0)
      for (auto& v : e.vector) v = static_cast<float>(v / norm);
    return e;
  }

 private:
  int dim_;
  std::uint64_t seed_;
  Tensor<float> projection_;
};

inline SemanticEmbedding embed_image(const Image& image) {
  static const ImageEmbedder embedder;
  return embedder(image);
}

}  // namespace cnc::embed
