#pragma once

#include <span>
#include <vector>

#include "cnc/core/image.hpp"

namespace cnc {

/// Which conditions are replaced by their null value.
struct DropFlags {
  bool fg_map = false;
  bool bg_map = false;
  bool fg_embedding = false;
  bool bg_embedding = false;
  bool text = false;

  static DropFlags all() { return {true, true, true, true, true}; }
  bool any() const { return fg_map || bg_map || fg_embedding || bg_embedding || text; }
  bool all_set() const { return fg_map && bg_map && fg_embedding && bg_embedding && text; }
  bool operator==(const DropFlags&) const = default;
};

/// Conditions of one sample.
struct ConditionSet {
  Image fg_condition;  ///< [1, P, P]
  Image bg_condition;  ///< [1, P, P]
  std::vector<float> fg_embedding;
  std::vector<float> bg_embedding;
  std::vector<int> text_ids;  ///< length T
  Mask mask;                  ///< P x P
  float lambda_fg = 1.0f;
  float lambda_bg = 1.0f;
  DropFlags drop;

  void validate() const {
    require(fg_condition.same_shape(bg_condition) && fg_condition.rank() == 3 && channels(fg_condition) == 1,
            ErrorKind::shape, "condition maps must be matching [1, P, P] maps");
    require(mask.height() == height(fg_condition) && mask.width() == width(fg_condition), ErrorKind::shape,
            "mask resolution does not match the condition maps");
    require(fg_embedding.size() == bg_embedding.size(), ErrorKind::shape, "embedding dimensions differ");
    require(std::isfinite(lambda_fg) && std::isfinite(lambda_bg) && lambda_fg >= 0 && lambda_bg >= 0,
            ErrorKind::argument, "lambda must be finite and nonnegative");
  }
};

/// The unconditional set: zero maps, zero lambdas (tokens vanish), pad text, all-true mask.
inline ConditionSet null_conditions(const ConditionSet& like) {
  ConditionSet out = like;
  out.drop = DropFlags::all();
  return out;
}

/// Stacked conditions of a batch with drop flags already applied.
template <typename T>
struct ConditionBatch {
  Tensor<T> fg_maps;        ///< [B, 1, P, P]
  Tensor<T> bg_maps;        ///< [B, 1, P, P]
  Tensor<T> fg_embeddings;  ///< [B, D_emb]
  Tensor<T> bg_embeddings;  ///< [B, D_emb]
  std::vector<int> text_ids;  ///< B * T
  std::vector<Mask> masks;
  std::vector<T> lambda_fg;
  std::vector<T> lambda_bg;

  int size() const { return static_cast<int>(masks.size()); }
};

template <typename T>
ConditionBatch<T> batch_conditions(std::span<const ConditionSet> sets, int pad_id = 0) {
  require(!sets.empty(), ErrorKind::argument, "empty condition batch");
  const int B = static_cast<int>(sets.size());
  const int P = height(sets[0].fg_condition);
  const int D = static_cast<int>(sets[0].fg_embedding.size());
  const int Tn = static_cast<int>(sets[0].text_ids.size());
  ConditionBatch<T> out;
  out.fg_maps = Tensor<T>({B, 1, P, P});
  out.bg_maps = Tensor<T>({B, 1, P, P});
  out.fg_embeddings = Tensor<T>({B, D});
  out.bg_embeddings = Tensor<T>({B, D});
  const std::size_t pp = static_cast<std::size_t>(P) * P;
  for (int n = 0; n < B; ++n) {
    const auto& s = sets[static_cast<std::size_t>(n)];
    s.validate();
    require(height(s.fg_condition) == P && static_cast<int>(s.fg_embedding.size()) == D &&
                static_cast<int>(s.text_ids.size()) == Tn,
            ErrorKind::shape, "condition sets in a batch must share shapes");
    for (std::size_t p = 0; p < pp; ++p) {
      out.fg_maps[n * pp + p] = s.drop.fg_map ? T(0) : static_cast<T>(s.fg_condition[p]);
      out.bg_maps[n * pp + p] = s.drop.bg_map ? T(0) : static_cast<T>(s.bg_condition[p]);
    }
    for (int d = 0; d < D; ++d) {
      const auto k = static_cast<std::size_t>(n) * D + d;
      out.fg_embeddings[k] = s.drop.fg_embedding ? T(0) : static_cast<T>(s.fg_embedding[static_cast<std::size_t>(d)]);
      out.bg_embeddings[k] = s.drop.bg_embedding ? T(0) : static_cast<T>(s.bg_embedding[static_cast<std::size_t>(d)]);
    }
    for (int t = 0; t < Tn; ++t) out.text_ids.push_back(s.drop.text ? pad_id : s.text_ids[static_cast<std::size_t>(t)]);
    // Fully dropped sets get a canonical mask so the unconditional branch ignores M as well.
    out.masks.push_back(s.drop.all_set() ? Mask(P, P, true) : s.mask);
    out.lambda_fg.push_back(s.drop.fg_embedding ? T(0) : static_cast<T>(s.lambda_fg));
    out.lambda_bg.push_back(s.drop.bg_embedding ? T(0) : static_cast<T>(s.lambda_bg));
  }
  return out;
}

template <typename T>
ConditionBatch<T> batch_conditions(const std::vector<ConditionSet>& sets, int pad_id = 0) {
  return batch_conditions<T>(std::span<const ConditionSet>(sets), pad_id);
}

/// Concatenates two batches (e.g. conditional and unconditional halves).
template <typename T>
ConditionBatch<T> concat_batches(const ConditionBatch<T>& a, const ConditionBatch<T>& b) {
  ConditionBatch<T> out;
  auto cat = [](const Tensor<T>& x, const Tensor<T>& y) {
    Shape s = x.shape();
    s[0] += y.dim(0);
    Buffer<T> data(x.storage());
    data.insert(data.end(), y.storage().begin(), y.storage().end());
    return Tensor<T>(s, std::move(data));
  };
  out.fg_maps = cat(a.fg_maps, b.fg_maps);
  out.bg_maps = cat(a.bg_maps, b.bg_maps);
  out.fg_embeddings = cat(a.fg_embeddings, b.fg_embeddings);
  out.bg_embeddings = cat(a.bg_embeddings, b.bg_embeddings);
  out.text_ids = a.text_ids;
  out.text_ids.insert(out.text_ids.end(), b.text_ids.begin(), b.text_ids.end());
  out.masks = a.masks;
  out.masks.insert(out.masks.end(), b.masks.begin(), b.masks.end());
  out.lambda_fg = a.lambda_fg;
  out.lambda_fg.insert(out.lambda_fg.end(), b.lambda_fg.begin(), b.lambda_fg.end());
  out.lambda_bg = a.lambda_bg;
  out.lambda_bg.insert(out.lambda_bg.end(), b.lambda_bg.begin(), b.lambda_bg.end());
  return out;
}

}  // namespace cnc
