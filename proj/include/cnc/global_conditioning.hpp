#pragma once

#include <span>
#include <string>
#include <vector>

#include "cnc/core/image.hpp"
#include "cnc/core/nn.hpp"

/// Global semantic tokens, the extended cross-attention context and soft guidance masks.
namespace cnc::global {

using ops::BoolMatrix;
using ops::MaskMode;

enum class Stream { fg, bg };

inline MaskMode mask_mode_from(const std::string& s) {
  if (s == "additive") return MaskMode::additive;
  if (s == "hadamard") return MaskMode::hadamard;
  fail(ErrorKind::argument, "unknown soft guidance mode '" + s + "' (expected additive or hadamard)");
}
inline std::string to_string(MaskMode m) { return m == MaskMode::additive ? "additive" : "hadamard"; }

struct GlobalFuserConfig {
  int embedding_dim = 64;  ///< D_emb
  int hidden_dim = 128;
  int tokens = 4;          ///< N per stream
  int context_dim = 64;    ///< D_ctx
  bool nonlinear = true;   ///< SiLU between the two layers; false gives a purely linear stack
};

template <typename T>
struct GlobalFuser {
  GlobalFuserConfig config;
  nn::Linear<T> fg1, fg2, bg1, bg2;

  GlobalFuser() = default;
  GlobalFuser(nn::Builder<T> b, GlobalFuserConfig cfg) : config(cfg) {
    const int out = cfg.tokens * cfg.context_dim;
    fg1 = nn::Linear<T>(b.scope("fg.l1"), cfg.embedding_dim, cfg.hidden_dim);
    fg2 = nn::Linear<T>(b.scope("fg.l2"), cfg.hidden_dim, out, nn::Init::zero);
    bg1 = nn::Linear<T>(b.scope("bg.l1"), cfg.embedding_dim, cfg.hidden_dim);
    bg2 = nn::Linear<T>(b.scope("bg.l2"), cfg.hidden_dim, out, nn::Init::zero);
  }

  /// embedding [B, D_emb] -> tokens [B, N, D_ctx].
  Var<T> operator()(const Var<T>& embedding, Stream stream) const {
    require(embedding.value().rank() == 2 && embedding.dim(1) == config.embedding_dim, ErrorKind::shape,
            "project_tokens: expected [B," + std::to_string(config.embedding_dim) + "] embeddings, got " +
                shape_str(embedding.shape()));
    require(all_finite(embedding.value()), ErrorKind::input, "project_tokens: non-finite embedding");
    const auto& l1 = stream == Stream::fg ? fg1 : bg1;
    const auto& l2 = stream == Stream::fg ? fg2 : bg2;
    Var<T> h = l1(embedding);
    if (config.nonlinear) h = ops::silu(h);
    return ops::reshape(l2(h), {embedding.dim(0), config.tokens, config.context_dim});
  }
};

template <typename T>
Var<T> project_tokens(const Var<T>& embedding, Stream stream, const GlobalFuser<T>& params) {
  return params(embedding, stream);
}

/// y_full = concat(text, lambda_fg * fg, lambda_bg * bg) along tokens; one lambda per sample.
template <typename T>
Var<T> assemble_context(const Var<T>& text, const Var<T>& fg, const Var<T>& bg, std::span<const T> lambda_fg,
                        std::span<const T> lambda_bg) {
  require(text.value().rank() == 3 && fg.value().rank() == 3 && bg.value().rank() == 3, ErrorKind::shape,
          "assemble_context: token tensors must be [B, L, D]");
  const int B = text.dim(0), D = text.dim(2);
  require(fg.dim(0) == B && bg.dim(0) == B && fg.dim(2) == D && bg.dim(2) == D && fg.dim(1) == bg.dim(1),
          ErrorKind::shape,
          "assemble_context: text " + shape_str(text.shape()) + " fg " + shape_str(fg.shape()) + " bg " +
              shape_str(bg.shape()));
  require(static_cast<int>(lambda_fg.size()) == B && static_cast<int>(lambda_bg.size()) == B, ErrorKind::shape,
          "assemble_context: need one lambda per sample");
  auto scaled = [B](const Var<T>& x, std::span<const T> lambda) {
    Tensor<T> m(x.shape());
    const std::size_t per = x.value().size() / static_cast<std::size_t>(B);
    for (int n = 0; n < B; ++n) {
      require(std::isfinite(static_cast<double>(lambda[static_cast<std::size_t>(n)])), ErrorKind::argument,
              "assemble_context: non-finite lambda");
      std::fill_n(m.data() + per * static_cast<std::size_t>(n), per, lambda[static_cast<std::size_t>(n)]);
    }
    return ops::mul_const(x, m);
  };
  return ops::concat_tokens<T>({text, scaled(fg, lambda_fg), scaled(bg, lambda_bg)});
}

/// Area-average M to h x w, threshold at 0.5.
inline Mask downsample_mask(const Mask& m, int h, int w) {
  require(h > 0 && w > 0, ErrorKind::shape, "guidance mask: empty latent dims");
  require(m.height() % h == 0 && m.width() % w == 0, ErrorKind::shape,
          "guidance mask: " + std::to_string(m.height()) + "x" + std::to_string(m.width()) + " not divisible to " +
              std::to_string(h) + "x" + std::to_string(w));
  const int fy = m.height() / h, fx = m.width() / w;
  Mask out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int count = 0;
      for (int dy = 0; dy < fy; ++dy)
        for (int dx = 0; dx < fx; ++dx) count += m(y * fy + dy, x * fx + dx) ? 1 : 0;
      out.set(y, x, 2 * count >= fy * fx);
    }
  return out;
}

/// M' = concat(J, phi(M), 1 - phi(M)) with i = h*w rows and T + 2N columns.
inline BoolMatrix build_guidance_mask(const Mask& m, int h, int w, int text_tokens, int global_tokens) {
  require(text_tokens >= 0 && global_tokens >= 0, ErrorKind::shape, "guidance mask: negative token count");
  const Mask phi = downsample_mask(m, h, w);
  const int cols = text_tokens + 2 * global_tokens;
  BoolMatrix out(h * w, cols, false);
  for (int i = 0; i < h * w; ++i) {
    for (int j = 0; j < text_tokens; ++j) out.set(i, j, true);
    const bool fg = phi[static_cast<std::size_t>(i)];
    for (int j = 0; j < global_tokens; ++j) {
      out.set(i, text_tokens + j, fg);
      out.set(i, text_tokens + global_tokens + j, !fg);
    }
  }
  return out;
}

/// Attention of latent tokens x [B, I, C] over context [B, J, D_ctx] with per-sample masks.
template <typename T>
Var<T> masked_cross_attention(const Var<T>& x, const Var<T>& context, std::span<const BoolMatrix> masks,
                              const nn::Linear<T>& wq, const nn::Linear<T>& wk, const nn::Linear<T>& wv, int heads,
                              MaskMode mode, Tensor<T>* weights_out = nullptr) {
  for (const auto& m : masks)
    require(m.cols == context.dim(1), ErrorKind::shape,
            "masked_cross_attention: mask has " + std::to_string(m.cols) + " columns, context has " +
                std::to_string(context.dim(1)) + " tokens");
  return ops::masked_attention(wq(x), wk(context), wv(context), heads, masks, mode, weights_out);
}

}  // namespace cnc::global
