#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cnc/conditions.hpp"
#include "cnc/core/hash.hpp"
#include "cnc/core/nn.hpp"
#include "cnc/embedders.hpp"
#include "cnc/global_conditioning.hpp"
#include "cnc/local_fuser.hpp"

/// Small latent UNet (frozen prior) with a trainable clone of its encoder and center block.
namespace cnc::backbone {

using global::BoolMatrix;
using global::MaskMode;

// Parameter groups.
inline constexpr const char* kFrozen = "frozen";
inline constexpr const char* kClone = "clone";
inline constexpr const char* kLocal = "local";
inline constexpr const char* kGlobal = "global";

// ---------------------------------------------------------------------------------------------
// Latent codec

enum class CodecMode { identity, haar };

inline std::string to_string(CodecMode m) { return m == CodecMode::identity ? "identity" : "haar"; }
inline CodecMode codec_mode_from(const std::string& s) {
  if (s == "identity") return CodecMode::identity;
  if (s == "haar" || s == "autoencoder") return CodecMode::haar;
  fail(ErrorKind::config, "unknown latent codec '" + s + "'");
}

/// identity: z = 2x - 1 at pixel resolution. haar: z = orthonormal 2x2 Haar analysis of 2x - 1
/// (a fixed, lossless conv autoencoder with 4x channel expansion and 2x spatial reduction).
template <typename T>
struct LatentCodec {
  CodecMode mode = CodecMode::identity;

  int channels(int image_channels = 3) const { return mode == CodecMode::identity ? image_channels : 4 * image_channels; }
  int resolution(int pixels) const { return mode == CodecMode::identity ? pixels : pixels / 2; }
  /// Bound on |z| for images in [0, 1]; the sampler clamps x0 predictions to it.
  T limit() const { return mode == CodecMode::identity ? T(1) : T(2); }

  Tensor<T> encode(const Tensor<T>& x) const {
    Tensor<T> s = x;
    for (auto& v : s.storage()) v = T(2) * v - T(1);
    if (mode == CodecMode::identity) return s;
    const int N = s.dim(0), C = s.dim(1), H = s.dim(2), W = s.dim(3);
    require(H % 2 == 0 && W % 2 == 0, ErrorKind::shape, "haar codec needs even spatial dims");
    Tensor<T> z({N, 4 * C, H / 2, W / 2});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
          for (int xx = 0; xx < W / 2; ++xx) {
            const T a = s.at(n, c, 2 * y, 2 * xx), b = s.at(n, c, 2 * y, 2 * xx + 1);
            const T cc = s.at(n, c, 2 * y + 1, 2 * xx), d = s.at(n, c, 2 * y + 1, 2 * xx + 1);
            z.at(n, 4 * c + 0, y, xx) = (a + b + cc + d) / T(2);
            z.at(n, 4 * c + 1, y, xx) = (a - b + cc - d) / T(2);
            z.at(n, 4 * c + 2, y, xx) = (a + b - cc - d) / T(2);
            z.at(n, 4 * c + 3, y, xx) = (a - b - cc + d) / T(2);
          }
    return z;
  }

  Tensor<T> decode(const Tensor<T>& z) const {
    Tensor<T> s;
    if (mode == CodecMode::identity) {
      s = z;
    } else {
      const int N = z.dim(0), C = z.dim(1) / 4, H = z.dim(2) * 2, W = z.dim(3) * 2;
      s = Tensor<T>({N, C, H, W});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H / 2; ++y)
            for (int xx = 0; xx < W / 2; ++xx) {
              const T ll = z.at(n, 4 * c, y, xx), lh = z.at(n, 4 * c + 1, y, xx);
              const T hl = z.at(n, 4 * c + 2, y, xx), hh = z.at(n, 4 * c + 3, y, xx);
              s.at(n, c, 2 * y, 2 * xx) = (ll + lh + hl + hh) / T(2);
              s.at(n, c, 2 * y, 2 * xx + 1) = (ll - lh + hl - hh) / T(2);
              s.at(n, c, 2 * y + 1, 2 * xx) = (ll + lh - hl - hh) / T(2);
              s.at(n, c, 2 * y + 1, 2 * xx + 1) = (ll - lh - hl + hh) / T(2);
            }
    }
    for (auto& v : s.storage()) v = std::clamp((v + T(1)) / T(2), T(0), T(1));
    return s;
  }
};

// ---------------------------------------------------------------------------------------------
// Configuration

struct UNetConfig {
  int encoder_blocks = 12;  ///< B
  int levels = 0;           ///< resolutions; 0 derives from B
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 2, 2};
  int attention_levels = 2;  ///< cross-attention at this many coarsest resolutions
  int heads = 4;
  int resolution = 32;  ///< pixel side
  int image_channels = 3;
  CodecMode codec = CodecMode::identity;
  int text_tokens = embed::kDefaultContextLength;
  int global_tokens = 4;
  int context_dim = embed::kDefaultContextDim;
  int embedding_dim = embed::kDefaultEmbeddingDim;
  int vocab_size = 64;
  int time_dim = 128;
  int timesteps = 1000;
  int stream_channels = 16;
  int stream_blocks = 3;
  int global_hidden = 128;
  bool global_nonlinear = true;
  MaskMode mask_mode = MaskMode::additive;
  bool guide_clone = true;  ///< soft guidance in the clone's cross-attention layers too

  /// Largest level count <= 4 dividing B with at least two blocks per level.
  int resolved_levels() const {
    if (levels > 0) return levels;
    for (int l = 4; l >= 1; --l)
      if (encoder_blocks % l == 0 && encoder_blocks / l >= 2) return l;
    return 1;
  }
  int blocks_per_level() const { return encoder_blocks / resolved_levels(); }
  int latent_channels() const { return LatentCodec<float>{codec}.channels(image_channels); }
  int latent_resolution() const { return LatentCodec<float>{codec}.resolution(resolution); }
  int channels_at(int level) const {
    const auto& m = channel_mult;
    const int mult = m.empty() ? 1 : m[static_cast<std::size_t>(std::min<int>(level, static_cast<int>(m.size()) - 1))];
    return base_channels * mult;
  }

  void validate() const {
    require(encoder_blocks >= 4 && encoder_blocks % 2 == 0, ErrorKind::config,
            "encoder_blocks must be even and >= 4, got " + std::to_string(encoder_blocks));
    const int L = resolved_levels();
    require(encoder_blocks % L == 0 && encoder_blocks / L >= 2, ErrorKind::config,
            "encoder_blocks must split into levels of >= 2 blocks");
    require(resolution % 8 == 0, ErrorKind::config, "resolution must be a multiple of 8");
    require(latent_resolution() % (1 << (L - 1)) == 0 && latent_resolution() >> (L - 1) >= 2, ErrorKind::config,
            "latent resolution too small for " + std::to_string(L) + " levels");
    require(attention_levels >= 0 && attention_levels <= L, ErrorKind::config,
            "attention levels must be a subset of the available scales");
    require(base_channels > 0 && heads > 0, ErrorKind::config, "invalid channel configuration");
    for (int l = 0; l < L; ++l)
      require(channels_at(l) % heads == 0, ErrorKind::config, "channels must be divisible by heads");
    require(time_dim % 2 == 0 && timesteps > 0, ErrorKind::config, "invalid time embedding");
  }

  nlohmann::json to_json() const {
    return {{"encoder_blocks", encoder_blocks},   {"levels", levels},
            {"base_channels", base_channels},     {"channel_mult", channel_mult},
            {"attention_levels", attention_levels}, {"heads", heads},
            {"resolution", resolution},           {"image_channels", image_channels},
            {"codec", to_string(codec)},          {"text_tokens", text_tokens},
            {"global_tokens", global_tokens},     {"context_dim", context_dim},
            {"embedding_dim", embedding_dim},     {"vocab_size", vocab_size},
            {"time_dim", time_dim},               {"timesteps", timesteps},
            {"stream_channels", stream_channels}, {"stream_blocks", stream_blocks},
            {"global_hidden", global_hidden},     {"global_nonlinear", global_nonlinear},
            {"mask_mode", global::to_string(mask_mode)}, {"guide_clone", guide_clone}};
  }

  static UNetConfig from_json(const nlohmann::json& j) {
    UNetConfig c;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("encoder_blocks", c.encoder_blocks);
    get("levels", c.levels);
    get("base_channels", c.base_channels);
    get("channel_mult", c.channel_mult);
    get("attention_levels", c.attention_levels);
    get("heads", c.heads);
    get("resolution", c.resolution);
    get("image_channels", c.image_channels);
    if (j.contains("codec")) c.codec = codec_mode_from(j.at("codec").get<std::string>());
    get("text_tokens", c.text_tokens);
    get("global_tokens", c.global_tokens);
    get("context_dim", c.context_dim);
    get("embedding_dim", c.embedding_dim);
    get("vocab_size", c.vocab_size);
    get("time_dim", c.time_dim);
    get("timesteps", c.timesteps);
    get("stream_channels", c.stream_channels);
    get("stream_blocks", c.stream_blocks);
    get("global_hidden", c.global_hidden);
    get("global_nonlinear", c.global_nonlinear);
    if (j.contains("mask_mode")) c.mask_mode = global::mask_mode_from(j.at("mask_mode").get<std::string>());
    get("guide_clone", c.guide_clone);
    return c;
  }
};

// ---------------------------------------------------------------------------------------------
// Building blocks

/// Sinusoidal timestep features [B, dim].
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, int dim) {
  Tensor<T> out({static_cast<int>(t.size()), dim});
  const int half = dim / 2;
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[n * dim + i] = static_cast<T>(std::sin(t[n] * freq));
      out[n * dim + half + i] = static_cast<T>(std::cos(t[n] * freq));
    }
  return out;
}

template <typename T>
struct ResBlock {
  nn::GroupNorm<T> n1, n2;
  nn::Conv2d<T> c1, c2, skip;
  nn::Linear<T> temb;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(nn::Builder<T> b, int in, int out, int time_dim)
      : n1(b.scope("n1"), in), n2(b.scope("n2"), out), c1(b.scope("c1"), in, out, 3), c2(b.scope("c2"), out, out, 3),
        temb(b.scope("temb"), time_dim, out), has_skip(in != out) {
    if (has_skip) skip = nn::Conv2d<T>(b.scope("skip"), in, out, 1);
  }
  Var<T> operator()(const Var<T>& x, const Var<T>& time_act) const {
    Var<T> h = c1(ops::silu(n1(x)));
    h = ops::add_channel(h, temb(time_act));
    h = c2(ops::silu(n2(h)));
    return ops::add(has_skip ? skip(x) : x, h);
  }
};

/// Per-forward cache of guidance masks keyed by attention resolution.
template <typename T>
struct Guidance {
  Var<T> context;  ///< [B, T + 2N, D_ctx]
  const std::vector<Mask>* masks = nullptr;
  int text_tokens = 0;
  int global_tokens = 0;
  MaskMode mode = MaskMode::additive;
  bool enabled = true;
  std::map<std::pair<int, int>, std::vector<BoolMatrix>> cache;

  std::span<const BoolMatrix> at(int h, int w) {
    if (!enabled || masks == nullptr || masks->empty()) return {};
    auto key = std::make_pair(h, w);
    auto it = cache.find(key);
    if (it == cache.end()) {
      std::vector<BoolMatrix> ms;
      for (const auto& m : *masks) ms.push_back(global::build_guidance_mask(m, h, w, text_tokens, global_tokens));
      it = cache.emplace(key, std::move(ms)).first;
    }
    return it->second;
  }
};

/// LayerNorm -> soft-guided cross-attention -> residual; LayerNorm -> feedforward -> residual.
template <typename T>
struct CrossAttentionBlock {
  nn::LayerNorm<T> ln1, ln2;
  nn::Linear<T> q, k, v, o, ff1, ff2;
  int heads = 1;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(nn::Builder<T> b, int channels, int context_dim, int heads_)
      : ln1(b.scope("ln1"), channels), ln2(b.scope("ln2"), channels),
        q(b.scope("q"), channels, channels, nn::Init::fan_in, false),
        k(b.scope("k"), context_dim, channels, nn::Init::fan_in, false),
        v(b.scope("v"), context_dim, channels, nn::Init::fan_in, false), o(b.scope("o"), channels, channels),
        ff1(b.scope("ff1"), channels, 2 * channels), ff2(b.scope("ff2"), 2 * channels, channels), heads(heads_) {}

  Var<T> operator()(const Var<T>& x, Guidance<T>& g, Tensor<T>* weights_out = nullptr) const {
    const int H = x.dim(2), W = x.dim(3);
    Var<T> tok = ops::to_tokens(x);
    const Var<T> a = global::masked_cross_attention(ln1(tok), g.context, g.at(H, W), q, k, v, heads, g.mode, weights_out);
    tok = ops::add(tok, o(a));
    tok = ops::add(tok, ff2(ops::silu(ff1(ln2(tok)))));
    return ops::from_tokens(tok, H, W);
  }
};

enum class BlockKind { conv_in, res, down };

template <typename T>
struct EncoderBlock {
  BlockKind kind = BlockKind::res;
  int level = 0;
  int out_channels = 0;
  nn::Conv2d<T> conv;  // conv_in / down
  ResBlock<T> res;
  bool has_attention = false;
  CrossAttentionBlock<T> attention;

  Var<T> operator()(const Var<T>& x, const Var<T>& time_act, Guidance<T>& g) const {
    if (kind != BlockKind::res) return conv(x);
    Var<T> h = res(x, time_act);
    return has_attention ? attention(h, g) : h;
  }
};

template <typename T>
struct CenterBlock {
  ResBlock<T> r1, r2;
  CrossAttentionBlock<T> attention;
  Var<T> operator()(const Var<T>& x, const Var<T>& time_act, Guidance<T>& g) const {
    return r2(attention(r1(x, time_act), g), time_act);
  }
};

/// E blocks e_1..e_B followed by the center block C. Shared layout for the prior and its clone.
template <typename T>
struct Encoder {
  std::vector<EncoderBlock<T>> blocks;
  CenterBlock<T> center;

  Encoder() = default;
  Encoder(nn::Builder<T> b, const UNetConfig& cfg) {
    const int L = cfg.resolved_levels(), R = cfg.blocks_per_level() - 1;
    EncoderBlock<T> first;
    first.kind = BlockKind::conv_in;
    first.out_channels = cfg.channels_at(0);
    first.conv = nn::Conv2d<T>(b.scope("e1"), cfg.latent_channels(), first.out_channels, 3);
    blocks.push_back(std::move(first));
    int ch = cfg.channels_at(0);
    for (int l = 0; l < L; ++l) {
      for (int r = 0; r < R; ++r) {
        EncoderBlock<T> blk;
        blk.kind = BlockKind::res;
        blk.level = l;
        blk.out_channels = cfg.channels_at(l);
        const auto s = b.scope("e" + std::to_string(blocks.size() + 1));
        blk.res = ResBlock<T>(s.scope("res"), ch, blk.out_channels, cfg.time_dim);
        blk.has_attention = l >= L - cfg.attention_levels;
        if (blk.has_attention)
          blk.attention = CrossAttentionBlock<T>(s.scope("attn"), blk.out_channels, cfg.context_dim, cfg.heads);
        ch = blk.out_channels;
        blocks.push_back(std::move(blk));
      }
      if (l + 1 < L) {
        EncoderBlock<T> down;
        down.kind = BlockKind::down;
        down.level = l + 1;
        down.out_channels = ch;
        down.conv = nn::Conv2d<T>(b.scope("e" + std::to_string(blocks.size() + 1)), ch, ch, 3, 2);
        blocks.push_back(std::move(down));
      }
    }
    require(static_cast<int>(blocks.size()) == cfg.encoder_blocks, ErrorKind::state, "encoder block count mismatch");
    const auto c = b.scope("center");
    center.r1 = ResBlock<T>(c.scope("r1"), ch, ch, cfg.time_dim);
    center.attention = CrossAttentionBlock<T>(c.scope("attn"), ch, cfg.context_dim, cfg.heads);
    center.r2 = ResBlock<T>(c.scope("r2"), ch, ch, cfg.time_dim);
  }

  /// Index of the first block producing each level (conv_in and the downsamplers).
  std::vector<int> level_entry_blocks() const {
    std::vector<int> out;
    for (std::size_t j = 0; j < blocks.size(); ++j)
      if (blocks[j].kind != BlockKind::res) out.push_back(static_cast<int>(j));
    return out;
  }
};

template <typename T>
struct DecoderBlock {
  int skip_index = 0;  ///< 1-based encoder block consumed
  ResBlock<T> res;
  bool has_attention = false;
  CrossAttentionBlock<T> attention;
  bool upsample = false;
  nn::Conv2d<T> up_conv;

  Var<T> operator()(const Var<T>& x, const Var<T>& time_act, Guidance<T>& g) const {
    Var<T> h = res(x, time_act);
    if (has_attention) h = attention(h, g);
    if (upsample) h = up_conv(ops::upsample_nearest(h, 2));
    return h;
  }
};

// ---------------------------------------------------------------------------------------------

struct ForwardOptions {
  bool use_control = true;  ///< false: frozen prior only (clone, fusers bypassed)
};

template <typename T>
class ControlledUNet {
 public:
  explicit ControlledUNet(const UNetConfig& cfg, std::uint64_t seed) : config_(cfg), seed_(seed) {
    cfg.validate();
    std::mt19937_64 rng(derive_seed(seed, "unet.init"));
    nn::Builder<T> frozen(store_, kFrozen, rng);
    text_ = embed::TextEncoder<T>(frozen.scope("text"), cfg.vocab_size, cfg.text_tokens, cfg.context_dim);
    time1_ = nn::Linear<T>(frozen.scope("time.l1"), cfg.base_channels, cfg.time_dim);
    time2_ = nn::Linear<T>(frozen.scope("time.l2"), cfg.time_dim, cfg.time_dim);
    encoder_ = Encoder<T>(frozen.scope("unet"), cfg);
    build_decoder(frozen.scope("unet"));

    nn::Builder<T> clone(store_, kClone, rng, "clone");
    clone_ = Encoder<T>(clone.scope("unet"), cfg);
    for (int j = 0; j < cfg.encoder_blocks; ++j) {
      const int ch = encoder_.blocks[static_cast<std::size_t>(j)].out_channels;
      clone_zero_.emplace_back(clone.scope("zero.e" + std::to_string(j + 1)), ch, ch, 1, 1, nn::Init::zero);
    }
    const int center_ch = cfg.channels_at(cfg.resolved_levels() - 1);
    center_zero_ = nn::Conv2d<T>(clone.scope("zero.center"), center_ch, center_ch, 1, 1, nn::Init::zero);

    nn::Builder<T> local(store_, kLocal, rng, "local");
    local::LocalFuserConfig lc;
    lc.pixel_resolution = cfg.resolution;
    lc.latent_resolution = cfg.latent_resolution();
    lc.stream_channels = cfg.stream_channels;
    lc.blocks_per_stream = cfg.stream_blocks;
    // One scale per level entry block (conv_in and each downsampler), at most four.
    lc.scale_channels.clear();
    for (int j : encoder_.level_entry_blocks())
      if (lc.scales() < 4) lc.scale_channels.push_back(encoder_.blocks[static_cast<std::size_t>(j)].out_channels);
    fuser_ = local::LocalFuser<T>(local.scope("fuser"), lc);
    for (int l = 0; l < lc.scales(); ++l)
      fdn_.emplace_back(local.scope("fdn" + std::to_string(l)), lc.scale_channels[static_cast<std::size_t>(l)],
                        lc.scale_channels[static_cast<std::size_t>(l)]);

    nn::Builder<T> glob(store_, kGlobal, rng, "global");
    global::GlobalFuserConfig gc{cfg.embedding_dim, cfg.global_hidden, cfg.global_tokens, cfg.context_dim,
                                 cfg.global_nonlinear};
    global_ = global::GlobalFuser<T>(glob.scope("fuser"), gc);

    clone_control();
  }

  ControlledUNet(const ControlledUNet&) = delete;
  ControlledUNet& operator=(const ControlledUNet&) = delete;

  const UNetConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const embed::TextEncoder<T>& text_encoder() const { return text_; }
  const local::LocalFuser<T>& local_fuser() const { return fuser_; }
  const std::vector<local::FdnParams<T>>& fdn_params() const { return fdn_; }
  const global::GlobalFuser<T>& global_fuser() const { return global_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Encoder<T>& clone() const { return clone_; }
  const std::vector<DecoderBlock<T>>& decoder() const { return decoder_; }

  /// (i, j) pairs: decoder block i consumes encoder skip e_j.
  std::vector<std::pair<int, int>> skip_pairs() const {
    std::vector<std::pair<int, int>> out;
    for (std::size_t i = 0; i < decoder_.size(); ++i) out.emplace_back(static_cast<int>(i) + 1, decoder_[i].skip_index);
    return out;
  }

  /// Re-copies the frozen encoder and center weights into the clone.
  void clone_control() {
    for (auto& p : store_.params()) {
      if (p.group != kClone || p.name.rfind("clone.unet.", 0) != 0) continue;
      const auto* src = store_.find(p.name.substr(6));
      require(src != nullptr && src->var.shape() == p.var.shape(), ErrorKind::state,
              "clone parameter " + p.name + " has no frozen counterpart");
      p.var.mutable_value() = src->var.value();
    }
  }

  /// Architecture hash: config plus every parameter name and shape.
  std::string architecture_hash() const {
    std::string desc = config_.to_json().dump();
    for (const auto& p : store_.params()) desc += "|" + p.name + ":" + p.group + ":" + shape_str(p.var.shape());
    return hex64(fnv1a64(desc));
  }

  /// Epsilon prediction for latents z_t [B, C, h, w] at timesteps t.
  Var<T> forward(const Var<T>& z, const std::vector<int>& t, const ConditionBatch<T>& cond,
                 ForwardOptions opts = {}) const {
    const int B = z.dim(0);
    require(z.value().rank() == 4 && z.dim(1) == config_.latent_channels() && z.dim(2) == config_.latent_resolution() &&
                z.dim(3) == config_.latent_resolution(),
            ErrorKind::shape, "forward: latent shape " + shape_str(z.shape()));
    require(static_cast<int>(t.size()) == B && cond.size() == B, ErrorKind::shape, "forward: batch size mismatch");
    for (int tv : t)
      require(tv >= 0 && tv < config_.timesteps, ErrorKind::argument,
              "timestep " + std::to_string(tv) + " outside [0, " + std::to_string(config_.timesteps) + ")");
    require(all_finite(z.value()), ErrorKind::numeric, "forward: non-finite latent");

    const Var<T> time_act =
        ops::silu(time2_(ops::silu(time1_(Var<T>::constant(timestep_features<T>(t, config_.base_channels))))));

    const Var<T> text = text_(cond.text_ids);
    Var<T> fg_tok, bg_tok;
    if (opts.use_control) {
      fg_tok = global_(Var<T>::constant(cond.fg_embeddings), global::Stream::fg);
      bg_tok = global_(Var<T>::constant(cond.bg_embeddings), global::Stream::bg);
    } else {
      fg_tok = bg_tok = Var<T>::constant(Tensor<T>({B, config_.global_tokens, config_.context_dim}));
    }
    Guidance<T> guide;
    guide.context = global::assemble_context<T>(text, fg_tok, bg_tok, cond.lambda_fg, cond.lambda_bg);
    guide.masks = &cond.masks;
    guide.text_tokens = config_.text_tokens;
    guide.global_tokens = config_.global_tokens;
    guide.mode = config_.mask_mode;

    std::vector<Var<T>> skips;
    Var<T> h = z;
    for (const auto& blk : encoder_.blocks) {
      h = blk(h, time_act, guide);
      skips.push_back(h);
    }
    Var<T> c = encoder_.center(h, time_act, guide);

    if (opts.use_control) {
      const auto local = fuser_(Var<T>::constant(cond.fg_maps), Var<T>::constant(cond.bg_maps));
      Guidance<T> clone_guide = guide;
      clone_guide.cache.clear();
      clone_guide.enabled = config_.guide_clone;
      Var<T> hc = z;
      std::size_t level = 0;
      for (std::size_t j = 0; j < clone_.blocks.size(); ++j) {
        const auto& blk = clone_.blocks[j];
        hc = blk(hc, time_act, clone_guide);
        if (blk.kind != BlockKind::res && level < local.size()) {
          hc = local::fdn_modulate(hc, local[level], fdn_[level]);
          ++level;
        }
        skips[j] = ops::add(skips[j], clone_zero_[j](hc));
      }
      c = ops::add(c, center_zero_(clone_.center(hc, time_act, clone_guide)));
    }

    Var<T> d = c;
    for (const auto& blk : decoder_) {
      const Var<T>& e = skips[static_cast<std::size_t>(blk.skip_index - 1)];
      d = blk(ops::concat_channels(d, e), time_act, guide);
    }
    return conv_out_(ops::silu(out_norm_(d)));
  }

 private:
  void build_decoder(nn::Builder<T> b) {
    const int L = config_.resolved_levels(), R = config_.blocks_per_level() - 1, Bn = config_.encoder_blocks;
    std::vector<int> skip_ch;
    for (const auto& blk : encoder_.blocks) skip_ch.push_back(blk.out_channels);
    int ch = config_.channels_at(L - 1);
    int i = 0;
    for (int l = L - 1; l >= 0; --l)
      for (int r = 0; r <= R; ++r) {
        ++i;
        const int j = Bn + 1 - i;
        require(i + j == Bn + 1, ErrorKind::state, "skip pairing violated");
        DecoderBlock<T> blk;
        blk.skip_index = j;
        const int out = config_.channels_at(l);
        const auto s = b.scope("d" + std::to_string(i));
        blk.res = ResBlock<T>(s.scope("res"), ch + skip_ch[static_cast<std::size_t>(j - 1)], out, config_.time_dim);
        blk.has_attention = l >= L - config_.attention_levels;
        if (blk.has_attention) blk.attention = CrossAttentionBlock<T>(s.scope("attn"), out, config_.context_dim, config_.heads);
        blk.upsample = (r == R && l > 0);
        if (blk.upsample) blk.up_conv = nn::Conv2d<T>(s.scope("up"), out, out, 3);
        ch = out;
        decoder_.push_back(std::move(blk));
      }
    require(static_cast<int>(decoder_.size()) == Bn, ErrorKind::state, "decoder block count mismatch");
    out_norm_ = nn::GroupNorm<T>(b.scope("out_norm"), ch);
    conv_out_ = nn::Conv2d<T>(b.scope("conv_out"), ch, config_.latent_channels(), 3);
  }

  UNetConfig config_;
  std::uint64_t seed_;
  nn::ParamStore<T> store_;
  embed::TextEncoder<T> text_;
  nn::Linear<T> time1_, time2_;
  Encoder<T> encoder_;
  std::vector<DecoderBlock<T>> decoder_;
  nn::GroupNorm<T> out_norm_;
  nn::Conv2d<T> conv_out_;
  Encoder<T> clone_;
  std::vector<nn::Conv2d<T>> clone_zero_;
  nn::Conv2d<T> center_zero_;
  local::LocalFuser<T> fuser_;
  std::vector<local::FdnParams<T>> fdn_;
  global::GlobalFuser<T> global_;
};

template <typename T = float>
std::unique_ptr<ControlledUNet<T>> build_unet(const UNetConfig& config, std::uint64_t seed) {
  return std::make_unique<ControlledUNet<T>>(config, seed);
}

/// Content hash of one parameter group (bit patterns, name-ordered).
template <typename T>
std::string group_hash(const nn::ParamStore<T>& store, const std::string& group) {
  std::uint64_t h = fnv1a64("group:" + group);
  for (const auto& p : store.params()) {
    if (p.group != group) continue;
    h = fnv1a64(p.name, h);
    h = bits_hash(p.var.value().data(), p.var.value().size(), h);
  }
  return hex64(h);
}

}  // namespace cnc::backbone
