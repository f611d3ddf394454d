#pragma once

#include <string>
#include <vector>

#include "cnc/core/nn.hpp"

/// Two-stream local condition network (depth disentanglement) and feature denormalization.
namespace cnc::local {

struct LocalFuserConfig {
  int pixel_resolution = 32;   ///< condition maps arrive at this size
  int latent_resolution = 32;  ///< stem area-downsamples to this size
  int stream_channels = 16;
  int blocks_per_stream = 3;
  std::vector<int> scale_channels{32, 64, 64, 64};  ///< one entry per extracted scale

  int scales() const { return static_cast<int>(scale_channels.size()); }
  void validate() const {
    require(pixel_resolution > 0 && latent_resolution > 0 && pixel_resolution % latent_resolution == 0,
            ErrorKind::config, "local fuser: pixel resolution must be a multiple of the latent resolution");
    require(stream_channels > 0 && blocks_per_stream >= 0, ErrorKind::config, "local fuser: invalid stream shape");
    require(!scale_channels.empty(), ErrorKind::config, "local fuser: needs at least one scale");
    require(latent_resolution % (1 << (scales() - 1)) == 0, ErrorKind::config,
            "local fuser: latent resolution not divisible across scales");
  }
};

template <typename T>
struct ResidualConv {
  nn::Conv2d<T> c1, c2;
  ResidualConv() = default;
  ResidualConv(nn::Builder<T> b, int ch) : c1(b.scope("c1"), ch, ch, 3), c2(b.scope("c2"), ch, ch, 3) {}
  Var<T> operator()(const Var<T>& x) const { return ops::add(x, c2(ops::silu(c1(x)))); }
};

template <typename T>
struct Stream {
  nn::Conv2d<T> stem;
  std::vector<ResidualConv<T>> blocks;
  Stream() = default;
  Stream(nn::Builder<T> b, int channels, int depth) : stem(b.scope("stem"), 1, channels, 3) {
    for (int i = 0; i < depth; ++i) blocks.emplace_back(b.scope("block" + std::to_string(i)), channels);
  }
  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = ops::silu(stem(x));
    for (const auto& blk : blocks) h = blk(h);
    return h;
  }
};

/// Feature list, finest scale first; spatial size halves per entry.
template <typename T>
using LocalFeatures = std::vector<Var<T>>;

template <typename T>
struct LocalFuser {
  LocalFuserConfig config;
  Stream<T> fg_stream, bg_stream;
  std::vector<nn::Conv2d<T>> extraction;
  std::vector<nn::Conv2d<T>> zero_projections;

  LocalFuser() = default;
  LocalFuser(nn::Builder<T> b, LocalFuserConfig cfg) : config(std::move(cfg)) {
    config.validate();
    fg_stream = Stream<T>(b.scope("fg_stream"), config.stream_channels, config.blocks_per_stream);
    bg_stream = Stream<T>(b.scope("bg_stream"), config.stream_channels, config.blocks_per_stream);
    int in = 2 * config.stream_channels;
    for (int s = 0; s < config.scales(); ++s) {
      const int out = config.scale_channels[static_cast<std::size_t>(s)];
      extraction.emplace_back(b.scope("extract" + std::to_string(s)), in, out, 3, s == 0 ? 1 : 2);
      zero_projections.emplace_back(b.scope("zero" + std::to_string(s)), out, out, 1, 1, nn::Init::zero);
      in = out;
    }
  }

  /// fg/bg condition maps [N, 1, P, P] (zeros for a dropped condition).
  LocalFeatures<T> operator()(const Var<T>& fg, const Var<T>& bg) const {
    require(fg.shape() == bg.shape(), ErrorKind::shape,
            "fuse_local: fg " + shape_str(fg.shape()) + " vs bg " + shape_str(bg.shape()));
    require(fg.value().rank() == 4 && fg.dim(1) == 1 && fg.dim(2) == config.pixel_resolution &&
                fg.dim(3) == config.pixel_resolution,
            ErrorKind::shape,
            "fuse_local: expected [N,1," + std::to_string(config.pixel_resolution) + "," +
                std::to_string(config.pixel_resolution) + "] condition maps, got " + shape_str(fg.shape()));
    const int factor = config.pixel_resolution / config.latent_resolution;
    const Var<T> hf = fg_stream(ops::avg_pool(fg, factor));
    const Var<T> hb = bg_stream(ops::avg_pool(bg, factor));
    Var<T> h = ops::concat_channels(hf, hb);
    LocalFeatures<T> out;
    for (std::size_t s = 0; s < extraction.size(); ++s) {
      h = ops::silu(extraction[s](h));
      out.push_back(zero_projections[s](h));
    }
    return out;
  }
};

template <typename T>
LocalFeatures<T> fuse_local(const Var<T>& fg, const Var<T>& bg, const LocalFuser<T>& params) {
  return params(fg, bg);
}

// ---------------------------------------------------------------------------------------------

/// Scale and shift convolutions of one feature-denormalization site.
template <typename T>
struct FdnParams {
  nn::Conv2d<T> gamma, beta;
  FdnParams() = default;
  FdnParams(nn::Builder<T> b, int local_channels, int host_channels)
      : gamma(b.scope("gamma"), local_channels, host_channels, 3), beta(b.scope("beta"), local_channels, host_channels, 3) {}
};

/// out = instance_norm(host) * (1 + gamma(local)) + beta(local).
template <typename T>
Var<T> fdn_modulate(const Var<T>& host, const Var<T>& local, const FdnParams<T>& p) {
  require(host.value().rank() == 4 && local.value().rank() == 4 && host.dim(0) == local.dim(0) &&
              host.dim(2) == local.dim(2) && host.dim(3) == local.dim(3),
          ErrorKind::shape, "fdn_modulate: host " + shape_str(host.shape()) + " vs local " + shape_str(local.shape()));
  require(local.dim(1) == p.gamma.weight.dim(1) && host.dim(1) == p.gamma.out_channels(), ErrorKind::shape,
          "fdn_modulate: channels do not match the modulation convolutions");
  const Var<T> normalized = ops::group_norm(host, host.dim(1), Var<T>(), Var<T>());
  const Var<T> g = p.gamma(local), b = p.beta(local);
  return ops::add(ops::add(normalized, ops::mul(normalized, g)), b);
}

}  // namespace cnc::local
