#pragma once

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <vector>

#include "cnc/checkpoint.hpp"
#include "cnc/core/nn.hpp"
#include "cnc/core/optim.hpp"
#include "cnc/toy_world.hpp"

namespace cnc::toy {

struct DepthEstimatorConfig {
  int hidden = 32;
  int epochs = 10;
  int batch_size = 16;
  double lr = 2e-3;
  double threshold = 0.05;  ///< maximum acceptable validation MAE
  int min_samples = 500;
  std::uint64_t seed = 0;
};

/// Image -> depth regressor: three 3x3 convolutions for local context, a 1x1 head, sigmoid output.
/// Toy depth is recoverable from palette and haze, so a 7x7 receptive field suffices.
class DepthEstimator {
 public:
  DepthEstimator() = default;
  explicit DepthEstimator(int hidden, std::uint64_t seed = 0) : hidden_(hidden) {
    std::mt19937_64 rng(derive_seed(seed, "depth_estimator.init"));
    nn::Builder<float> b(store_, "estimator", rng);
    c1_ = nn::Conv2d<float>(b.scope("c1"), 3, hidden, 3);
    c2_ = nn::Conv2d<float>(b.scope("c2"), hidden, hidden, 3);
    c3_ = nn::Conv2d<float>(b.scope("c3"), hidden, hidden, 3);
    head_ = nn::Conv2d<float>(b.scope("head"), hidden, 1, 1);
  }

  /// images [N, 3, H, W] -> depth [N, 1, H, W] in (0, 1).
  Var<float> forward(const Var<float>& images) const {
    require(images.value().rank() == 4 && images.dim(1) == 3, ErrorKind::shape, "depth estimator expects [N, 3, H, W]");
    Var<float> h = ops::silu(c1_(images));
    h = ops::silu(c2_(h));
    h = ops::silu(c3_(h));
    return ops::sigmoid(head_(h));
  }

  Image predict(const Image& image) const {
    require(trained_, ErrorKind::state, "depth estimator is untrained");
    NoGradGuard guard;
    const int H = height(image), W = width(image);
    return forward(Var<float>::constant(image.reshaped({1, 3, H, W}))).value().reshaped({1, H, W});
  }

  bool trained() const { return trained_; }
  double validation_mae() const { return validation_mae_; }
  int hidden() const { return hidden_; }
  nn::ParamStore<float>& params() { return store_; }

  void mark_trained(double val_mae) {
    trained_ = true;
    validation_mae_ = val_mae;
  }

  void save(const std::filesystem::path& path) const {
    require(trained_, ErrorKind::state, "refusing to save an untrained depth estimator");
    ckpt::Checkpoint c;
    c.meta = {{"kind", "depth_estimator"}, {"hidden", hidden_}, {"validation_mae", validation_mae_}};
    for (const auto& p : store_.params()) c.params.push_back({p.name, p.group, p.var.shape(), p.var.value().to_vector()});
    ckpt::save_checkpoint(c, path);
  }

  static DepthEstimator load(const std::filesystem::path& path) {
    const auto c = ckpt::load_checkpoint(path);
    require(c.meta.value("kind", "") == "depth_estimator", ErrorKind::load, path.string() + " is not a depth estimator");
    DepthEstimator e(c.meta.at("hidden").get<int>());
    for (const auto& b : c.params) {
      auto* p = e.store_.find(b.name);
      require(p != nullptr && p->var.shape() == b.shape, ErrorKind::incompatible, "estimator parameter " + b.name);
      p->var.mutable_value() = Tensor<float>(b.shape, b.data);
    }
    e.mark_trained(c.meta.at("validation_mae").get<double>());
    return e;
  }

 private:
  int hidden_ = 0;
  bool trained_ = false;
  double validation_mae_ = 0;
  nn::ParamStore<float> store_;
  nn::Conv2d<float> c1_, c2_, c3_, head_;
};

/// (image [3, H, W], depth [1, H, W]) pair.
struct DepthPair {
  Image image;
  Image depth;
};

inline double mean_abs_error(const Image& a, const Image& b) {
  require(a.same_shape(b), ErrorKind::shape, "mae: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

inline double estimator_mae(const DepthEstimator& e, const std::vector<DepthPair>& data) {
  require(!data.empty(), ErrorKind::argument, "estimator_mae: no samples");
  double s = 0;
  for (const auto& d : data) s += mean_abs_error(e.predict(d.image), d.depth);
  return s / static_cast<double>(data.size());
}

/// L1 regression with Adam. Throws a training failure carrying the final validation MAE when it
/// stays above the configured threshold.
inline DepthEstimator train_depth_estimator(const std::vector<DepthPair>& train, const std::vector<DepthPair>& val,
                                            const DepthEstimatorConfig& cfg, std::vector<double>* epoch_mae = nullptr) {
  require(static_cast<int>(train.size()) >= cfg.min_samples, ErrorKind::argument,
          "depth estimator needs >= " + std::to_string(cfg.min_samples) + " samples, got " + std::to_string(train.size()));
  require(!val.empty(), ErrorKind::argument, "depth estimator needs validation samples");
  const int H = height(train[0].image), W = width(train[0].image);
  DepthEstimator est(cfg.hidden, cfg.seed);
  est.params().set_trainable({"estimator"});
  nn::Adam<float> opt(cfg.lr);
  std::mt19937_64 rng(derive_seed(cfg.seed, "depth_estimator.shuffle"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_img = static_cast<std::size_t>(3) * H * W, per_depth = static_cast<std::size_t>(H) * W;
  const long total_steps = static_cast<long>(cfg.epochs) * static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      Tensor<float> x({static_cast<int>(n), 3, H, W}), y({static_cast<int>(n), 1, H, W});
      for (std::size_t k = 0; k < n; ++k) {
        const auto& d = train[order[start + k]];
        std::copy(d.image.storage().begin(), d.image.storage().end(), x.storage().begin() + static_cast<std::ptrdiff_t>(k * per_img));
        std::copy(d.depth.storage().begin(), d.depth.storage().end(), y.storage().begin() + static_cast<std::ptrdiff_t>(k * per_depth));
      }
      // Cosine decay to 5% of the base rate.
      const double progress = static_cast<double>(step++) / static_cast<double>(std::max<long>(1, total_steps));
      opt.set_lr(cfg.lr * (0.05 + 0.95 * 0.5 * (1 + std::cos(3.141592653589793 * progress))));
      est.params().zero_grad();
      auto loss = ops::l1(est.forward(Var<float>::constant(std::move(x))), y);
      backward(loss);
      opt.step(est.params());
    }
    if (epoch_mae) {
      est.mark_trained(0);
      epoch_mae->push_back(estimator_mae(est, val));
    }
  }
  est.mark_trained(0);
  const double mae = estimator_mae(est, val);
  est.mark_trained(mae);
  require(mae <= cfg.threshold, ErrorKind::training,
          "depth estimator did not converge: final validation MAE " + std::to_string(mae) + " > threshold " +
              std::to_string(cfg.threshold));
  return est;
}

inline std::vector<DepthPair> depth_pairs(const std::vector<RenderedSample>& samples) {
  std::vector<DepthPair> out;
  for (const auto& s : samples) out.push_back({s.image, s.depth_map});
  return out;
}

}  // namespace cnc::toy
