#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "cnc/backbone.hpp"
#include "cnc/conditions.hpp"

namespace cnc::diffusion {

/// Linear beta schedule with cumulative products kept in double precision.
struct DiffusionSchedule {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::vector<double> betas, alphas, alpha_bars;

  DiffusionSchedule() : DiffusionSchedule(1000) {}
  explicit DiffusionSchedule(int steps_, double beta_start_ = 1e-4, double beta_end_ = 2e-2)
      : steps(steps_), beta_start(beta_start_), beta_end(beta_end_) {
    require(steps >= 1, ErrorKind::config, "schedule needs at least one step");
    require(beta_start > 0 && beta_start <= beta_end && beta_end < 1, ErrorKind::config, "invalid beta range");
    double prod = 1;
    for (int t = 0; t < steps; ++t) {
      const double b = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
      betas.push_back(b);
      alphas.push_back(1 - b);
      prod *= 1 - b;
      alpha_bars.push_back(prod);
    }
  }

  double alpha_bar(int t) const {
    check(t);
    return alpha_bars[static_cast<std::size_t>(t)];
  }
  double signal(int t) const { return std::sqrt(alpha_bar(t)); }
  double noise(int t) const { return std::sqrt(1 - alpha_bar(t)); }
  void check(int t) const {
    require(t >= 0 && t < steps, ErrorKind::argument,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
  }

  nlohmann::json to_json() const { return {{"steps", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}; }
  static DiffusionSchedule from_json(const nlohmann::json& j) {
    return DiffusionSchedule(j.value("steps", 1000), j.value("beta_start", 1e-4), j.value("beta_end", 2e-2));
  }
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one timestep per leading-axis sample.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& eps, const DiffusionSchedule& s) {
  require(z0.same_shape(eps), ErrorKind::shape, "q_sample: noise shape does not match latent");
  require(z0.rank() >= 1 && static_cast<int>(t.size()) == z0.dim(0), ErrorKind::shape, "q_sample: one timestep per sample");
  Tensor<T> out(z0.shape());
  const std::size_t per = z0.size() / t.size();
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double a = s.signal(t[n]), b = s.noise(t[n]);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i)
      out[i] = static_cast<T>(a * static_cast<double>(z0[i]) + b * static_cast<double>(eps[i]));
  }
  return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const DiffusionSchedule& s) {
  return q_sample(z0, std::vector<int>(static_cast<std::size_t>(z0.dim(0)), t), eps, s);
}

template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, T scale) {
  require(eps_uncond.same_shape(eps_cond), ErrorKind::shape, "cfg_combine: shape mismatch");
  if (scale == T(1)) return eps_cond;  // u + (c - u) is not exactly c in floating point
  Tensor<T> out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Training objective

struct DropoutConfig {
  double fg_map = 0.1;
  double bg_map = 0.1;
  double fg_embedding = 0.1;
  double bg_embedding = 0.1;
  double text = 0.1;
  double all = 0.05;  ///< drops everything at once (unconditional branch for CFG)

  static DropoutConfig none() { return {0, 0, 0, 0, 0, 0}; }

  void validate() const {
    for (double p : {fg_map, bg_map, fg_embedding, bg_embedding, text, all})
      require(p >= 0 && p <= 1, ErrorKind::config, "dropout probabilities must lie in [0, 1]");
  }
  nlohmann::json to_json() const {
    return {{"fg_map", fg_map}, {"bg_map", bg_map}, {"fg_embedding", fg_embedding},
            {"bg_embedding", bg_embedding}, {"text", text}, {"all", all}};
  }
  static DropoutConfig from_json(const nlohmann::json& j) {
    DropoutConfig d;
    d.fg_map = j.value("fg_map", d.fg_map);
    d.bg_map = j.value("bg_map", d.bg_map);
    d.fg_embedding = j.value("fg_embedding", d.fg_embedding);
    d.bg_embedding = j.value("bg_embedding", d.bg_embedding);
    d.text = j.value("text", d.text);
    d.all = j.value("all", d.all);
    d.validate();
    return d;
  }
};

/// Draws drop flags: one joint draw for the all-drop, then one independent draw per condition.
template <typename Rng>
DropFlags sample_drop(const DropoutConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < cfg.all) {
    // Keep the stream length fixed regardless of the outcome.
    for (int i = 0; i < 5; ++i) u(rng);
    return DropFlags::all();
  }
  DropFlags d;
  d.fg_map = u(rng) < cfg.fg_map;
  d.bg_map = u(rng) < cfg.bg_map;
  d.fg_embedding = u(rng) < cfg.fg_embedding;
  d.bg_embedding = u(rng) < cfg.bg_embedding;
  d.text = u(rng) < cfg.text;
  return d;
}

/// One training pair: clean latent [C, h, w] and its full condition set.
struct TrainingExample {
  Tensor<float> latent;
  ConditionSet conditions;
};

/// Noise predictor: (z_t, t, conditions) -> eps estimate shaped like z_t.
template <typename T>
using Predictor = std::function<Var<T>(const Var<T>&, const std::vector<int>&, const ConditionBatch<T>&)>;

template <typename T>
Predictor<T> predictor(const backbone::ControlledUNet<T>& model, backbone::ForwardOptions opts = {}) {
  return [&model, opts](const Var<T>& z, const std::vector<int>& t, const ConditionBatch<T>& c) {
    return model.forward(z, t, c, opts);
  };
}

/// Deterministic core of the objective for given timesteps, noise and (already dropped) conditions.
template <typename T>
Var<T> noise_loss(const Predictor<T>& model, const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& eps,
                  std::span<const ConditionSet> sets, const DiffusionSchedule& schedule, int pad_id = 0) {
  const auto zt = Var<T>::constant(q_sample(z0, t, eps, schedule));
  return ops::mse(model(zt, t, batch_conditions<T>(sets, pad_id)), eps);
}

/// Mean squared error between sampled noise and its prediction at uniformly drawn timesteps.
/// Random draws per sample, in order: timestep, dropout flags; then all noise at once.
template <typename T, typename Rng>
Var<T> loss_step(const Predictor<T>& model, std::span<const TrainingExample> batch, const DiffusionSchedule& schedule,
                 const DropoutConfig& dropout, Rng& rng, int pad_id = 0) {
  require(!batch.empty(), ErrorKind::argument, "loss_step: empty batch");
  const Shape item = batch[0].latent.shape();
  const int B = static_cast<int>(batch.size());
  Shape full{B};
  full.insert(full.end(), item.begin(), item.end());
  Tensor<T> z0(full);
  const std::size_t per = batch[0].latent.size();
  std::vector<int> t;
  std::vector<ConditionSet> sets;
  // Stratified timesteps: sample n lands in stratum perm[n] of B equal slices of [0, T). Each t is
  // still marginally uniform, but a batch always spans the schedule, which steadies the loss curve.
  std::vector<int> perm(static_cast<std::size_t>(B));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int n = 0; n < B; ++n) {
    const auto& ex = batch[static_cast<std::size_t>(n)];
    require(ex.latent.shape() == item, ErrorKind::shape, "loss_step: latent shapes differ within the batch");
    for (std::size_t i = 0; i < per; ++i) z0[n * per + i] = static_cast<T>(ex.latent[i]);
    const double u = unit(rng);
    t.push_back(std::min(schedule.steps - 1,
                         static_cast<int>((perm[static_cast<std::size_t>(n)] + u) * schedule.steps / B)));
    sets.push_back(ex.conditions);
    sets.back().drop = sample_drop(dropout, rng);
  }
  const Tensor<T> eps = randn<T>(full, rng);
  return noise_loss(model, z0, t, eps, std::span<const ConditionSet>(sets), schedule, pad_id);
}

// ---------------------------------------------------------------------------------------------
// Sampling

struct SampleOptions {
  int steps = 50;
  float cfg_scale = 7.0f;
  float eta = 0.0f;  ///< only 0 is supported
  std::uint64_t seed = 0;
  int pad_id = 0;
};

/// Descending uniform-stride subset of [0, T).
inline std::vector<int> ddim_timesteps(int steps, int total) {
  require(steps >= 1, ErrorKind::argument, "ddim: steps must be >= 1");
  require(steps <= total, ErrorKind::argument,
          "ddim: " + std::to_string(steps) + " steps exceed the schedule's " + std::to_string(total));
  std::vector<int> ts;
  for (int i = steps - 1; i >= 0; --i) ts.push_back(static_cast<int>(static_cast<long long>(i) * total / steps));
  return ts;
}

/// Initial noise for sample n is drawn from its own stream, so batch composition does not change it.
template <typename T>
Tensor<T> initial_noise(int batch, int channels, int side, std::uint64_t seed) {
  Tensor<T> z({batch, channels, side, side});
  const std::size_t per = z.size() / static_cast<std::size_t>(batch);
  for (int n = 0; n < batch; ++n) {
    std::mt19937_64 rng(derive_seed(seed, "ddim.noise", static_cast<std::uint64_t>(n)));
    const auto e = randn<T>({channels, side, side}, rng);
    std::copy(e.storage().begin(), e.storage().end(), z.storage().begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  return z;
}

/// Deterministic DDIM (eta = 0) with classifier-free guidance against the all-null condition set.
/// Returns decoded images [B, C_img, P, P] in [0, 1].
template <typename T>
Tensor<T> ddim_sample(const Predictor<T>& model, std::span<const ConditionSet> conds, const DiffusionSchedule& schedule,
                      const backbone::LatentCodec<T>& codec, int image_channels, int pixels, const SampleOptions& opt) {
  require(opt.eta == 0.0f, ErrorKind::argument, "ddim: only eta = 0 is supported");
  require(!conds.empty(), ErrorKind::argument, "ddim: empty condition batch");
  const auto ts = ddim_timesteps(opt.steps, schedule.steps);
  const int B = static_cast<int>(conds.size());
  const bool need_cond = opt.cfg_scale != 0.0f, need_uncond = opt.cfg_scale != 1.0f;

  std::vector<ConditionSet> nulls;
  for (const auto& c : conds) nulls.push_back(null_conditions(c));
  const auto cond_batch = batch_conditions<T>(conds, opt.pad_id);
  const auto null_batch = batch_conditions<T>(nulls, opt.pad_id);
  const auto both = concat_batches(cond_batch, null_batch);

  Tensor<T> z = initial_noise<T>(B, codec.channels(image_channels), codec.resolution(pixels), opt.seed);
  const T limit = codec.limit();
  NoGradGuard guard;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    Tensor<T> eps;
    if (need_cond && need_uncond) {
      Shape s = z.shape();
      s[0] *= 2;
      Buffer<T> data(z.storage());
      data.insert(data.end(), z.storage().begin(), z.storage().end());
      const auto out = model(Var<T>::constant(Tensor<T>(s, std::move(data))), std::vector<int>(2 * B, t), both).value();
      const std::size_t half = z.size();
      Tensor<T> ec(z.shape(), Buffer<T>(out.storage().begin(), out.storage().begin() + static_cast<std::ptrdiff_t>(half)));
      Tensor<T> eu(z.shape(), Buffer<T>(out.storage().begin() + static_cast<std::ptrdiff_t>(half), out.storage().end()));
      eps = cfg_combine(eu, ec, static_cast<T>(opt.cfg_scale));
    } else {
      eps = model(Var<T>::constant(z), std::vector<int>(B, t), need_cond ? cond_batch : null_batch).value();
    }
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = k + 1 < ts.size() ? schedule.alpha_bar(ts[k + 1]) : 1.0;
    const double sa = std::sqrt(ab), sn = std::sqrt(1 - ab);
    for (std::size_t i = 0; i < z.size(); ++i) {
      double x0 = (static_cast<double>(z[i]) - sn * eps[i]) / sa;
      x0 = std::clamp(x0, -static_cast<double>(limit), static_cast<double>(limit));
      const double e = (static_cast<double>(z[i]) - sa * x0) / sn;
      z[i] = static_cast<T>(std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev) * e);
    }
    require(all_finite(z), ErrorKind::numeric, "ddim: non-finite latent at t=" + std::to_string(t));
  }
  return codec.decode(z);
}

template <typename T>
Tensor<T> ddim_sample(const backbone::ControlledUNet<T>& model, std::span<const ConditionSet> conds,
                      const DiffusionSchedule& schedule, const SampleOptions& opt, backbone::ForwardOptions fwd = {}) {
  const auto& cfg = model.config();
  return ddim_sample<T>(predictor(model, fwd), conds, schedule, backbone::LatentCodec<T>{cfg.codec}, cfg.image_channels,
                        cfg.resolution, opt);
}

}  // namespace cnc::diffusion
