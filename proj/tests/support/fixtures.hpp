#pragma once

#include <random>

#include "cnc/backbone.hpp"

namespace cnc::testing {

inline backbone::UNetConfig tiny_config(int blocks = 4) {
  backbone::UNetConfig c;
  c.encoder_blocks = blocks;
  c.base_channels = 8;
  c.channel_mult = {1, 2, 2, 2};
  c.heads = 2;
  c.resolution = 16;
  c.time_dim = 16;
  c.stream_channels = 4;
  c.stream_blocks = 1;
  c.global_hidden = 16;
  c.context_dim = 16;
  c.embedding_dim = 16;
  c.text_tokens = 4;
  c.global_tokens = 2;
  c.vocab_size = 10;
  return c;
}

inline ConditionSet random_conditions(const backbone::UNetConfig& cfg, std::mt19937_64& rng) {
  ConditionSet s;
  const int P = cfg.resolution;
  s.fg_condition = rand_uniform<float>({1, P, P}, rng, 0.0f, 1.0f);
  s.bg_condition = rand_uniform<float>({1, P, P}, rng, 0.0f, 1.0f);
  std::normal_distribution<float> nd;
  for (int d = 0; d < cfg.embedding_dim; ++d) {
    s.fg_embedding.push_back(nd(rng));
    s.bg_embedding.push_back(nd(rng));
  }
  for (int t = 0; t < cfg.text_tokens; ++t) s.text_ids.push_back(static_cast<int>(rng() % cfg.vocab_size));
  s.mask = Mask(P, P);
  for (int y = 0; y < P; ++y)
    for (int x = 0; x < P; ++x) s.mask.set(y, x, (rng() & 1) != 0);
  return s;
}

}  // namespace cnc::testing
