#pragma once

// Small configurations shared by the training, interpretability and service tests.

#include <string>

#include "da6/training.hpp"

namespace fixtures {

// 21x21 open field: windows around (5,5) and (15,15) are both empty and in bounds.
inline std::string open_map() {
  std::string text;
  for (int y = 0; y < 21; ++y) {
    std::string row(21, 'b');
    if (y == 10) row[10] = 'B', row[11] = 'B';
    text += row + "\n";
  }
  return text;
}

inline da6::train::TrainConfig tiny_config(da6::Variant v, std::vector<da6::env::ConditionalKind> kinds) {
  da6::train::TrainConfig c;
  c.map_text = open_map();
  c.roster = {da6::env::standard_agent('A'), da6::env::standard_agent('B')};
  c.objects_per_type = {4, 4};
  c.horizon = 12;
  c.episodes = 3;
  c.batch_size = 4;
  c.replay_capacity = 64;
  c.warmup = 8;
  c.target_sync = 10;
  c.epsilon = {1.0, 0.1, 30};
  c.variant = v;
  c.conditional_states = std::move(kinds);
  c.model.local = {5, 7, 1, 8, 1, 2};
  c.model.cond_patch = 7;
  c.model.head.hidden = 8;
  c.model.head.cosine_features = 4;
  c.model.head.train_quantiles = 3;
  c.model.head.target_quantiles = 3;
  c.model.head.eval_quantiles = 4;
  c.model.baseline_hidden = {16, 8};
  return c;
}

inline da6::train::PolicySet tiny_policies(da6::Variant v, std::vector<da6::env::ConditionalKind> kinds,
                                           std::uint64_t seed = 3, std::string id = "tiny") {
  const auto cfg = tiny_config(v, kinds);
  const auto spec = da6::train::make_env_spec(cfg);
  auto set = da6::train::make_policies(spec, da6::train::make_model_config(cfg, spec), kinds, seed, 5);
  set.id = std::move(id);
  return set;
}

}  // namespace fixtures
