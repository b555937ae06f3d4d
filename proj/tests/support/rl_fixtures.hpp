#pragma once

// Small models and rollout batches shared by the rl tests and the acceptance
// suite, plus a finite-difference check of surrogate gradients.

#include <algorithm>
#include <random>
#include <vector>

#include "bupo/rl/trainer.hpp"
#include "support/finite_difference.hpp"

namespace bupo::testing {

inline model::ModelConfig tiny_model(std::size_t layers = 4) {
  model::ModelConfig c;
  c.num_layers = layers;
  c.d_model = 16;
  c.num_heads = 2;
  c.d_ff = 24;
  c.vocab_size = tasks::vocab::kSize;
  c.max_seq_len = 16;
  c.init_std = 0.3;
  return c;
}

inline rl::TrainerConfig tiny_trainer(std::uint64_t seed = 1) {
  rl::TrainerConfig tc;
  tc.group_size = 4;
  tc.prompt_batch = 4;
  tc.mini_batch = 2;
  tc.updates_per_rollout = 2;
  tc.internal_layer = 2;
  tc.max_steps = 6;
  tc.pool_size = 64;
  tc.probe_size = 8;
  tc.ppl_every = 2;
  tc.seed = seed;
  tc.optimizer.learning_rate = 1e-3;
  return tc;
}

// Tiny model after format-only warm start, so sampled groups carry reward.
inline model::ModelParameters warm_tiny(const model::ModelConfig& config, std::uint64_t seed) {
  auto params = model::init_parameters(config, seed);
  rl::WarmStartConfig ws;
  ws.temper_steps = 150;
  ws.temper_learning_rate = 1e-3;
  ws.seed = seed;
  rl::warm_start(params, config, tasks::TaskSpec{}, ws);
  return params;
}

// Groups sampled from `params` with internal log-probs at `layer`.
inline std::vector<rl::RolloutGroup> sample_groups(const model::ModelParameters& params,
                                                   const model::ModelConfig& config,
                                                   std::size_t prompts, std::size_t group,
                                                   std::size_t layer, std::uint64_t seed) {
  tasks::TaskSpec task;
  const auto data = tasks::generate_dataset(task, prompts, seed);
  model::SamplingSettings s;
  s.max_new_tokens = 4;
  s.eos_id = tasks::vocab::kEos;
  s.internal_layer = layer;
  std::mt19937_64 rng(seed);
  return rl::collect_groups(params, config, data, group, s, rng);
}

struct FlatBatch {
  std::vector<const rl::Rollout*> rollouts;
  std::vector<double> advantages;
};

inline FlatBatch flatten(const std::vector<rl::RolloutGroup>& groups) {
  FlatBatch b;
  for (const auto& g : groups) {
    for (std::size_t j = 0; j < g.rollouts.size(); ++j) {
      b.rollouts.push_back(&g.rollouts[j]);
      b.advantages.push_back(g.advantages[j]);
    }
  }
  return b;
}

// Largest relative error between analytic loss gradients and central
// differences of -objective over `count` random entries, drawn so that every
// layer and both embeddings are represented.
inline double surrogate_gradient_error(const model::ModelParameters& params,
                                       const model::ModelConfig& config, const FlatBatch& batch,
                                       const rl::ObjectiveSettings& settings, std::size_t count,
                                       std::uint64_t seed, double step = 1e-5) {
  const rl::ObjectiveResult analytic =
      rl::evaluate_surrogate(params, config, batch.rollouts, batch.advantages, settings);
  auto refs = params.refs();
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!analytic.gradients[i].empty()) candidates.push_back(i);
  }
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t n = 0; n < count; ++n) {
    // Cycle through tensors so the sample spans the whole stack.
    const std::size_t ti = candidates[(n * 7 + rng() % 3) % candidates.size()];
    const std::size_t ei = rng() % refs[ti].tensor->size();
    model::ModelParameters plus = params, minus = params;
    (*plus.refs()[ti].tensor)[ei] += step;
    (*minus.refs()[ti].tensor)[ei] -= step;
    const double fp =
        rl::evaluate_surrogate(plus, config, batch.rollouts, batch.advantages, settings, false).objective;
    const double fm =
        rl::evaluate_surrogate(minus, config, batch.rollouts, batch.advantages, settings, false).objective;
    const double numeric = -(fp - fm) / (2.0 * step);
    worst = std::max(worst, relative_error(analytic.gradients[ti][ei], numeric, 1e-4));
  }
  return worst;
}

}  // namespace bupo::testing
