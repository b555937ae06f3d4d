#pragma once

#include <span>
#include <vector>

#include "bupo/model/forward.hpp"
#include "bupo/tasks/task.hpp"

namespace bupo::rl {

using model::TokenId;
using numeric::Tensor;

struct Rollout {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;
  // Recorded when sampling, one per response token.
  std::vector<double> old_logprobs;
  std::vector<double> old_internal_logprobs;
  std::vector<double> entropies;
  std::vector<double> internal_entropies;
  double reward = 0.0;

  // Throws InputError when the arrays disagree with the response length,
  // a log-prob is positive or the reward is outside [0, 1].
  void check() const;
};

struct RolloutGroup {
  std::vector<Rollout> rollouts;
  std::vector<double> advantages;  // one per rollout
};

// (R_i - mean) / max(std, 1e-8) with the population std; all zeros when the
// rewards are equal. ConfigError for fewer than two rewards.
std::vector<double> group_advantages(std::span<const double> rewards);

// 1 when the verifier accepts the response, else 0.
double assemble_reward(const tasks::ProblemInstance& instance, std::span<const TokenId> response);

// Mean over rollouts of the token-mean of min(r A, clip(r, 1-eps, 1+eps) A),
// with r = exp(new - old). Per-rollout arrays must align.
double clipped_surrogate(const std::vector<std::vector<double>>& new_logprobs,
                         const std::vector<std::vector<double>>& old_logprobs,
                         std::span<const double> advantages, double eps);

// Tape form over flattened tokens: sum_t w_t min(r_t A_t, clip(r_t) A_t).
// The gradient is w_t A_t r_t where the unclipped term is the minimum and 0
// where the clipped term is.
numeric::Var clipped_surrogate(numeric::Var new_logprobs, std::span<const double> old_logprobs,
                               std::span<const double> advantages,
                               std::span<const double> weights, double eps);

enum class PolicyMode { Final, Internal };

struct ObjectiveSettings {
  PolicyMode mode = PolicyMode::Final;
  std::size_t layer = 0;  // internal layer, 1..L
  bool apply_norm = false;
  double temperature = 1.0;
  double clip_eps = 0.2;
};

struct ObjectiveResult {
  double objective = 0.0;
  // Gradients of the loss -objective, one per ModelParameters::refs(); empty
  // tensors for parameters the policy cannot reach.
  std::vector<Tensor> gradients;
};

// Evaluates the surrogate for the given rollouts against fresh log-probs of
// `params`, with gradients when `with_gradients` is set. Rollout i carries
// advantage advantages[i].
ObjectiveResult evaluate_surrogate(const model::ModelParameters& params,
                                   const model::ModelConfig& config,
                                   std::span<const Rollout* const> rollouts,
                                   std::span<const double> advantages,
                                   const ObjectiveSettings& settings, bool with_gradients = true);

// Log-probs of each response token under the selected policy.
std::vector<std::vector<double>> response_logprobs(const model::ModelParameters& params,
                                                   const model::ModelConfig& config,
                                                   std::span<const Rollout* const> rollouts,
                                                   const ObjectiveSettings& settings);

}  // namespace bupo::rl
