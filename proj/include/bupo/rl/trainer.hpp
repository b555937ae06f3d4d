#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bupo/model/generate.hpp"
#include "bupo/rl/objective.hpp"
#include "bupo/rl/optimizer.hpp"
#include "bupo/tasks/task.hpp"

namespace bupo::rl {

enum class Algorithm { Grpo, InterGrpo, Bupo };
std::string algorithm_name(Algorithm a);
Algorithm parse_algorithm(const std::string& name);

struct TrainerConfig {
  Algorithm algorithm = Algorithm::Grpo;
  std::size_t group_size = 8;          // G
  std::size_t prompt_batch = 8;        // prompts per step
  std::size_t mini_batch = 2;          // prompts per update
  std::size_t updates_per_rollout = 16;
  double clip_eps = 0.2;
  double temperature = 1.0;
  std::size_t max_new_tokens = 0;      // 0: the task's longest response
  std::size_t s_inter = 0;             // internal-phase steps for bupo
  std::size_t internal_layer = 1;      // l
  bool internal_apply_norm = false;
  std::size_t max_steps = 300;         // S_max
  AdamWSettings optimizer;
  std::uint64_t seed = 0;
  std::size_t pool_size = 4096;        // training instances drawn from
  std::size_t probe_size = 64;         // held-out instances for the PPL probe
  std::size_t ppl_every = 10;

  // Steps run with InterGRPO given the algorithm.
  std::size_t internal_steps() const;
  // ConfigError naming the offending key.
  void validate(const model::ModelConfig& model) const;
};

struct StepUpdate {
  double objective = 0.0;  // mean over updates
  double grad_norm = 0.0;  // mean pre-clip norm over updates
};

// Samples G responses per instance from `params` and scores them. Internal
// log-probs are recorded at `sampling.internal_layer`.
std::vector<RolloutGroup> collect_groups(const model::ModelParameters& params,
                                         const model::ModelConfig& config,
                                         std::span<const tasks::ProblemInstance> instances,
                                         std::size_t group_size,
                                         const model::SamplingSettings& sampling,
                                         std::mt19937_64& rng);

// updates_per_rollout mini-batch steps on the final-policy surrogate. On a
// numeric fault the parameters and optimizer are restored before rethrowing.
StepUpdate grpo_step(model::ModelParameters& params, AdamW& optimizer,
                     const model::ModelConfig& config, const std::vector<RolloutGroup>& groups,
                     const TrainerConfig& tc, std::mt19937_64& rng);
// Same with the layer-l internal policy; only layers <= l, the embedding and
// E_u move.
StepUpdate intergrpo_step(model::ModelParameters& params, AdamW& optimizer,
                          const model::ModelConfig& config,
                          const std::vector<RolloutGroup>& groups, const TrainerConfig& tc,
                          std::size_t layer, std::mt19937_64& rng);

struct WarmStartConfig {
  std::size_t supervised_steps = 0;  // gold answers
  std::size_t temper_steps = 0;      // weak-teacher targets
  // Weight q of the gold answer in the weak teacher; the rest is spread
  // uniformly over the answer alphabet at each answer position.
  double teacher_weight = 0.0;
  std::size_t batch = 32;
  double learning_rate = 1e-3;
  double temper_learning_rate = 1e-4;
  std::uint64_t seed = 0;
};
// Supervised pretraining on prompt + <open> answer <close> <eos>. The first
// supervised_steps use gold answers; the following temper_steps use soft
// targets q * gold + (1 - q) * uniform at answer positions, which keeps the
// learned circuit but flattens the answer distribution towards chance. With
// no supervised steps and q = 0 the model learns the response format only.
// Returns the loss of the last step.
double warm_start(model::ModelParameters& params, const model::ModelConfig& config,
                  const tasks::TaskSpec& task, const WarmStartConfig& ws);

struct StepRecord {
  std::size_t step = 0;
  bool internal = false;
  double mean_reward = 0.0;
  double surrogate_objective = 0.0;
  double policy_entropy = 0.0;
  double internal_entropy = 0.0;
  double mean_response_len = 0.0;
  std::optional<double> ppl;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

// Mean reward below `threshold` for `window` consecutive steps after
// `after` marks a collapse. Annotates; never stops training.
struct CollapseDetector {
  double threshold = 0.01;
  std::size_t window = 50;
  std::size_t after = 100;
  std::size_t streak = 0;
  std::optional<std::size_t> collapse_step;

  void observe(std::size_t step, double mean_reward);
};

class Trainer {
 public:
  Trainer(model::ModelConfig config, tasks::TaskSpec task, TrainerConfig tc,
          model::ModelParameters initial);

  bool done() const { return step_ >= tc_.max_steps; }
  std::size_t completed_steps() const { return step_; }
  // Runs step completed_steps() + 1.
  StepRecord step();

  const model::ModelParameters& params() const { return params_; }
  const AdamW& optimizer() const { return optimizer_; }
  const TrainerConfig& config() const { return tc_; }
  const model::ModelConfig& model_config() const { return config_; }
  const CollapseDetector& collapse() const { return collapse_; }
  const std::vector<tasks::ProblemInstance>& probe() const { return probe_; }

  // Everything needed to continue bit-identically.
  struct State {
    std::size_t step = 0;
    std::string rng;
    model::ModelParameters params;
    AdamW optimizer;
    CollapseDetector collapse;
  };
  State state() const;
  void restore(State state);

  bool log_wall_time = false;

 private:
  model::ModelConfig config_;
  tasks::TaskSpec task_;
  TrainerConfig tc_;
  model::ModelParameters params_;
  AdamW optimizer_;
  std::mt19937_64 rng_;
  std::vector<tasks::ProblemInstance> pool_, probe_;
  CollapseDetector collapse_;
  std::size_t step_ = 0;
};

struct TrainingResult {
  model::ModelParameters params;
  std::vector<StepRecord> log;
  std::optional<std::size_t> collapse_step;
};

// Runs the schedule to completion: steps 1..s_inter InterGRPO, the rest GRPO.
TrainingResult bupo_train(const model::ModelParameters& params, const model::ModelConfig& config,
                          const tasks::TaskSpec& task, const TrainerConfig& tc,
                          const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace bupo::rl
