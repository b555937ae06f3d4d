#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bupo/cli/checkpoint.hpp"
#include "bupo/cli/run_config.hpp"
#include "bupo/internal/policy.hpp"
#include "bupo/rl/trainer.hpp"

namespace bupo::cli {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitData = 4;

inline constexpr const char* kTrainingLogColumns[] = {
    "step",           "phase",         "mean_reward",       "surrogate_objective",
    "policy_entropy", "internal_entropy_layer_l", "mean_response_len", "ppl",
    "grad_norm",      "wall_ms"};

std::string training_log_header();
std::string training_log_row(const rl::StepRecord& r);

// Parameters copied from / into "param.<name>" tensor records.
void store_parameters(Checkpoint& ckpt, const model::ModelParameters& params);
model::ModelParameters load_parameters(const Checkpoint& ckpt, const model::ModelConfig& config);
// The resolved config stored under "config".
RunConfig checkpoint_config(const Checkpoint& ckpt);

// Fresh initialization from model.seed followed by the configured warm start.
model::ModelParameters base_model(const RunConfig& config);

struct LayerChoice {
  std::size_t layer = 0;
  std::string source;  // "config", "boundary" or "fallback"
};
// bupo.layer when nonzero; otherwise the region boundary of `base` on the
// eval prompts, falling back to L/2 when there is none.
LayerChoice resolve_layer(const RunConfig& config, const model::ModelParameters& base);

struct TrainOptions {
  std::string out_dir;                     // empty: io.out_dir
  std::optional<std::string> resume;       // checkpoint to continue from
  const model::ModelParameters* base = nullptr;  // skips the warm start when set
  std::ostream* progress = nullptr;
  std::size_t progress_every = 25;
  // Stop after this many steps of this invocation, as if interrupted; the
  // state is checkpointed so the run can be resumed.
  std::optional<std::size_t> stop_after;
};

struct TrainSummary {
  std::size_t steps = 0;
  std::size_t internal_layer = 0;
  double initial_reward = 0.0;
  double final_reward = 0.0;  // mean of the last 10 steps
  std::vector<rl::StepRecord> log;  // steps run by this invocation only
  std::optional<std::size_t> collapse_step;
};

// Writes training_log.csv, checkpoint.ckpt, base.ckpt (fresh runs) and
// manifest.json under the output directory. On a NumericFault the last good
// state is checkpointed before the fault is rethrown.
TrainSummary run_train(RunConfig config, const TrainOptions& options);

struct AnalyzeResult {
  internal::CorpusProfile profile;
  internal::Boundary boundary;
};
// prompts_path may be empty (eval split prompts) or name a dataset JSONL file
// or a file of rendered prompts, one per line.
AnalyzeResult run_analyze(const std::string& checkpoint_path, const std::string& prompts_path,
                          const std::string& out_dir);

// Reads prompts as described for run_analyze.
std::vector<std::vector<model::TokenId>> read_prompts(const std::string& path);

struct EvalOptions {
  std::optional<std::size_t> problems;
  std::optional<std::size_t> samples;
  std::optional<std::vector<std::size_t>> ks;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // task.* and eval.* only
};
eval::EvalReport run_eval(const std::string& checkpoint_path, const EvalOptions& options,
                          const std::string& out_path);

// Human-readable summary of a checkpoint.
std::string inspect_checkpoint(const std::string& path);

}  // namespace bupo::cli
