#include "bupo/rl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <sstream>

#include "bupo/errors.hpp"
#include "bupo/eval/metrics.hpp"
#include "bupo/numeric/summation.hpp"

namespace bupo::rl {

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Grpo: return "grpo";
    case Algorithm::InterGrpo: return "intergrpo";
    case Algorithm::Bupo: return "bupo";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& name) {
  for (Algorithm a : {Algorithm::Grpo, Algorithm::InterGrpo, Algorithm::Bupo}) {
    if (algorithm_name(a) == name) return a;
  }
  throw ConfigError("train.algorithm: unknown algorithm '" + name +
                    "' (expected grpo, intergrpo or bupo)");
}

std::size_t TrainerConfig::internal_steps() const {
  switch (algorithm) {
    case Algorithm::Grpo: return 0;
    case Algorithm::InterGrpo: return max_steps;
    case Algorithm::Bupo: return std::min(s_inter, max_steps);
  }
  return 0;
}

void TrainerConfig::validate(const model::ModelConfig& model) const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError(key + ": " + why);
  };
  if (group_size < 2) fail("train.group_size", "must be at least 2");
  if (prompt_batch < 1) fail("train.prompt_batch", "must be at least 1");
  if (mini_batch < 1 || mini_batch > prompt_batch) {
    fail("train.mini_batch", "must be in [1, train.prompt_batch]");
  }
  if (updates_per_rollout < 1) fail("train.updates_per_rollout", "must be at least 1");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) fail("train.clip_eps", "must be in (0, 1)");
  if (!(temperature > 0.0)) fail("train.temperature", "must be positive");
  if (internal_layer < 1 || internal_layer > model.num_layers) {
    fail("bupo.layer", "must be in [1, " + std::to_string(model.num_layers) + "], got " +
                           std::to_string(internal_layer));
  }
  if (max_steps < 1) fail("train.max_steps", "must be at least 1");
  if (algorithm == Algorithm::Bupo && s_inter > max_steps) {
    fail("bupo.s_inter", "must not exceed train.max_steps");
  }
  if (!(optimizer.learning_rate > 0.0)) fail("train.learning_rate", "must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) fail("train.beta1", "must be in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) fail("train.beta2", "must be in [0, 1)");
  if (!(optimizer.grad_clip >= 0.0)) fail("train.grad_clip", "must be non-negative");
  if (pool_size < 1) fail("train.pool_size", "must be at least 1");
  if (probe_size < 1) fail("train.probe_size", "must be at least 1");
  if (ppl_every < 1) fail("train.ppl_every", "must be at least 1");
}

std::vector<RolloutGroup> collect_groups(const model::ModelParameters& params,
                                         const model::ModelConfig& config,
                                         std::span<const tasks::ProblemInstance> instances,
                                         std::size_t group_size,
                                         const model::SamplingSettings& sampling,
                                         std::mt19937_64& rng) {
  std::vector<model::GenerationRequest> requests;
  requests.reserve(instances.size() * group_size);
  for (const auto& inst : instances) {
    for (std::size_t j = 0; j < group_size; ++j) requests.push_back({inst.prompt, rng()});
  }
  auto gens = model::generate_batch(params, config, requests, sampling);
  std::vector<RolloutGroup> groups(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    std::vector<double> rewards;
    for (std::size_t j = 0; j < group_size; ++j) {
      model::Generation& g = gens[i * group_size + j];
      Rollout r;
      r.prompt = instances[i].prompt;
      const auto response = g.response();
      r.response.assign(response.begin(), response.end());
      r.old_logprobs = std::move(g.logprobs);
      r.entropies = std::move(g.entropies);
      if (sampling.internal_layer > 0) {
        r.old_internal_logprobs = std::move(g.internal_logprobs);
        r.internal_entropies = std::move(g.internal_entropies);
      } else {
        r.old_internal_logprobs.assign(r.response.size(), 0.0);
        r.internal_entropies.assign(r.response.size(), 0.0);
      }
      r.reward = assemble_reward(instances[i], r.response);
      rewards.push_back(r.reward);
      groups[i].rollouts.push_back(std::move(r));
    }
    groups[i].advantages = group_advantages(rewards);
  }
  return groups;
}

namespace {

StepUpdate policy_step(model::ModelParameters& params, AdamW& optimizer,
                       const model::ModelConfig& config, const std::vector<RolloutGroup>& groups,
                       const TrainerConfig& tc, const ObjectiveSettings& settings,
                       std::mt19937_64& rng) {
  if (groups.empty()) throw InputError("policy step without rollout groups");
  const model::ModelParameters saved_params = params;
  const AdamW saved_optimizer = optimizer;
  try {
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t mb = std::min(tc.mini_batch, groups.size());
    std::size_t cursor = 0;
    numeric::CompensatedSum objective, norm;
    for (std::size_t u = 0; u < tc.updates_per_rollout; ++u) {
      if (cursor + mb > order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      std::vector<const Rollout*> batch;
      std::vector<double> advantages;
      for (std::size_t k = cursor; k < cursor + mb; ++k) {
        const RolloutGroup& g = groups[order[k]];
        for (std::size_t j = 0; j < g.rollouts.size(); ++j) {
          batch.push_back(&g.rollouts[j]);
          advantages.push_back(g.advantages.at(j));
        }
      }
      cursor += mb;
      const ObjectiveResult r = evaluate_surrogate(params, config, batch, advantages, settings);
      objective.add(r.objective);
      norm.add(optimizer.step(params, r.gradients));
    }
    const double n = static_cast<double>(tc.updates_per_rollout);
    return {objective.value() / n, norm.value() / n};
  } catch (const NumericFault&) {
    params = saved_params;
    optimizer = saved_optimizer;
    throw;
  }
}

}  // namespace

StepUpdate grpo_step(model::ModelParameters& params, AdamW& optimizer,
                     const model::ModelConfig& config, const std::vector<RolloutGroup>& groups,
                     const TrainerConfig& tc, std::mt19937_64& rng) {
  ObjectiveSettings s;
  s.mode = PolicyMode::Final;
  s.temperature = tc.temperature;
  s.clip_eps = tc.clip_eps;
  return policy_step(params, optimizer, config, groups, tc, s, rng);
}

StepUpdate intergrpo_step(model::ModelParameters& params, AdamW& optimizer,
                          const model::ModelConfig& config,
                          const std::vector<RolloutGroup>& groups, const TrainerConfig& tc,
                          std::size_t layer, std::mt19937_64& rng) {
  if (layer < 1 || layer > config.num_layers) {
    throw ConfigError("bupo.layer: internal layer " + std::to_string(layer) +
                      " out of range [1, " + std::to_string(config.num_layers) + "]");
  }
  ObjectiveSettings s;
  s.mode = PolicyMode::Internal;
  s.layer = layer;
  s.apply_norm = tc.internal_apply_norm;
  s.temperature = tc.temperature;
  s.clip_eps = tc.clip_eps;
  return policy_step(params, optimizer, config, groups, tc, s, rng);
}

double warm_start(model::ModelParameters& params, const model::ModelConfig& config,
                  const tasks::TaskSpec& task, const WarmStartConfig& ws) {
  task.validate(config);
  const std::size_t total = ws.supervised_steps + ws.temper_steps;
  if (total == 0) return 0.0;
  if (ws.batch == 0) throw ConfigError("train.warm_batch must be at least 1");
  if (!(ws.teacher_weight >= 0.0 && ws.teacher_weight <= 1.0)) {
    throw ConfigError("train.warm_teacher_weight must be in [0, 1]");
  }
  std::mt19937_64 rng(ws.seed);
  const auto pool = tasks::generate_dataset(task, 4096, ws.seed, tasks::Split::Train);
  const auto alphabet = tasks::answer_symbols(task);
  const std::size_t n = config.vocab_size;
  AdamWSettings opt;
  opt.learning_rate = ws.learning_rate;
  AdamW optimizer(params, opt);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  double loss = 0.0;
  for (std::size_t s = 0; s < total; ++s) {
    const bool tempering = s >= ws.supervised_steps;
    if (s == ws.supervised_steps) optimizer.set_learning_rate(ws.temper_learning_rate);
    const double q = tempering ? ws.teacher_weight : 1.0;

    numeric::Tape tape;
    const model::ParameterVars vars = model::bind_parameters(tape, params);
    model::PackedBatch batch;
    std::vector<std::size_t> rows;
    std::vector<double> targets;
    for (std::size_t b = 0; b < ws.batch; ++b) {
      const tasks::ProblemInstance& inst = pool[pick(rng)];
      std::vector<TokenId> seq = inst.prompt;
      const auto response = inst.canonical_response();
      seq.insert(seq.end(), response.begin(), response.end());
      const std::size_t base = batch.num_rows();
      const std::size_t first_answer = inst.prompt.size() + 1;
      const std::size_t end_answer = first_answer + inst.answer.size();
      for (std::size_t t = inst.prompt.size() - 1; t + 1 < seq.size(); ++t) {
        rows.push_back(base + t);
        std::vector<double> row(n, 0.0);
        const std::size_t next = t + 1;
        if (next >= first_answer && next < end_answer && q < 1.0) {
          for (TokenId a : alphabet) row[a] = (1.0 - q) / static_cast<double>(alphabet.size());
          row[seq[next]] += q;
        } else {
          row[seq[next]] = 1.0;
        }
        targets.insert(targets.end(), row.begin(), row.end());
      }
      batch.append(seq);
    }
    const model::ForwardGraph graph =
        model::build_forward(tape, vars, config, batch, config.num_layers);
    const numeric::Var logp =
        numeric::log_softmax_rows(model::final_logits(graph, vars, config, rows));
    const numeric::Var weights = tape.leaf(Tensor({rows.size(), n}, std::move(targets)), false);
    const numeric::Var ce = numeric::scale(numeric::reduce_sum(numeric::mul(logp, weights)),
                                           -1.0 / static_cast<double>(rows.size()));
    loss = ce.value()[0];
    tape.backward(ce);
    std::vector<Tensor> grads;
    for (const numeric::Var& v : vars.in_ref_order()) {
      grads.push_back(v.grad() ? *v.grad() : Tensor(v.shape()));
    }
    optimizer.step(params, grads);
  }
  return loss;
}

void CollapseDetector::observe(std::size_t step, double mean_reward) {
  if (step <= after) return;
  streak = mean_reward < threshold ? streak + 1 : 0;
  if (streak >= window && !collapse_step) collapse_step = step;
}

namespace {

constexpr std::uint64_t kPoolSalt = 0x6a09e667f3bcc909ULL;
constexpr std::uint64_t kProbeSalt = 0xbb67ae8584caa73bULL;

}  // namespace

Trainer::Trainer(model::ModelConfig config, tasks::TaskSpec task, TrainerConfig tc,
                 model::ModelParameters initial)
    : config_(std::move(config)),
      task_(task),
      tc_(tc),
      params_(std::move(initial)),
      rng_(tc.seed) {
  config_.validate();
  task_.validate(config_);
  tc_.validate(config_);
  params_.check_shapes(config_);
  optimizer_ = AdamW(params_, tc_.optimizer);
  pool_ = tasks::generate_dataset(task_, tc_.pool_size, tc_.seed ^ kPoolSalt, tasks::Split::Train);
  probe_ = tasks::generate_dataset(task_, tc_.probe_size, tc_.seed ^ kProbeSalt, tasks::Split::Eval);
}

StepRecord Trainer::step() {
  if (done()) throw UsageError("training already reached train.max_steps");
  const auto started = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = step_ + 1;
  rec.internal = rec.step <= tc_.internal_steps();

  std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
  std::vector<tasks::ProblemInstance> batch;
  for (std::size_t i = 0; i < tc_.prompt_batch; ++i) batch.push_back(pool_[pick(rng_)]);

  model::SamplingSettings sampling;
  sampling.max_new_tokens =
      tc_.max_new_tokens ? tc_.max_new_tokens : task_.max_response_length();
  sampling.temperature = tc_.temperature;
  sampling.eos_id = tasks::vocab::kEos;
  sampling.internal_layer = tc_.internal_layer;
  sampling.internal_apply_norm = tc_.internal_apply_norm;
  const auto groups = collect_groups(params_, config_, batch, tc_.group_size, sampling, rng_);

  numeric::CompensatedSum reward, length, entropy, internal_entropy;
  std::size_t rollouts = 0, tokens = 0;
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      reward.add(r.reward);
      length.add(static_cast<double>(r.response.size()));
      for (double h : r.entropies) entropy.add(h);
      for (double h : r.internal_entropies) internal_entropy.add(h);
      tokens += r.response.size();
      ++rollouts;
    }
  }
  rec.mean_reward = reward.value() / static_cast<double>(rollouts);
  rec.mean_response_len = length.value() / static_cast<double>(rollouts);
  if (tokens > 0) {
    rec.policy_entropy = entropy.value() / static_cast<double>(tokens);
    rec.internal_entropy = internal_entropy.value() / static_cast<double>(tokens);
  }

  const StepUpdate update =
      rec.internal ? intergrpo_step(params_, optimizer_, config_, groups, tc_, tc_.internal_layer, rng_)
                   : grpo_step(params_, optimizer_, config_, groups, tc_, rng_);
  rec.surrogate_objective = update.objective;
  rec.grad_norm = update.grad_norm;
  if (rec.step == 1 || rec.step % tc_.ppl_every == 0) {
    rec.ppl = eval::perplexity(params_, config_, probe_);
  }
  collapse_.observe(rec.step, rec.mean_reward);
  step_ = rec.step;
  if (log_wall_time) {
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            started)
                      .count();
  }
  return rec;
}

Trainer::State Trainer::state() const {
  std::ostringstream rng;
  rng << rng_;
  return {step_, rng.str(), params_, optimizer_, collapse_};
}

void Trainer::restore(State state) {
  state.params.check_shapes(config_);
  if (state.optimizer.slots().size() != optimizer_.slots().size()) {
    throw CorruptDataError("optimizer state does not match the model");
  }
  std::istringstream rng(state.rng);
  std::mt19937_64 engine;
  rng >> engine;
  if (rng.fail()) throw CorruptDataError("unreadable random-number state");
  AdamW optimizer(state.params, tc_.optimizer);
  optimizer.slots() = std::move(state.optimizer.slots());
  rng_ = engine;
  step_ = state.step;
  params_ = std::move(state.params);
  optimizer_ = std::move(optimizer);
  collapse_ = state.collapse;
}

TrainingResult bupo_train(const model::ModelParameters& params, const model::ModelConfig& config,
                          const tasks::TaskSpec& task, const TrainerConfig& tc,
                          const std::function<void(const StepRecord&)>& on_step) {
  Trainer trainer(config, task, tc, params);
  TrainingResult result;
  while (!trainer.done()) {
    result.log.push_back(trainer.step());
    if (on_step) on_step(result.log.back());
  }
  result.params = trainer.params();
  result.collapse_step = trainer.collapse().collapse_step;
  return result;
}

}  // namespace bupo::rl
