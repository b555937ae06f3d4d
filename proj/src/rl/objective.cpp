#include "bupo/rl/objective.hpp"

#include <algorithm>
#include <cmath>

#include "bupo/errors.hpp"
#include "bupo/numeric/summation.hpp"

namespace bupo::rl {

using numeric::Tape;
using numeric::Var;

void Rollout::check() const {
  const std::size_t n = response.size();
  if (old_logprobs.size() != n || old_internal_logprobs.size() != n) {
    throw InputError("rollout has " + std::to_string(n) + " response tokens but " +
                     std::to_string(old_logprobs.size()) + " final and " +
                     std::to_string(old_internal_logprobs.size()) + " internal log-probs");
  }
  for (double lp : old_logprobs) {
    if (!(lp <= 0.0)) throw InputError("rollout log-prob " + std::to_string(lp) + " is positive");
  }
  for (double lp : old_internal_logprobs) {
    if (!(lp <= 0.0)) throw InputError("rollout internal log-prob " + std::to_string(lp) + " is positive");
  }
  if (!(reward >= 0.0 && reward <= 1.0)) {
    throw InputError("rollout reward " + std::to_string(reward) + " is outside [0, 1]");
  }
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw ConfigError("group size must be at least 2, got " + std::to_string(rewards.size()));
  }
  std::vector<double> out(rewards.size(), 0.0);
  // Equal rewards carry no signal. Testing equality directly avoids a
  // rounding residue in the mean turning into spurious advantages.
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) {
    return out;
  }
  const double g = static_cast<double>(rewards.size());
  numeric::CompensatedSum sum;
  for (double r : rewards) sum.add(r);
  const double mean = sum.value() / g;
  numeric::CompensatedSum sq;
  for (double r : rewards) sq.add((r - mean) * (r - mean));
  const double stddev = std::sqrt(sq.value() / g);
  if (stddev == 0.0) return out;
  const double denom = std::max(stddev, 1e-8);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

double assemble_reward(const tasks::ProblemInstance& instance, std::span<const TokenId> response) {
  return tasks::reward(instance, response);
}

namespace {

double clip_term(double ratio, double adv, double eps, bool* unclipped_active) {
  const double unclipped = ratio * adv;
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
  if (unclipped_active) *unclipped_active = unclipped <= clipped;
  return std::min(unclipped, clipped);
}

void check_eps(double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw ConfigError("clip epsilon must be in (0, 1)");
}

}  // namespace

double clipped_surrogate(const std::vector<std::vector<double>>& new_logprobs,
                         const std::vector<std::vector<double>>& old_logprobs,
                         std::span<const double> advantages, double eps) {
  check_eps(eps);
  if (new_logprobs.size() != old_logprobs.size() || new_logprobs.size() != advantages.size()) {
    throw InputError("surrogate needs one log-prob array and advantage per rollout");
  }
  if (new_logprobs.empty()) throw InputError("surrogate over an empty group");
  numeric::CompensatedSum total;
  for (std::size_t i = 0; i < new_logprobs.size(); ++i) {
    if (new_logprobs[i].size() != old_logprobs[i].size()) {
      throw InputError("rollout " + std::to_string(i) + ": " +
                       std::to_string(new_logprobs[i].size()) + " new vs " +
                       std::to_string(old_logprobs[i].size()) + " old log-probs");
    }
    if (new_logprobs[i].empty()) continue;
    numeric::CompensatedSum tokens;
    for (std::size_t t = 0; t < new_logprobs[i].size(); ++t) {
      const double r = std::exp(new_logprobs[i][t] - old_logprobs[i][t]);
      tokens.add(clip_term(r, advantages[i], eps, nullptr));
    }
    total.add(tokens.value() / static_cast<double>(new_logprobs[i].size()));
  }
  return total.value() / static_cast<double>(new_logprobs.size());
}

Var clipped_surrogate(Var new_logprobs, std::span<const double> old_logprobs,
                      std::span<const double> advantages, std::span<const double> weights,
                      double eps) {
  check_eps(eps);
  const Tensor& lp = new_logprobs.value();
  const std::size_t n = lp.size();
  if (old_logprobs.size() != n || advantages.size() != n || weights.size() != n) {
    throw InputError("surrogate over " + std::to_string(n) + " tokens got " +
                     std::to_string(old_logprobs.size()) + " old log-probs, " +
                     std::to_string(advantages.size()) + " advantages and " +
                     std::to_string(weights.size()) + " weights");
  }
  // Per-token d(objective)/d(new log-prob), zero where the clipped term wins.
  std::vector<double> slope(n);
  numeric::CompensatedSum total;
  for (std::size_t t = 0; t < n; ++t) {
    const double r = std::exp(lp[t] - old_logprobs[t]);
    bool active = false;
    total.add(weights[t] * clip_term(r, advantages[t], eps, &active));
    slope[t] = active ? weights[t] * advantages[t] * r : 0.0;
  }
  const std::size_t in = new_logprobs.id();
  return new_logprobs.tape()->record(
      "clipped_surrogate", {in}, Tensor::vector({total.value()}),
      [in, slope = std::move(slope)](Tape& tape, std::size_t self) {
        const double g = (*tape.grad(self))[0];
        Tensor& gi = tape.grad_buffer(in);
        for (std::size_t t = 0; t < slope.size(); ++t) gi[t] += g * slope[t];
      });
}

namespace {

struct PolicyGraph {
  std::vector<std::size_t> targets;
  std::vector<std::size_t> rows;
};

PolicyGraph response_rows(const model::PackedBatch& batch,
                          std::span<const Rollout* const> rollouts) {
  PolicyGraph g;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = *rollouts[i];
    const std::size_t base = batch.offsets[i] + r.prompt.size() - 1;
    for (std::size_t k = 0; k < r.response.size(); ++k) {
      g.rows.push_back(base + k);
      g.targets.push_back(r.response[k]);
    }
  }
  return g;
}

void check_settings(const model::ModelConfig& config, const ObjectiveSettings& s) {
  if (s.mode == PolicyMode::Internal && (s.layer < 1 || s.layer > config.num_layers)) {
    throw ConfigError("internal layer " + std::to_string(s.layer) + " out of range [1, " +
                      std::to_string(config.num_layers) + "]");
  }
  if (!(s.temperature > 0.0)) throw ConfigError("temperature must be positive");
}

model::PackedBatch pack(const model::ModelConfig& config, std::span<const Rollout* const> rollouts) {
  model::PackedBatch batch;
  std::vector<TokenId> seq;
  for (const Rollout* r : rollouts) {
    if (r->prompt.empty()) throw InputError("rollout with an empty prompt");
    seq = r->prompt;
    seq.insert(seq.end(), r->response.begin(), r->response.end());
    model::validate_tokens(config, seq);
    batch.append(seq);
  }
  return batch;
}

// Log-probs of the response tokens as a [tokens] Var.
Var token_logprobs(Tape& tape, const model::ParameterVars& vars,
                   const model::ModelConfig& config, const model::PackedBatch& batch,
                   const PolicyGraph& pg, const ObjectiveSettings& s) {
  const std::size_t depth = s.mode == PolicyMode::Final ? config.num_layers : s.layer;
  const model::ForwardGraph graph = model::build_forward(tape, vars, config, batch, depth);
  Var logits = s.mode == PolicyMode::Final
                   ? model::final_logits(graph, vars, config, pg.rows)
                   : model::layer_logits(graph, vars, config, s.layer, pg.rows, s.apply_norm);
  if (s.temperature != 1.0) logits = numeric::scale(logits, 1.0 / s.temperature);
  return numeric::gather_rows(numeric::log_softmax_rows(logits), pg.targets);
}

}  // namespace

std::vector<std::vector<double>> response_logprobs(const model::ModelParameters& params,
                                                   const model::ModelConfig& config,
                                                   std::span<const Rollout* const> rollouts,
                                                   const ObjectiveSettings& settings) {
  check_settings(config, settings);
  std::vector<std::vector<double>> out(rollouts.size());
  const model::PackedBatch batch = pack(config, rollouts);
  const PolicyGraph pg = response_rows(batch, rollouts);
  if (pg.rows.empty()) return out;
  Tape tape(false);
  const model::ParameterVars vars =
      model::bind_parameters(tape, params, [](const model::ParamInfo&) { return false; });
  const Tensor lp = token_logprobs(tape, vars, config, batch, pg, settings).value();
  std::size_t t = 0;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    for (std::size_t k = 0; k < rollouts[i]->response.size(); ++k) out[i].push_back(lp[t++]);
  }
  return out;
}

ObjectiveResult evaluate_surrogate(const model::ModelParameters& params,
                                   const model::ModelConfig& config,
                                   std::span<const Rollout* const> rollouts,
                                   std::span<const double> advantages,
                                   const ObjectiveSettings& settings, bool with_gradients) {
  check_settings(config, settings);
  if (rollouts.empty()) throw InputError("surrogate over no rollouts");
  if (advantages.size() != rollouts.size()) {
    throw InputError("one advantage per rollout required");
  }
  const bool internal = settings.mode == PolicyMode::Internal;
  for (const Rollout* r : rollouts) r->check();

  auto trainable = [&](const model::ParamInfo& info) {
    return with_gradients && (!internal || model::reachable_from_layer(info, settings.layer));
  };
  Tape tape(with_gradients);
  const model::ParameterVars vars = model::bind_parameters(tape, params, trainable);
  const model::PackedBatch batch = pack(config, rollouts);
  const PolicyGraph pg = response_rows(batch, rollouts);

  std::vector<double> old, adv, weights;
  const double per_rollout = 1.0 / static_cast<double>(rollouts.size());
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = *rollouts[i];
    const auto& src = internal ? r.old_internal_logprobs : r.old_logprobs;
    old.insert(old.end(), src.begin(), src.end());
    adv.insert(adv.end(), r.response.size(), advantages[i]);
    weights.insert(weights.end(), r.response.size(),
                   per_rollout / static_cast<double>(std::max<std::size_t>(1, r.response.size())));
  }

  ObjectiveResult result;
  std::vector<model::ConstParamRef> refs = params.refs();
  result.gradients.resize(refs.size());
  if (pg.rows.empty()) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (trainable(refs[i].info)) result.gradients[i] = Tensor(refs[i].tensor->shape());
    }
    return result;
  }
  const Var lp = token_logprobs(tape, vars, config, batch, pg, settings);
  const Var objective = clipped_surrogate(lp, old, adv, weights, settings.clip_eps);
  result.objective = objective.value()[0];
  if (!with_gradients) return result;

  tape.backward(numeric::scale(objective, -1.0));
  const std::vector<Var> ordered = vars.in_ref_order();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!trainable(refs[i].info)) continue;
    const Tensor* g = ordered[i].grad();
    result.gradients[i] = g ? *g : Tensor(refs[i].tensor->shape());
  }
  return result;
}

}  // namespace bupo::rl
