#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bupo/model/generate.hpp"
#include "bupo/tasks/task.hpp"

namespace bupo::eval {

// 1 - C(n-c, K) / C(n, K). Exact integer combinatorics up to n = 64,
// log-gamma above. InputError unless 1 <= K <= n and c <= n.
double pass_at_k(std::uint64_t n, std::uint64_t c, std::uint64_t k);
double pass_at_k_lgamma(std::uint64_t n, std::uint64_t c, std::uint64_t k);

struct ProblemOutcome {
  std::vector<bool> correct;  // in sampling order

  std::size_t n() const { return correct.size(); }
  std::size_t c() const;
};

// Mean over problems of the accuracy of the first K responses.
double avg_at_k(std::span<const ProblemOutcome> outcomes, std::size_t k);
// Mean over problems of pass_at_k(n_i, c_i, K).
double mean_pass_at_k(std::span<const ProblemOutcome> outcomes, std::size_t k);

// exp(mean negative log-likelihood) of the gold tokens.
double perplexity_from_logprobs(std::span<const double> gold_logprobs);
// Perplexity of the final policy (temperature 1) on each instance's
// canonical response.
double perplexity(const model::ModelParameters& params, const model::ModelConfig& config,
                  std::span<const tasks::ProblemInstance> instances);

struct EvalSettings {
  std::size_t samples = 8;  // n per problem
  std::vector<std::size_t> ks = {1};
  model::SamplingSettings sampling;
  std::uint64_t seed = 0;
};

struct MetricPoint {
  std::size_t k = 0;
  double avg = 0.0;
  double pass = 0.0;
};

struct EvalReport {
  std::vector<std::uint64_t> instance_seeds;
  std::vector<ProblemOutcome> outcomes;
  std::vector<MetricPoint> metrics;
  std::string config_text;  // resolved configuration echo
  std::uint64_t seed = 0;
};

// InputError when a K exceeds `samples`, checked before any generation.
EvalReport evaluate(const model::ModelParameters& params, const model::ModelConfig& config,
                    std::span<const tasks::ProblemInstance> instances,
                    const EvalSettings& settings);

// Recomputes every aggregate from the per-problem outcomes.
std::vector<MetricPoint> aggregate(std::span<const ProblemOutcome> outcomes,
                                   std::span<const std::size_t> ks);

std::string report_json(const EvalReport& report);
EvalReport parse_report_json(const std::string& text);

}  // namespace bupo::eval
