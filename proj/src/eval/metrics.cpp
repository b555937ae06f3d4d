#include "bupo/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>

#include "bupo/errors.hpp"
#include "bupo/model/forward.hpp"
#include "bupo/numeric/summation.hpp"

namespace bupo::eval {

namespace {

using u128 = unsigned __int128;

u128 binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  u128 r = 1;
  // Each partial product r * (n - k + i) / i is itself a binomial coefficient.
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

u128 gcd128(u128 a, u128 b) {
  while (b != 0) {
    const u128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

double log_binomial(std::uint64_t n, std::uint64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

void check_args(std::uint64_t n, std::uint64_t c, std::uint64_t k) {
  if (k < 1 || k > n) {
    throw InputError("pass@k needs 1 <= K <= n, got K=" + std::to_string(k) + " n=" +
                     std::to_string(n));
  }
  if (c > n) {
    throw InputError("pass@k needs c <= n, got c=" + std::to_string(c) + " n=" + std::to_string(n));
  }
}

}  // namespace

double pass_at_k(std::uint64_t n, std::uint64_t c, std::uint64_t k) {
  check_args(n, c, k);
  if (n > 64) return pass_at_k_lgamma(n, c, k);
  const u128 total = binomial(n, k);
  u128 hits = total - binomial(n - c, k);
  u128 den = total;
  const u128 g = gcd128(hits, den);
  if (g > 1) {
    hits /= g;
    den /= g;
  }
  // A single double division is correctly rounded whenever both operands are
  // exact doubles; beyond 2^53 fall back to long double.
  if (den < (u128{1} << 53)) {
    return static_cast<double>(static_cast<std::uint64_t>(hits)) /
           static_cast<double>(static_cast<std::uint64_t>(den));
  }
  return static_cast<double>(static_cast<long double>(static_cast<std::uint64_t>(hits)) /
                             static_cast<long double>(static_cast<std::uint64_t>(den)));
}

double pass_at_k_lgamma(std::uint64_t n, std::uint64_t c, std::uint64_t k) {
  check_args(n, c, k);
  if (n - c < k) return 1.0;
  return -std::expm1(log_binomial(n - c, k) - log_binomial(n, k));
}

std::size_t ProblemOutcome::c() const {
  return static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
}

double avg_at_k(std::span<const ProblemOutcome> outcomes, std::size_t k) {
  if (outcomes.empty()) throw InputError("avg@k over no problems");
  if (k == 0) throw InputError("avg@k needs K >= 1");
  numeric::CompensatedSum sum;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.n() < k) {
      throw InputError("problem " + std::to_string(i) + " has " + std::to_string(o.n()) +
                       " responses, avg@" + std::to_string(k) + " needs " + std::to_string(k));
    }
    const auto first = std::count(o.correct.begin(), o.correct.begin() + static_cast<long>(k), true);
    sum.add(static_cast<double>(first) / static_cast<double>(k));
  }
  return sum.value() / static_cast<double>(outcomes.size());
}

double mean_pass_at_k(std::span<const ProblemOutcome> outcomes, std::size_t k) {
  if (outcomes.empty()) throw InputError("pass@k over no problems");
  numeric::CompensatedSum sum;
  for (const auto& o : outcomes) sum.add(pass_at_k(o.n(), o.c(), k));
  return sum.value() / static_cast<double>(outcomes.size());
}

double perplexity_from_logprobs(std::span<const double> gold_logprobs) {
  if (gold_logprobs.empty()) throw InputError("perplexity needs at least one gold token");
  numeric::CompensatedSum nll;
  for (double lp : gold_logprobs) nll.add(-lp);
  return std::exp(nll.value() / static_cast<double>(gold_logprobs.size()));
}

double perplexity(const model::ModelParameters& params, const model::ModelConfig& config,
                  std::span<const tasks::ProblemInstance> instances) {
  if (instances.empty()) throw InputError("perplexity needs at least one instance");
  numeric::Tape tape(false);
  const model::ParameterVars vars =
      model::bind_parameters(tape, params, [](const model::ParamInfo&) { return false; });
  model::PackedBatch batch;
  std::vector<std::size_t> rows, targets;
  for (const auto& inst : instances) {
    std::vector<model::TokenId> seq = inst.prompt;
    const auto gold = inst.canonical_response();
    if (inst.prompt.empty() || inst.answer.empty()) {
      throw InputError("perplexity instance without prompt or gold answer");
    }
    seq.insert(seq.end(), gold.begin(), gold.end());
    model::validate_tokens(config, seq);
    const std::size_t base = batch.num_rows() + inst.prompt.size() - 1;
    for (std::size_t k = 0; k < gold.size(); ++k) {
      rows.push_back(base + k);
      targets.push_back(gold[k]);
    }
    batch.append(seq);
  }
  const model::ForwardGraph graph =
      model::build_forward(tape, vars, config, batch, config.num_layers);
  const numeric::Var lp = numeric::gather_rows(
      numeric::log_softmax_rows(model::final_logits(graph, vars, config, rows)), targets);
  return perplexity_from_logprobs(lp.value().values());
}

std::vector<MetricPoint> aggregate(std::span<const ProblemOutcome> outcomes,
                                   std::span<const std::size_t> ks) {
  std::vector<MetricPoint> out;
  for (std::size_t k : ks) out.push_back({k, avg_at_k(outcomes, k), mean_pass_at_k(outcomes, k)});
  return out;
}

EvalReport evaluate(const model::ModelParameters& params, const model::ModelConfig& config,
                    std::span<const tasks::ProblemInstance> instances,
                    const EvalSettings& settings) {
  if (instances.empty()) throw InputError("evaluation needs at least one problem");
  if (settings.ks.empty()) throw InputError("evaluation needs at least one K");
  for (std::size_t k : settings.ks) {
    if (k < 1 || k > settings.samples) {
      throw InputError("K=" + std::to_string(k) + " is outside [1, n=" +
                       std::to_string(settings.samples) + "]");
    }
  }
  std::vector<model::GenerationRequest> requests;
  std::uint64_t next = settings.seed;
  for (const auto& inst : instances) {
    for (std::size_t j = 0; j < settings.samples; ++j) requests.push_back({inst.prompt, next++});
  }
  const auto gens = model::generate_batch(params, config, requests, settings.sampling);
  EvalReport report;
  report.seed = settings.seed;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    report.instance_seeds.push_back(instances[i].seed);
    ProblemOutcome o;
    for (std::size_t j = 0; j < settings.samples; ++j) {
      const auto& g = gens[i * settings.samples + j];
      const auto response = g.response();
      o.correct.push_back(tasks::verify(instances[i], response));
    }
    report.outcomes.push_back(std::move(o));
  }
  report.metrics = aggregate(report.outcomes, settings.ks);
  return report;
}

std::string report_json(const EvalReport& report) {
  using json = nlohmann::ordered_json;
  json problems = json::array();
  for (std::size_t i = 0; i < report.outcomes.size(); ++i) {
    const auto& o = report.outcomes[i];
    std::string bits;
    for (bool b : o.correct) bits += b ? '1' : '0';
    problems.push_back({{"instance_seed", report.instance_seeds.at(i)},
                        {"n", o.n()},
                        {"c", o.c()},
                        {"correct", bits}});
  }
  json metrics = json::array();
  for (const auto& m : report.metrics) {
    metrics.push_back({{"k", m.k}, {"avg_at_k", m.avg}, {"pass_at_k", m.pass}});
  }
  json doc = {{"format", "bupo-eval"},
              {"version", 1},
              {"seed", report.seed},
              {"config", report.config_text},
              {"metrics", metrics},
              {"problems", problems}};
  return doc.dump(2) + "\n";
}

EvalReport parse_report_json(const std::string& text) {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.value("format", "") != "bupo-eval") throw CorruptDataError("not an evaluation report");
    EvalReport r;
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.config_text = doc.at("config").get<std::string>();
    for (const auto& m : doc.at("metrics")) {
      r.metrics.push_back({m.at("k").get<std::size_t>(), m.at("avg_at_k").get<double>(),
                           m.at("pass_at_k").get<double>()});
    }
    for (const auto& p : doc.at("problems")) {
      r.instance_seeds.push_back(p.at("instance_seed").get<std::uint64_t>());
      ProblemOutcome o;
      for (char ch : p.at("correct").get<std::string>()) o.correct.push_back(ch == '1');
      if (o.n() != p.at("n").get<std::size_t>() || o.c() != p.at("c").get<std::size_t>()) {
        throw CorruptDataError("problem counts disagree with its outcomes");
      }
      r.outcomes.push_back(std::move(o));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError(std::string("evaluation report: ") + e.what());
  }
}

}  // namespace bupo::eval
