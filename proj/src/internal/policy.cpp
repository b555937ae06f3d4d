#include "bupo/internal/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bupo/errors.hpp"
#include "bupo/numeric/kernels.hpp"

namespace bupo::internal {

namespace k = numeric::kernels;
using model::ResidualTrace;

std::string site_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::Final: return "FINAL";
    case SiteKind::Layer: return "LAYER";
    case SiteKind::LayerIn: return "LAYER_IN";
    case SiteKind::AttnIn: return "ATTN_IN";
    case SiteKind::AttnOut: return "ATTN_OUT";
    case SiteKind::FfnIn: return "FFN_IN";
    case SiteKind::FfnOut: return "FFN_OUT";
  }
  return "?";
}

SiteKind parse_site(const std::string& name) {
  for (SiteKind s : {SiteKind::Final, SiteKind::Layer, SiteKind::LayerIn, SiteKind::AttnIn,
                     SiteKind::AttnOut, SiteKind::FfnIn, SiteKind::FfnOut}) {
    if (site_name(s) == name) return s;
  }
  throw InputError("unknown policy site '" + name + "'");
}

std::string module_name(Module m) {
  switch (m) {
    case Module::Attn: return "ATTN";
    case Module::Ffn: return "FFN";
    case Module::Layer: return "LAYER";
  }
  return "?";
}

namespace {

void check_layer(const ResidualTrace& trace, std::size_t l) {
  if (l < 1 || l > trace.num_layers()) {
    throw InputError("layer " + std::to_string(l) + " out of range [1, " +
                     std::to_string(trace.num_layers()) + "]");
  }
}

const Tensor& site_state(const ResidualTrace& trace, PolicySite site) {
  if (site.kind == SiteKind::Final) return trace.hidden(trace.num_layers());
  check_layer(trace, site.layer);
  const model::LayerTrace& lt = trace.layers[site.layer - 1];
  switch (site.kind) {
    case SiteKind::Layer: return lt.output;
    case SiteKind::LayerIn: return lt.input;
    case SiteKind::AttnIn: return lt.attn_input;
    case SiteKind::AttnOut: return lt.attn_out;
    case SiteKind::FfnIn: return lt.ffn_input;
    case SiteKind::FfnOut: return lt.ffn_out;
    case SiteKind::Final: break;
  }
  return lt.output;
}

std::vector<std::size_t> all_rows(const ResidualTrace& trace, std::span<const std::size_t> rows) {
  if (!rows.empty()) return {rows.begin(), rows.end()};
  std::vector<std::size_t> out(trace.num_positions());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

double mean_entropy(const Tensor& logits, std::span<const std::size_t> rows) {
  numeric::CompensatedSum sum;
  for (std::size_t r : rows) sum.add(entropy_of_logits(logits.row(r)));
  return sum.value() / static_cast<double>(rows.size());
}

}  // namespace

Tensor internal_logits(const ResidualTrace& trace, const Tensor& unembedding,
                       const Tensor& final_norm_gain, PolicySite site,
                       const ReadoutSettings& settings) {
  const Tensor& state = site_state(trace, site);
  const std::size_t d = state.cols();
  if (unembedding.rank() != 2 || unembedding.cols() != d) {
    throw DimensionError("unembedding " + numeric::shape_string(unembedding.shape()) +
                         " does not match state width " + std::to_string(d));
  }
  const bool norm = site.kind == SiteKind::Final || settings.apply_norm;
  const Tensor input = norm ? k::rms_norm(state, final_norm_gain, settings.norm_eps) : state;
  Tensor logits({state.rows(), unembedding.rows()});
  k::gemm_nt_acc(input.data(), unembedding.data(), logits.data(), state.rows(), d,
                 unembedding.rows());
  return logits;
}

Tensor internal_distribution(const ResidualTrace& trace, const Tensor& unembedding,
                             const Tensor& final_norm_gain, PolicySite site,
                             const ReadoutSettings& settings) {
  Tensor probs = internal_logits(trace, unembedding, final_norm_gain, site, settings);
  for (std::size_t r = 0; r < probs.rows(); ++r) k::softmax_row(probs.row(r), probs.row(r));
  return probs;
}

std::vector<double> policy_entropy(const Tensor& probabilities) {
  std::vector<double> out(probabilities.rows());
  for (std::size_t r = 0; r < probabilities.rows(); ++r) {
    numeric::CompensatedSum total, h;
    for (double p : probabilities.row(r)) {
      if (!(p >= 0.0)) throw InputError("probability row " + std::to_string(r) + " has a negative entry");
      total.add(p);
      if (p > 0.0) h.add(-p * std::log(p));
    }
    if (std::abs(total.value() - 1.0) > 1e-4) {
      throw InputError("probability row " + std::to_string(r) + " sums to " +
                       std::to_string(total.value()));
    }
    out[r] = std::max(0.0, h.value());
  }
  return out;
}

double entropy_of_logits(std::span<const double> logits) {
  std::vector<double> logp(logits.size());
  k::log_softmax_row(logits, logp);
  double h = 0.0;
  for (double lp : logp) h -= std::exp(lp) * lp;
  return std::max(0.0, h);
}

std::vector<double> entropy_from_logits(const Tensor& logits) {
  std::vector<double> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = entropy_of_logits(logits.row(r));
  return out;
}

double entropy_change(const ResidualTrace& trace, const Tensor& unembedding,
                      const Tensor& final_norm_gain, Module module, std::size_t layer, std::span<const std::size_t> rows,
                      const ReadoutSettings& settings) {
  check_layer(trace, layer);
  PolicySite in, out;
  switch (module) {
    case Module::Attn:
      in = PolicySite::attn_input(layer);
      out = PolicySite::attn_output(layer);
      break;
    case Module::Ffn:
      in = PolicySite::ffn_input(layer);
      out = PolicySite::ffn_output(layer);
      break;
    case Module::Layer:
      in = PolicySite::layer_input(layer);
      out = PolicySite::layer_output(layer);
      break;
  }
  const auto selected = all_rows(trace, rows);
  return mean_entropy(internal_logits(trace, unembedding, final_norm_gain, out, settings), selected) -
         mean_entropy(internal_logits(trace, unembedding, final_norm_gain, in, settings), selected);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace {

void accumulate_cosines(const ResidualTrace& trace, std::size_t layer,
                        std::span<const std::size_t> rows, numeric::RunningMean& attn,
                        numeric::RunningMean& ffn) {
  const model::LayerTrace& lt = trace.layers[layer - 1];
  for (std::size_t r : rows) {
    const double ca = cosine(lt.attn_out.row(r), lt.input.row(r));
    if (!std::isnan(ca)) attn.add(ca);
    const double cf = cosine(lt.ffn_out.row(r), lt.mid.row(r));
    if (!std::isnan(cf)) ffn.add(cf);
  }
}

}  // namespace

CosinePair residual_cosine(const ResidualTrace& trace, std::size_t layer,
                           std::span<const std::size_t> rows) {
  check_layer(trace, layer);
  numeric::RunningMean attn, ffn;
  accumulate_cosines(trace, layer, all_rows(trace, rows), attn, ffn);
  if (attn.count() == 0 || ffn.count() == 0) {
    throw UndefinedValueError("residual cosine at layer " + std::to_string(layer) +
                              " is undefined: every write-back or stream vector is zero");
  }
  return {attn.mean(), ffn.mean()};
}

const numeric::RunningMean& EntropyProfile::at(PolicySite site) const {
  if (site.kind == SiteKind::Final) return final_site;
  if (site.layer < 1 || site.layer > layers.size()) {
    throw InputError("layer " + std::to_string(site.layer) + " out of range");
  }
  for (std::size_t i = 0; i < kLayerSites.size(); ++i) {
    if (kLayerSites[i] == site.kind) return layers[site.layer - 1][i];
  }
  throw InputError("site not profiled");
}

void EntropyProfile::merge(const EntropyProfile& other) {
  if (layers.empty() && final_site.count() == 0) {
    *this = other;
    return;
  }
  if (other.layers.size() != layers.size()) throw DimensionError("profile depth mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t s = 0; s < kLayerSites.size(); ++s) layers[l][s].merge(other.layers[l][s]);
  }
  final_site.merge(other.final_site);
}

double ResidualSimilarityProfile::cos_attn(std::size_t l) const {
  const auto& m = attn.at(l - 1);
  return m.count() ? m.mean() : std::numeric_limits<double>::quiet_NaN();
}

double ResidualSimilarityProfile::cos_ffn(std::size_t l) const {
  const auto& m = ffn.at(l - 1);
  return m.count() ? m.mean() : std::numeric_limits<double>::quiet_NaN();
}

void ResidualSimilarityProfile::merge(const ResidualSimilarityProfile& other) {
  if (attn.empty()) {
    *this = other;
    return;
  }
  if (other.attn.size() != attn.size()) throw DimensionError("profile depth mismatch");
  for (std::size_t l = 0; l < attn.size(); ++l) {
    attn[l].merge(other.attn[l]);
    ffn[l].merge(other.ffn[l]);
  }
}

EntropyChangeProfile CorpusProfile::entropy_change() const {
  EntropyChangeProfile out(entropy.num_layers());
  for (std::size_t l = 1; l <= out.size(); ++l) {
    out[l - 1].layer = entropy.mean(PolicySite::layer_output(l)) -
                       entropy.mean(PolicySite::layer_input(l));
    out[l - 1].attn = entropy.mean(PolicySite::attn_output(l)) -
                      entropy.mean(PolicySite::attn_input(l));
    out[l - 1].ffn = entropy.mean(PolicySite::ffn_output(l)) -
                     entropy.mean(PolicySite::ffn_input(l));
  }
  return out;
}

void CorpusProfile::merge(const CorpusProfile& other) {
  entropy.merge(other.entropy);
  similarity.merge(other.similarity);
}

void accumulate_trace(CorpusProfile& profile, const ResidualTrace& trace,
                      const model::ModelParameters& params, std::span<const std::size_t> rows,
                      const ReadoutSettings& settings) {
  const std::size_t L = trace.num_layers();
  const Tensor& eu = params.output_embedding();
  EntropyProfile& ep = profile.entropy;
  if (ep.layers.empty()) {
    ep.layers.resize(L);
    ep.vocab_size = eu.rows();
    profile.similarity.attn.resize(L);
    profile.similarity.ffn.resize(L);
  } else if (ep.layers.size() != L) {
    throw DimensionError("trace depth does not match the profile");
  }
  if (rows.empty()) return;
  for (std::size_t l = 1; l <= L; ++l) {
    for (std::size_t s = 0; s < kLayerSites.size(); ++s) {
      const Tensor logits =
          internal_logits(trace, eu, params.final_norm, {kLayerSites[s], l}, settings);
      for (std::size_t r : rows) ep.layers[l - 1][s].add(entropy_of_logits(logits.row(r)));
    }
    accumulate_cosines(trace, l, rows, profile.similarity.attn[l - 1],
                       profile.similarity.ffn[l - 1]);
  }
  const Tensor logits =
      internal_logits(trace, eu, params.final_norm, PolicySite::final_policy(), settings);
  for (std::size_t r : rows) ep.final_site.add(entropy_of_logits(logits.row(r)));
}

CorpusProfile profile_corpus(const model::ModelParameters& params,
                             const model::ModelConfig& config,
                             std::span<const std::vector<model::TokenId>> prompts,
                             const model::SamplingSettings& sampling, std::uint64_t seed) {
  if (prompts.empty()) throw InputError("profile_corpus needs at least one prompt");
  std::vector<model::GenerationRequest> requests;
  requests.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) requests.push_back({prompts[i], seed + i});
  const auto generations = model::generate_batch(params, config, requests, sampling);

  ReadoutSettings readout;
  readout.norm_eps = config.norm_eps;
  readout.apply_norm = sampling.internal_apply_norm;
  CorpusProfile profile;
  for (const model::Generation& g : generations) {
    const model::ForwardOutput out = model::forward(params, config, g.tokens, true);
    // Row t predicts token t+1, so generated tokens come from rows
    // prompt_length-1 .. size-2.
    std::vector<std::size_t> rows;
    for (std::size_t t = g.prompt_length - 1; t + 1 < g.tokens.size(); ++t) rows.push_back(t);
    accumulate_trace(profile, *out.trace, params, rows, readout);
  }
  return profile;
}

Boundary region_boundary(const EntropyChangeProfile& profile, double band) {
  for (std::size_t l = profile.size(); l >= 1; --l) {
    if (profile[l - 1].ffn > band) return {l, true};
  }
  return {0, false};
}

}  // namespace bupo::internal
