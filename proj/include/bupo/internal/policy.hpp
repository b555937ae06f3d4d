#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bupo/model/forward.hpp"
#include "bupo/model/generate.hpp"
#include "bupo/numeric/summation.hpp"

namespace bupo::internal {

using numeric::Tensor;

enum class SiteKind { Final, Layer, LayerIn, AttnIn, AttnOut, FfnIn, FfnOut };

// Where an internal policy reads the residual stream. `layer` is 1-based and
// ignored for Final.
struct PolicySite {
  SiteKind kind = SiteKind::Final;
  std::size_t layer = 0;

  static PolicySite final_policy() { return {SiteKind::Final, 0}; }
  static PolicySite layer_output(std::size_t l) { return {SiteKind::Layer, l}; }
  static PolicySite layer_input(std::size_t l) { return {SiteKind::LayerIn, l}; }
  static PolicySite attn_input(std::size_t l) { return {SiteKind::AttnIn, l}; }
  static PolicySite attn_output(std::size_t l) { return {SiteKind::AttnOut, l}; }
  static PolicySite ffn_input(std::size_t l) { return {SiteKind::FfnIn, l}; }
  static PolicySite ffn_output(std::size_t l) { return {SiteKind::FfnOut, l}; }

  friend bool operator==(const PolicySite&, const PolicySite&) = default;
};

// CSV names: LAYER_IN, ATTN_IN, ATTN_OUT, FFN_IN, FFN_OUT, LAYER, FINAL.
std::string site_name(SiteKind kind);
SiteKind parse_site(const std::string& name);

struct ReadoutSettings {
  double norm_eps = 1e-6;
  // Internal sites skip the final norm by default; Final always applies it.
  bool apply_norm = false;
};

// Logits state . E_u^T for every row of the trace at `site`.
Tensor internal_logits(const model::ResidualTrace& trace, const Tensor& unembedding,
                       const Tensor& final_norm_gain, PolicySite site,
                       const ReadoutSettings& settings = {});
// Softmax of internal_logits.
Tensor internal_distribution(const model::ResidualTrace& trace, const Tensor& unembedding,
                             const Tensor& final_norm_gain, PolicySite site,
                             const ReadoutSettings& settings = {});

// Entropy (nats) per row of a probability matrix. Rows must sum to 1 within
// 1e-4 and be non-negative, else InputError.
std::vector<double> policy_entropy(const Tensor& probabilities);
double entropy_of_logits(std::span<const double> logits);
std::vector<double> entropy_from_logits(const Tensor& logits);

enum class Module { Attn, Ffn, Layer };
std::string module_name(Module m);

// Mean entropy of the output state minus mean entropy of the input state over
// `rows` (all rows when empty).
double entropy_change(const model::ResidualTrace& trace, const Tensor& unembedding,
                      const Tensor& final_norm_gain, Module module, std::size_t layer, std::span<const std::size_t> rows = {},
                      const ReadoutSettings& settings = {});

struct CosinePair {
  double attn = 0.0;
  double ffn = 0.0;
};
double cosine(std::span<const double> a, std::span<const double> b);
// Mean over rows of cos(A^l, H^{l-1}) and cos(F^l, H^{l-1} + A^l). Rows with a
// zero-norm vector are skipped; UndefinedValueError when nothing remains.
CosinePair residual_cosine(const model::ResidualTrace& trace, std::size_t layer,
                           std::span<const std::size_t> rows = {});

// Sites profiled per layer, in CSV order.
inline constexpr std::array<SiteKind, 6> kLayerSites = {
    SiteKind::LayerIn, SiteKind::AttnIn, SiteKind::AttnOut,
    SiteKind::FfnIn,   SiteKind::FfnOut, SiteKind::Layer};

struct EntropyProfile {
  std::size_t vocab_size = 0;
  std::vector<std::array<numeric::RunningMean, kLayerSites.size()>> layers;
  numeric::RunningMean final_site;

  std::size_t num_layers() const { return layers.size(); }
  const numeric::RunningMean& at(PolicySite site) const;
  double mean(PolicySite site) const { return at(site).mean(); }
  std::size_t token_count() const { return final_site.count(); }
  void merge(const EntropyProfile& other);
};

struct EntropyChange {
  double layer = 0.0;
  double attn = 0.0;
  double ffn = 0.0;
};
using EntropyChangeProfile = std::vector<EntropyChange>;  // index l-1

struct ResidualSimilarityProfile {
  std::vector<numeric::RunningMean> attn, ffn;  // index l-1
  // NaN where no position had nonzero vectors.
  double cos_attn(std::size_t l) const;
  double cos_ffn(std::size_t l) const;
  void merge(const ResidualSimilarityProfile& other);
};

struct CorpusProfile {
  EntropyProfile entropy;
  ResidualSimilarityProfile similarity;

  EntropyChangeProfile entropy_change() const;
  void merge(const CorpusProfile& other);
};

// Accumulates analytics of one captured trace over the given rows.
void accumulate_trace(CorpusProfile& profile, const model::ResidualTrace& trace,
                      const model::ModelParameters& params, std::span<const std::size_t> rows,
                      const ReadoutSettings& settings = {});

// Generates one continuation per prompt (seeded seed, seed+1, ...) and
// averages analytics over generated-token positions only.
CorpusProfile profile_corpus(const model::ModelParameters& params,
                             const model::ModelConfig& config,
                             std::span<const std::vector<model::TokenId>> prompts,
                             const model::SamplingSettings& sampling, std::uint64_t seed);

struct Boundary {
  std::size_t layer = 0;
  bool found = false;
};
// Deepest layer whose FFN entropy change exceeds `band` (0 = strictly positive).
Boundary region_boundary(const EntropyChangeProfile& profile, double band = 0.0);

}  // namespace bupo::internal
