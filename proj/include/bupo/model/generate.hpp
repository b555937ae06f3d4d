#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bupo/model/parameters.hpp"

namespace bupo::model {

struct SamplingSettings {
  std::size_t max_new_tokens = 8;
  double temperature = 1.0;
  TokenId eos_id = 0;
  // When nonzero, also score each sampled token under softmax(H^l E_u^T / temperature).
  std::size_t internal_layer = 0;
  bool internal_apply_norm = false;
};

struct Generation {
  std::vector<TokenId> tokens;  // prompt followed by the sampled tokens
  std::size_t prompt_length = 0;
  // Per sampled token, under the sampling-time parameters.
  std::vector<double> logprobs;
  std::vector<double> entropies;  // entropy of the sampling distribution
  std::vector<double> internal_logprobs;
  std::vector<double> internal_entropies;

  std::size_t response_length() const { return tokens.size() - prompt_length; }
  std::span<const TokenId> response() const {
    return std::span<const TokenId>(tokens).subspan(prompt_length);
  }
};

struct GenerationRequest {
  std::vector<TokenId> prompt;
  std::uint64_t seed = 0;
};

// Autoregressive sampling from softmax(logits / temperature). Stops after
// eos_id, after max_new_tokens, or when the sequence reaches max_seq_len.
Generation generate(const ModelParameters& params, const ModelConfig& config,
                    std::span<const TokenId> prompt, const SamplingSettings& settings,
                    std::uint64_t seed);

// Decodes many requests together with a key/value cache, in fixed-size chunks
// that RUN_THREADS worker threads share. Each request samples from its own
// seeded stream.
std::vector<Generation> generate_batch(const ModelParameters& params, const ModelConfig& config,
                                       std::span<const GenerationRequest> requests,
                                       const SamplingSettings& settings);

// Draws an index from `probs` using one uniform variate of `rng`.
std::size_t sample_index(std::span<const double> probs, std::uint64_t random_bits);

}  // namespace bupo::model
