#pragma once

#include <cstddef>
#include <cstdint>

namespace bupo::model {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 128;
  std::size_t num_heads = 2;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 20;
  std::size_t max_seq_len = 32;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  bool tie_unembedding = false;
  double init_std = 0.02;

  std::size_t head_dim() const { return d_model / num_heads; }

  // Throws ConfigError when extents are zero, heads do not divide d_model,
  // or the head width is odd (rotary embedding rotates pairs).
  void validate() const;
};

}  // namespace bupo::model
