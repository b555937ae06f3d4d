#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "bupo/model/parameters.hpp"
#include "bupo/numeric/ops.hpp"

namespace bupo::model {

using numeric::Tape;
using numeric::Var;

// Residual-stream states of one layer, one row per position.
struct LayerTrace {
  Tensor input;        // H^(2l-2)
  Tensor attn_input;   // X_attn = LN(H^(2l-2))
  Tensor attn_out;     // A^l
  Tensor mid;          // H^(2l-1) = input + attn_out
  Tensor ffn_input;    // X_ffn = LN(H^(2l-1))
  Tensor ffn_out;      // F^l
  Tensor output;       // H^(2l) = mid + ffn_out
};

struct ResidualTrace {
  Tensor h0;  // embedding rows
  std::vector<LayerTrace> layers;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_positions() const { return h0.rows(); }
  // H^l for l in [0, L]; H^0 is the embedding output.
  const Tensor& hidden(std::size_t l) const { return l == 0 ? h0 : layers.at(l - 1).output; }
  // S^{l+1} = H^L - H^l, the contribution of the layers above l.
  Tensor downstream(std::size_t l) const;
};

struct ForwardOutput {
  Tensor logits;  // [T, N]
  std::optional<ResidualTrace> trace;
};

// Full forward pass over one token sequence. Throws InputError for ids >= N,
// empty input or sequences longer than max_seq_len.
ForwardOutput forward(const ModelParameters& params, const ModelConfig& config,
                      std::span<const TokenId> tokens, bool capture);

void validate_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

// Several sequences packed row-wise for one tape pass.
struct PackedBatch {
  std::vector<std::size_t> tokens;     // token id per row
  std::vector<std::size_t> positions;  // position within its own sequence
  std::vector<std::size_t> offsets;    // sequence s spans rows [offsets[s], offsets[s+1])

  PackedBatch() : offsets{0} {}
  void append(std::span<const TokenId> sequence);
  std::size_t num_rows() const { return tokens.size(); }
  std::size_t num_sequences() const { return offsets.size() - 1; }
};

// Parameters placed on a tape. Tensors are borrowed, not copied.
struct ParameterVars {
  Var embedding;
  struct Layer {
    Var attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
  };
  std::vector<Layer> layers;
  Var final_norm;
  Var unembedding;  // same Var as embedding when tied

  // Var per entry of ModelParameters::refs(), in that order.
  std::vector<Var> in_ref_order() const;
};

// `trainable(info)` decides requires_grad per parameter; null means all.
ParameterVars bind_parameters(Tape& tape, const ModelParameters& params,
                              const std::function<bool(const ParamInfo&)>& trainable = {});

struct LayerVars {
  Var input, attn_input, attn_out, mid, ffn_input, ffn_out, output;
};

struct ForwardGraph {
  Var h0;
  std::vector<LayerVars> layers;
  Var hidden(std::size_t l) const { return l == 0 ? h0 : layers.at(l - 1).output; }
};

// Runs layers 1..num_layers over the packed rows (num_layers <= L).
ForwardGraph build_forward(Tape& tape, const ParameterVars& vars, const ModelConfig& config,
                           const PackedBatch& batch, std::size_t num_layers);

// Logits LN(H^L) E_u^T on the selected rows.
Var final_logits(const ForwardGraph& graph, const ParameterVars& vars,
                 const ModelConfig& config, std::span<const std::size_t> rows);
// Logits H^l E_u^T on the selected rows, optionally through the final norm.
Var layer_logits(const ForwardGraph& graph, const ParameterVars& vars,
                 const ModelConfig& config, std::size_t layer,
                 std::span<const std::size_t> rows, bool apply_norm);

}  // namespace bupo::model
