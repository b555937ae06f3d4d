#include "bupo/model/forward.hpp"

#include <numeric>

#include "bupo/errors.hpp"

namespace bupo::model {

using namespace bupo::numeric;

Tensor ResidualTrace::downstream(std::size_t l) const {
  Tensor out = hidden(num_layers());
  const Tensor& below = hidden(l);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= below[i];
  return out;
}

void validate_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > config.max_seq_len) {
    throw InputError("sequence of length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (TokenId id : tokens) {
    if (id >= config.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
}

void PackedBatch::append(std::span<const TokenId> sequence) {
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    tokens.push_back(sequence[t]);
    positions.push_back(t);
  }
  offsets.push_back(tokens.size());
}

std::vector<Var> ParameterVars::in_ref_order() const {
  std::vector<Var> out{embedding};
  for (const auto& l : layers) {
    out.insert(out.end(),
               {l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down});
  }
  out.push_back(final_norm);
  if (unembedding.id() != embedding.id()) out.push_back(unembedding);
  return out;
}

ParameterVars bind_parameters(Tape& tape, const ModelParameters& params,
                              const std::function<bool(const ParamInfo&)>& trainable) {
  std::vector<Var> bound;
  for (const auto& ref : params.refs()) {
    const bool grad = trainable ? trainable(ref.info) : true;
    bound.push_back(tape.borrow(*ref.tensor, grad));
  }
  ParameterVars vars;
  std::size_t i = 0;
  vars.embedding = bound[i++];
  vars.layers.resize(params.layers.size());
  for (auto& l : vars.layers) {
    l.attn_norm = bound[i++];
    l.wq = bound[i++];
    l.wk = bound[i++];
    l.wv = bound[i++];
    l.wo = bound[i++];
    l.ffn_norm = bound[i++];
    l.w_gate = bound[i++];
    l.w_up = bound[i++];
    l.w_down = bound[i++];
  }
  vars.final_norm = bound[i++];
  vars.unembedding = params.tied() ? vars.embedding : bound[i++];
  return vars;
}

ForwardGraph build_forward(Tape& tape, const ParameterVars& vars, const ModelConfig& config,
                           const PackedBatch& batch, std::size_t num_layers) {
  (void)tape;
  if (num_layers > vars.layers.size()) {
    throw InputError("requested " + std::to_string(num_layers) + " layers of " +
                     std::to_string(vars.layers.size()));
  }
  ForwardGraph graph;
  graph.h0 = take_rows(vars.embedding, batch.tokens);
  Var h = graph.h0;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto& p = vars.layers[l];
    LayerVars lv;
    lv.input = h;
    lv.attn_input = rms_norm(h, p.attn_norm, config.norm_eps);
    Var q = rope(matmul(lv.attn_input, p.wq), batch.positions, config.num_heads, config.rope_base);
    Var k = rope(matmul(lv.attn_input, p.wk), batch.positions, config.num_heads, config.rope_base);
    Var v = matmul(lv.attn_input, p.wv);
    lv.attn_out = matmul(causal_attention(q, k, v, batch.offsets, config.num_heads), p.wo);
    lv.mid = add(h, lv.attn_out);
    lv.ffn_input = rms_norm(lv.mid, p.ffn_norm, config.norm_eps);
    Var gate = silu(matmul(lv.ffn_input, p.w_gate));
    Var up = matmul(lv.ffn_input, p.w_up);
    lv.ffn_out = matmul(mul(gate, up), p.w_down);
    lv.output = add(lv.mid, lv.ffn_out);
    h = lv.output;
    graph.layers.push_back(lv);
  }
  return graph;
}

Var final_logits(const ForwardGraph& graph, const ParameterVars& vars,
                 const ModelConfig& config, std::span<const std::size_t> rows) {
  if (graph.layers.size() != vars.layers.size()) {
    throw UsageError("final_logits needs a forward graph through every layer");
  }
  Var h = take_rows(graph.hidden(graph.layers.size()), rows);
  return matmul(rms_norm(h, vars.final_norm, config.norm_eps), transpose(vars.unembedding));
}

Var layer_logits(const ForwardGraph& graph, const ParameterVars& vars,
                 const ModelConfig& config, std::size_t layer,
                 std::span<const std::size_t> rows, bool apply_norm) {
  Var h = take_rows(graph.hidden(layer), rows);
  if (apply_norm) h = rms_norm(h, vars.final_norm, config.norm_eps);
  return matmul(h, transpose(vars.unembedding));
}

ForwardOutput forward(const ModelParameters& params, const ModelConfig& config,
                      std::span<const TokenId> tokens, bool capture) {
  validate_tokens(config, tokens);
  Tape tape(false);
  const ParameterVars vars = bind_parameters(tape, params, [](const ParamInfo&) { return false; });
  PackedBatch batch;
  batch.append(tokens);
  const ForwardGraph graph = build_forward(tape, vars, config, batch, config.num_layers);
  std::vector<std::size_t> rows(tokens.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});

  ForwardOutput out;
  out.logits = final_logits(graph, vars, config, rows).value();
  if (capture) {
    ResidualTrace trace;
    trace.h0 = graph.h0.value();
    for (const LayerVars& lv : graph.layers) {
      trace.layers.push_back({lv.input.value(), lv.attn_input.value(), lv.attn_out.value(),
                              lv.mid.value(), lv.ffn_input.value(), lv.ffn_out.value(),
                              lv.output.value()});
    }
    out.trace = std::move(trace);
  }
  return out;
}

}  // namespace bupo::model
