#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bupo/model/config.hpp"
#include "bupo/numeric/tensor.hpp"

namespace bupo::model {

using numeric::Tensor;

struct LayerParameters {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d, d], applied as x * W
  Tensor ffn_norm;  // [d]
  Tensor w_gate, w_up;  // [d, d_ff]
  Tensor w_down;  // [d_ff, d]
};

enum class ParamGroup { kEmbedding, kLayer, kFinalNorm, kUnembedding };

struct ParamInfo {
  std::string name;
  ParamGroup group;
  std::size_t layer;  // 1-based for kLayer, 0 otherwise
};

template <typename T>
struct BasicParamRef {
  ParamInfo info;
  T* tensor;
};
using ParamRef = BasicParamRef<Tensor>;
using ConstParamRef = BasicParamRef<const Tensor>;

struct ModelParameters {
  Tensor embedding;  // E: [N, d]
  std::vector<LayerParameters> layers;
  Tensor final_norm;  // [d]
  Tensor unembedding;  // E_u: [N, d]; empty when tied to the embedding

  bool tied() const { return unembedding.empty(); }
  const Tensor& output_embedding() const { return tied() ? embedding : unembedding; }

  // Every stored tensor in a fixed order: embedding, layers bottom-up,
  // final norm, unembedding (omitted when tied).
  std::vector<ParamRef> refs();
  std::vector<ConstParamRef> refs() const;

  // Throws DimensionError if any tensor disagrees with the config.
  void check_shapes(const ModelConfig& config) const;

  friend bool operator==(const ModelParameters&, const ModelParameters&);
};

// Projections and embeddings ~ normal(0, init_std), gains = 1. Deterministic in seed.
ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed);

// Parameters that InterGRPO at layer l may update: the embedding, layers 1..l
// and the unembedding.
bool reachable_from_layer(const ParamInfo& info, std::size_t layer);

}  // namespace bupo::model
