#include "bupo/model/parameters.hpp"

#include <random>

#include "bupo/errors.hpp"

namespace bupo::model {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(std::string("model.") + key + " must be positive");
  };
  positive(num_layers, "num_layers");
  positive(d_model, "d_model");
  positive(num_heads, "num_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % num_heads != 0) {
    throw ConfigError("model.num_heads must divide model.d_model");
  }
  if (head_dim() % 2 != 0) {
    throw ConfigError("model.d_model / model.num_heads must be even for rotary embedding");
  }
  if (!(rope_base > 0.0)) throw ConfigError("model.rope_base must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
}

namespace {

template <typename Params, typename Ref>
std::vector<Ref> collect(Params& p) {
  std::vector<Ref> out;
  out.push_back({{"embedding", ParamGroup::kEmbedding, 0}, &p.embedding});
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& layer = p.layers[i];
    const std::size_t l = i + 1;
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto add = [&](const char* name, auto& tensor) {
      out.push_back({{prefix + name, ParamGroup::kLayer, l}, &tensor});
    };
    add("attn_norm", layer.attn_norm);
    add("wq", layer.wq);
    add("wk", layer.wk);
    add("wv", layer.wv);
    add("wo", layer.wo);
    add("ffn_norm", layer.ffn_norm);
    add("w_gate", layer.w_gate);
    add("w_up", layer.w_up);
    add("w_down", layer.w_down);
  }
  out.push_back({{"final_norm", ParamGroup::kFinalNorm, 0}, &p.final_norm});
  if (!p.tied()) out.push_back({{"unembedding", ParamGroup::kUnembedding, 0}, &p.unembedding});
  return out;
}

}  // namespace

std::vector<ParamRef> ModelParameters::refs() {
  return collect<ModelParameters, ParamRef>(*this);
}

std::vector<ConstParamRef> ModelParameters::refs() const {
  return collect<const ModelParameters, ConstParamRef>(*this);
}

void ModelParameters::check_shapes(const ModelConfig& config) const {
  const std::size_t n = config.vocab_size, d = config.d_model, f = config.d_ff;
  auto expect = [](const Tensor& t, const numeric::Shape& shape, const std::string& name) {
    if (t.shape() != shape) {
      throw DimensionError("parameter " + name + " has shape " +
                           numeric::shape_string(t.shape()) + ", expected " +
                           numeric::shape_string(shape));
    }
  };
  if (layers.size() != config.num_layers) {
    throw DimensionError("parameters hold " + std::to_string(layers.size()) +
                         " layers, config expects " + std::to_string(config.num_layers));
  }
  if (tied() != config.tie_unembedding) {
    throw DimensionError("unembedding tying disagrees with config");
  }
  for (const auto& ref : refs()) {
    const std::string& name = ref.info.name;
    numeric::Shape shape;
    if (name == "embedding" || name == "unembedding") {
      shape = {n, d};
    } else if (name == "final_norm" || name.ends_with("_norm")) {
      shape = {d};
    } else if (name.ends_with("w_gate") || name.ends_with("w_up")) {
      shape = {d, f};
    } else if (name.ends_with("w_down")) {
      shape = {f, d};
    } else {
      shape = {d, d};
    }
    expect(*ref.tensor, shape, name);
  }
}

bool operator==(const ModelParameters& a, const ModelParameters& b) {
  const auto ra = a.refs(), rb = b.refs();
  if (ra.size() != rb.size()) return false;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].info.name != rb[i].info.name || !(*ra[i].tensor == *rb[i].tensor)) return false;
  }
  return true;
}

ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t n = config.vocab_size, d = config.d_model, f = config.d_ff;
  ModelParameters p;
  p.embedding = Tensor({n, d});
  p.layers.resize(config.num_layers);
  for (auto& layer : p.layers) {
    layer.attn_norm = Tensor::full({d}, 1.0);
    layer.wq = Tensor({d, d});
    layer.wk = Tensor({d, d});
    layer.wv = Tensor({d, d});
    layer.wo = Tensor({d, d});
    layer.ffn_norm = Tensor::full({d}, 1.0);
    layer.w_gate = Tensor({d, f});
    layer.w_up = Tensor({d, f});
    layer.w_down = Tensor({f, d});
  }
  p.final_norm = Tensor::full({d}, 1.0);
  if (!config.tie_unembedding) p.unembedding = Tensor({n, d});

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  for (auto& ref : p.refs()) {
    if (ref.info.name.ends_with("_norm")) continue;
    for (double& v : ref.tensor->values()) v = normal(rng);
  }
  return p;
}

bool reachable_from_layer(const ParamInfo& info, std::size_t layer) {
  switch (info.group) {
    case ParamGroup::kEmbedding:
    case ParamGroup::kUnembedding:
      return true;
    case ParamGroup::kLayer:
      return info.layer <= layer;
    case ParamGroup::kFinalNorm:
      return false;
  }
  return false;
}

}  // namespace bupo::model
