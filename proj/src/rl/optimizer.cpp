#include "bupo/rl/optimizer.hpp"

#include <cmath>

#include "bupo/errors.hpp"

namespace bupo::rl {

AdamW::AdamW(const model::ModelParameters& params, AdamWSettings settings)
    : settings_(settings) {
  for (const auto& ref : params.refs()) {
    slots_.push_back({numeric::Tensor(ref.tensor->shape()), numeric::Tensor(ref.tensor->shape()), 0});
  }
}

double global_norm(const std::vector<numeric::Tensor>& gradients) {
  double sq = 0.0;
  for (const auto& g : gradients) {
    for (double v : g.values()) sq += v * v;
  }
  return std::sqrt(sq);
}

double AdamW::step(model::ModelParameters& params, const std::vector<numeric::Tensor>& gradients) {
  auto refs = params.refs();
  if (gradients.size() != refs.size() || slots_.size() != refs.size()) {
    throw DimensionError("optimizer expects " + std::to_string(refs.size()) + " gradients, got " +
                         std::to_string(gradients.size()));
  }
  const double norm = global_norm(gradients);
  if (!std::isfinite(norm)) throw NumericFault("non-finite gradient norm");
  const double clip =
      settings_.grad_clip > 0.0 && norm > settings_.grad_clip ? settings_.grad_clip / norm : 1.0;
  const AdamWSettings& s = settings_;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const numeric::Tensor& g = gradients[i];
    if (g.empty()) continue;
    numeric::Tensor& w = *refs[i].tensor;
    if (g.shape() != w.shape()) {
      throw DimensionError("gradient for " + refs[i].info.name + " has shape " +
                           numeric::shape_string(g.shape()));
    }
    Slot& slot = slots_[i];
    ++slot.steps;
    const double t = static_cast<double>(slot.steps);
    const double c1 = 1.0 - std::pow(s.beta1, t);
    const double c2 = 1.0 - std::pow(s.beta2, t);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      slot.m[j] = s.beta1 * slot.m[j] + (1.0 - s.beta1) * gj;
      slot.v[j] = s.beta2 * slot.v[j] + (1.0 - s.beta2) * gj * gj;
      const double update = (slot.m[j] / c1) / (std::sqrt(slot.v[j] / c2) + s.eps);
      w[j] -= s.learning_rate * (update + s.weight_decay * w[j]);
    }
  }
  return norm;
}

}  // namespace bupo::rl
