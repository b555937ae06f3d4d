#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bupo/model/parameters.hpp"

namespace bupo::rl {

struct AdamWSettings {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
};

// AdamW over ModelParameters::refs(). Each tensor keeps its own step count,
// so a tensor that was frozen for a while starts with fresh bias correction.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const model::ModelParameters& params, AdamWSettings settings);

  // `gradients` aligns with params.refs(); an empty tensor means the
  // parameter is frozen for this step and is left untouched, moments included.
  // Returns the global gradient norm before clipping.
  double step(model::ModelParameters& params, const std::vector<numeric::Tensor>& gradients);

  const AdamWSettings& settings() const { return settings_; }
  void set_learning_rate(double lr) { settings_.learning_rate = lr; }

  struct Slot {
    numeric::Tensor m, v;
    std::uint64_t steps = 0;
    friend bool operator==(const Slot&, const Slot&) = default;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

  friend bool operator==(const AdamW& a, const AdamW& b) { return a.slots_ == b.slots_; }

 private:
  AdamWSettings settings_;
  std::vector<Slot> slots_;
};

double global_norm(const std::vector<numeric::Tensor>& gradients);

}  // namespace bupo::rl
