#pragma once

// Central finite-difference oracle for gradients computed on a Tape.
// Independent of the backward rules it checks: it only re-runs forward passes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "bupo/numeric/ops.hpp"

namespace bupo::testing {

using numeric::Tape;
using numeric::Tensor;
using numeric::Var;

// Builds a scalar from leaf variables created on the given tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double evaluate(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, false));
  return fn(tape, vars).value()[0];
}

inline std::vector<Tensor> analytic_gradients(const ScalarFn& fn,
                                              const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = fn(tape, vars);
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const Tensor* g = vars[i].grad();
    grads.push_back(g ? *g : Tensor(inputs[i].shape()));
  }
  return grads;
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

// Largest per-element relative error between analytic and central-difference
// gradients over every input element.
inline double max_gradient_error(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                 double step = 1e-4) {
  const std::vector<Tensor> analytic = analytic_gradients(fn, inputs);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i][j] += step;
      minus[i][j] -= step;
      const double numeric = (evaluate(fn, plus) - evaluate(fn, minus)) / (2.0 * step);
      worst = std::max(worst, relative_error(analytic[i][j], numeric));
    }
  }
  return worst;
}

inline Tensor random_tensor(numeric::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng);
  return t;
}

}  // namespace bupo::testing
