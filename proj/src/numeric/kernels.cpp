#include "bupo/numeric/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "bupo/errors.hpp"

namespace bupo::numeric::kernels {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  ConstMap A(a, m, k);
  ConstMap B(b, k, n);
  Map C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  ConstMap A(a, m, k);
  ConstMap B(b, m, n);
  Map C(c, k, n);
  C.noalias() += A.transpose() * B;
}

void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k) {
  ConstMap A(a, m, n);
  ConstMap B(b, k, n);
  Map C(c, m, k);
  C.noalias() += A * B.transpose();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  Tensor c({a.extent(0), b.extent(1)});
  gemm(a.data(), b.data(), c.data(), a.extent(0), a.extent(1), b.extent(1));
  return c;
}

void softmax_row(std::span<const double> x, std::span<double> out) {
  const double peak = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = std::exp(x[j] - peak);
    total += out[j];
  }
  for (double& v : out) v /= total;
}

void log_softmax_row(std::span<const double> x, std::span<double> out) {
  const double peak = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (double v : x) total += std::exp(v - peak);
  const double log_norm = peak + std::log(total);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] - log_norm;
}

double rms_norm_row(std::span<const double> x, std::span<const double> gain, double eps,
                    std::span<double> out) {
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double inv = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + eps);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = gain[j] * (x[j] * inv);
  return inv;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  if (gain.size() != x.cols()) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) +
                         " does not match rows of " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    rms_norm_row(x.row(r), gain.values(), eps, out.row(r));
  }
  return out;
}

void rope_row(std::span<double> x, std::size_t position, std::size_t num_heads,
              double base, bool inverse) {
  const std::size_t head_dim = x.size() / num_heads;
  const std::size_t half = head_dim / 2;
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(position) * freq;
    const double c = std::cos(angle);
    const double s = sign * std::sin(angle);
    for (std::size_t h = 0; h < num_heads; ++h) {
      double* head = x.data() + h * head_dim;
      const double x1 = head[i];
      const double x2 = head[i + half];
      head[i] = x1 * c - x2 * s;
      head[i + half] = x2 * c + x1 * s;
    }
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace bupo::numeric::kernels
