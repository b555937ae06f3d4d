#pragma once

#include <cstddef>
#include <span>

#include "bupo/numeric/tensor.hpp"

// Untracked building blocks shared by the differentiable ops and by the
// incremental decoder, so both paths evaluate identical arithmetic.
namespace bupo::numeric::kernels {

// c (m x n) = a (m x k) * b (k x n), all row-major. With accumulate, c += a*b.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate = false);
// c (k x n) += a^T (a is m x k) * b (m x n).
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
// c (m x k) += a (m x n) * b^T (b is k x n).
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k);

Tensor matmul(const Tensor& a, const Tensor& b);

void softmax_row(std::span<const double> x, std::span<double> out);
void log_softmax_row(std::span<const double> x, std::span<double> out);

// Writes gain * x / sqrt(mean(x^2) + eps) and returns 1 / sqrt(mean(x^2) + eps).
double rms_norm_row(std::span<const double> x, std::span<const double> gain, double eps,
                    std::span<double> out);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// Rotary embedding on one row holding num_heads consecutive head slices,
// rotate-half convention. inverse applies the transposed rotation.
void rope_row(std::span<double> x, std::size_t position, std::size_t num_heads,
              double base, bool inverse = false);

double sigmoid(double x);
inline double silu(double x) { return x * sigmoid(x); }

}  // namespace bupo::numeric::kernels
