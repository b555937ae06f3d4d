#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bupo/numeric/tape.hpp"

// Differentiable operations. Every op records onto the tape of its inputs.
namespace bupo::numeric {

// Matrix product over the last two extents. Leading (batch) extents must be
// equal or 1 on one side; a rank-2 operand broadcasts against any batch.
Var matmul(Var a, Var b);
Var transpose(Var a);  // rank 2 only

Var add(Var a, Var b);  // identical shapes
Var mul(Var a, Var b);  // identical shapes
Var scale(Var a, double factor);
Var silu(Var a);

// Row-wise over the last extent, with max subtraction.
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
// Row-wise root-mean-square normalization times a learnable gain.
Var rms_norm(Var x, Var gain, double eps);

Var reduce_sum(Var x);   // -> shape [1]
Var reduce_mean(Var x);  // -> shape [1]

// out[i] = x[i, indices[i]]; indices.size() must equal rows of x.
Var gather_rows(Var x, std::span<const std::size_t> indices);
// Selects whole rows of a rank-2 tensor (embedding lookup, row subsets).
Var take_rows(Var x, std::span<const std::size_t> rows);

// Rotary position embedding of each row of a [R, d] tensor at positions[r].
Var rope(Var x, std::span<const std::size_t> positions, std::size_t num_heads,
         double base);

// Multi-head causal self-attention over [R, d] rows packed as consecutive
// sequences; segment s spans rows [offsets[s], offsets[s+1]). A row attends to
// rows of its own segment at or before it.
Var causal_attention(Var q, Var k, Var v, std::span<const std::size_t> offsets,
                     std::size_t num_heads);

}  // namespace bupo::numeric
