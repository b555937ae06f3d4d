#include "bupo/numeric/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bupo/errors.hpp"
#include "bupo/numeric/kernels.hpp"

namespace bupo::numeric {

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw UsageError(std::string(op) + ": operands must live on the same tape");
  }
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void accumulate(Tape& tape, std::size_t id, const Tensor& delta) {
  if (!tape.requires_grad(id)) return;
  Tensor& g = tape.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

struct BatchLayout {
  Shape batch;                    // broadcast leading extents
  std::vector<std::size_t> a_index;  // flat batch index -> a batch slot
  std::vector<std::size_t> b_index;
  std::size_t m = 0, k = 0, n = 0;
};

BatchLayout matmul_layout(const Shape& sa, const Shape& sb) {
  auto fail = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_string(sa) + " and " +
                          shape_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw fail();
  BatchLayout layout;
  layout.m = sa[sa.size() - 2];
  layout.k = sa.back();
  layout.n = sb.back();
  if (sb[sb.size() - 2] != layout.k) throw fail();

  const Shape ba(sa.begin(), sa.end() - 2);
  const Shape bb(sb.begin(), sb.end() - 2);
  const std::size_t rank = std::max(ba.size(), bb.size());
  Shape pa(rank - ba.size(), 1), pb(rank - bb.size(), 1);
  pa.insert(pa.end(), ba.begin(), ba.end());
  pb.insert(pb.end(), bb.begin(), bb.end());
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) throw fail();
    layout.batch.push_back(std::max(pa[d], pb[d]));
  }
  const std::size_t total = shape_size(layout.batch);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat, ia = 0, ib = 0, stride_a = 1, stride_b = 1;
    for (std::size_t d = rank; d-- > 0;) {
      const std::size_t coord = rem % layout.batch[d];
      rem /= layout.batch[d];
      ia += (pa[d] == 1 ? 0 : coord) * stride_a;
      ib += (pb[d] == 1 ? 0 : coord) * stride_b;
      stride_a *= pa[d];
      stride_b *= pb[d];
    }
    layout.a_index.push_back(ia);
    layout.b_index.push_back(ib);
  }
  return layout;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b, "matmul");
  const BatchLayout layout = matmul_layout(a.shape(), b.shape());
  Shape out_shape = layout.batch;
  out_shape.push_back(layout.m);
  out_shape.push_back(layout.n);
  Tensor out(out_shape);
  const std::size_t sa = layout.m * layout.k, sb = layout.k * layout.n,
                    sc = layout.m * layout.n;
  for (std::size_t i = 0; i < layout.a_index.size(); ++i) {
    kernels::gemm(a.value().data() + layout.a_index[i] * sa,
                  b.value().data() + layout.b_index[i] * sb, out.data() + i * sc, layout.m,
                  layout.k, layout.n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("matmul", {ia, ib}, std::move(out),
                     [ia, ib, layout, sa, sb, sc](Tape& t, std::size_t self) {
                       const Tensor& g = *t.grad(self);
                       const Tensor& av = t.value(ia);
                       const Tensor& bv = t.value(ib);
                       const bool need_a = t.requires_grad(ia);
                       const bool need_b = t.requires_grad(ib);
                       double* ga = need_a ? t.grad_buffer(ia).data() : nullptr;
                       double* gb = need_b ? t.grad_buffer(ib).data() : nullptr;
                       for (std::size_t i = 0; i < layout.a_index.size(); ++i) {
                         const double* gc = g.data() + i * sc;
                         if (need_a) {
                           kernels::gemm_nt_acc(gc, bv.data() + layout.b_index[i] * sb,
                                                ga + layout.a_index[i] * sa, layout.m,
                                                layout.n, layout.k);
                         }
                         if (need_b) {
                           kernels::gemm_tn_acc(av.data() + layout.a_index[i] * sa, gc,
                                                gb + layout.b_index[i] * sb, layout.m,
                                                layout.k, layout.n);
                         }
                       }
                     });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_string(x.shape()));
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
  const std::size_t ia = a.id();
  return a.tape()->record("transpose", {ia}, std::move(out),
                          [ia, r, c](Tape& t, std::size_t self) {
                            const Tensor& g = *t.grad(self);
                            Tensor& ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += g.at(j, i);
                          });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("add", {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad(self);
    accumulate(t, ia, g);
    accumulate(t, ib, g);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("mul", {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad(self);
    if (t.requires_grad(ia)) {
      const Tensor& yv = t.value(ib);
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
    }
    if (t.requires_grad(ib)) {
      const Tensor& xv = t.value(ia);
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xv[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape()->record("scale", {ia}, std::move(out), [ia, factor](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var silu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = kernels::silu(v);
  const std::size_t ia = a.id();
  return a.tape()->record("silu", {ia}, std::move(out), [ia](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = kernels::sigmoid(x[i]);
      ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

Var softmax_rows(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t r = 0; r < in.rows(); ++r) kernels::softmax_row(in.row(r), out.row(r));
  const std::size_t ix = x.id();
  return x.tape()->record("softmax_rows", {ix}, std::move(out),
                          [ix](Tape& t, std::size_t self) {
                            const Tensor& g = *t.grad(self);
                            const Tensor& p = t.value(self);
                            Tensor& gx = t.grad_buffer(ix);
                            for (std::size_t r = 0; r < p.rows(); ++r) {
                              const auto pr = p.row(r);
                              const auto gr = g.row(r);
                              double dot = 0.0;
                              for (std::size_t j = 0; j < pr.size(); ++j) dot += pr[j] * gr[j];
                              auto out = gx.row(r);
                              for (std::size_t j = 0; j < pr.size(); ++j)
                                out[j] += pr[j] * (gr[j] - dot);
                            }
                          });
}

Var log_softmax_rows(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t r = 0; r < in.rows(); ++r) kernels::log_softmax_row(in.row(r), out.row(r));
  const std::size_t ix = x.id();
  return x.tape()->record("log_softmax_rows", {ix}, std::move(out),
                          [ix](Tape& t, std::size_t self) {
                            const Tensor& g = *t.grad(self);
                            const Tensor& lp = t.value(self);
                            Tensor& gx = t.grad_buffer(ix);
                            for (std::size_t r = 0; r < lp.rows(); ++r) {
                              const auto lr = lp.row(r);
                              const auto gr = g.row(r);
                              double total = 0.0;
                              for (double v : gr) total += v;
                              auto out = gx.row(r);
                              for (std::size_t j = 0; j < lr.size(); ++j)
                                out[j] += gr[j] - std::exp(lr[j]) * total;
                            }
                          });
}

Var rms_norm(Var x, Var gain, double eps) {
  Tape& tape = same_tape(x, gain, "rms_norm");
  const Tensor& in = x.value();
  const Tensor& gv = gain.value();
  if (in.empty() || in.cols() == 0) throw DimensionError("rms_norm: zero-length row");
  if (gv.size() != in.cols()) {
    throw DimensionError("rms_norm: gain " + shape_string(gv.shape()) +
                         " does not match last extent of " + shape_string(in.shape()));
  }
  Tensor out(in.shape());
  std::vector<double> inv(in.rows());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    inv[r] = kernels::rms_norm_row(in.row(r), gv.values(), eps, out.row(r));
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return tape.record(
      "rms_norm", {ix, ig}, std::move(out),
      [ix, ig, inv = std::move(inv)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad(self);
        const Tensor& xv = t.value(ix);
        const Tensor& gv = t.value(ig);
        const std::size_t d = xv.cols();
        const bool need_x = t.requires_grad(ix);
        const bool need_g = t.requires_grad(ig);
        Tensor* gx = need_x ? &t.grad_buffer(ix) : nullptr;
        Tensor* gg = need_g ? &t.grad_buffer(ig) : nullptr;
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const auto xr = xv.row(r);
          const auto dy = g.row(r);
          double proj = 0.0;
          for (std::size_t j = 0; j < d; ++j) proj += gv[j] * dy[j] * xr[j] * inv[r];
          proj /= static_cast<double>(d);
          if (gx) {
            auto out = gx->row(r);
            for (std::size_t j = 0; j < d; ++j)
              out[j] += inv[r] * (gv[j] * dy[j] - xr[j] * inv[r] * proj);
          }
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * xr[j] * inv[r];
          }
        }
      });
}

Var reduce_sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  const std::size_t ix = x.id();
  return x.tape()->record("reduce_sum", {ix}, Tensor({1}, {total}),
                          [ix](Tape& t, std::size_t self) {
                            const double g = (*t.grad(self))[0];
                            for (double& v : t.grad_buffer(ix).values()) v += g;
                          });
}

Var reduce_mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(reduce_sum(x), 1.0 / n);
}

Var gather_rows(Var x, std::span<const std::size_t> indices) {
  const Tensor& in = x.value();
  if (indices.size() != in.rows()) {
    throw DimensionError("gather_rows: " + std::to_string(indices.size()) +
                         " indices for " + std::to_string(in.rows()) + " rows");
  }
  Tensor out({indices.size()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= in.cols()) {
      throw InputError("gather_rows: index " + std::to_string(indices[r]) +
                       " out of range for row width " + std::to_string(in.cols()));
    }
    out[r] = in.at(r, indices[r]);
  }
  const std::size_t ix = x.id();
  return x.tape()->record(
      "gather_rows", {ix}, std::move(out),
      [ix, idx = std::vector<std::size_t>(indices.begin(), indices.end())](Tape& t,
                                                                          std::size_t self) {
        const Tensor& g = *t.grad(self);
        Tensor& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < idx.size(); ++r) gx.at(r, idx[r]) += g[r];
      });
}

Var take_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& in = x.value();
  if (in.rank() != 2) throw DimensionError("take_rows expects rank 2, got " + shape_string(in.shape()));
  if (rows.empty()) throw DimensionError("take_rows: no rows selected");
  const std::size_t d = in.cols();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= in.rows()) {
      throw InputError("take_rows: row " + std::to_string(rows[r]) + " out of range for " +
                       std::to_string(in.rows()) + " rows");
    }
    std::copy_n(in.data() + rows[r] * d, d, out.data() + r * d);
  }
  const std::size_t ix = x.id();
  return x.tape()->record(
      "take_rows", {ix}, std::move(out),
      [ix, sel = std::vector<std::size_t>(rows.begin(), rows.end())](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad(self);
        Tensor& gx = t.grad_buffer(ix);
        const std::size_t d = gx.cols();
        for (std::size_t r = 0; r < sel.size(); ++r) {
          double* dst = gx.data() + sel[r] * d;
          const double* src = g.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
}

Var rope(Var x, std::span<const std::size_t> positions, std::size_t num_heads, double base) {
  const Tensor& in = x.value();
  if (positions.size() != in.rows()) {
    throw DimensionError("rope: positions do not match rows of " + shape_string(in.shape()));
  }
  if (num_heads == 0 || in.cols() % num_heads != 0 || (in.cols() / num_heads) % 2 != 0) {
    throw DimensionError("rope: row width " + std::to_string(in.cols()) +
                         " does not split into even-sized heads");
  }
  Tensor out = in;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    kernels::rope_row(out.row(r), positions[r], num_heads, base);
  }
  const std::size_t ix = x.id();
  return x.tape()->record(
      "rope", {ix}, std::move(out),
      [ix, num_heads, base, pos = std::vector<std::size_t>(positions.begin(), positions.end())](
          Tape& t, std::size_t self) {
        Tensor g = *t.grad(self);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          kernels::rope_row(g.row(r), pos[r], num_heads, base, /*inverse=*/true);
        }
        accumulate(t, ix, g);
      });
}

Var causal_attention(Var q, Var k, Var v, std::span<const std::size_t> offsets,
                     std::size_t num_heads) {
  Tape& tape = same_tape(q, k, "causal_attention");
  same_tape(q, v, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) +
                         " not divisible by heads");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw DimensionError("causal_attention: segment offsets must run from 0 to row count");
  }
  const std::size_t hd = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // probs[row] holds, per head, the weights over rows begin..row of its segment.
  std::vector<std::vector<double>> probs(rows);
  std::vector<std::size_t> seg_begin(rows);
  Tensor out({rows, d});
  std::vector<double> scores;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t span_len = i - b + 1;
      seg_begin[i] = b;
      probs[i].assign(num_heads * span_len, 0.0);
      scores.resize(span_len);
      for (std::size_t h = 0; h < num_heads; ++h) {
        const double* qi = qv.data() + i * d + h * hd;
        for (std::size_t j = b; j <= i; ++j) {
          const double* kj = kv.data() + j * d + h * hd;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
          scores[j - b] = dot * inv_sqrt;
        }
        std::span<double> p(probs[i].data() + h * span_len, span_len);
        kernels::softmax_row(scores, p);
        double* oi = out.data() + i * d + h * hd;
        for (std::size_t j = b; j <= i; ++j) {
          const double* vj = vv.data() + j * d + h * hd;
          const double w = p[j - b];
          for (std::size_t c = 0; c < hd; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(
      "causal_attention", {iq, ik, iv}, std::move(out),
      [iq, ik, iv, num_heads, hd, d, inv_sqrt, probs = std::move(probs),
       seg_begin = std::move(seg_begin)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad(self);
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
        std::vector<double> dp;
        for (std::size_t i = 0; i < probs.size(); ++i) {
          const std::size_t b = seg_begin[i];
          const std::size_t span_len = i - b + 1;
          dp.resize(span_len);
          for (std::size_t h = 0; h < num_heads; ++h) {
            const double* p = probs[i].data() + h * span_len;
            const double* go = g.data() + i * d + h * hd;
            double weighted = 0.0;
            for (std::size_t j = b; j <= i; ++j) {
              const double* vj = vv.data() + j * d + h * hd;
              double* gvj = gv.data() + j * d + h * hd;
              double dot = 0.0;
              for (std::size_t c = 0; c < hd; ++c) {
                dot += go[c] * vj[c];
                gvj[c] += p[j - b] * go[c];
              }
              dp[j - b] = dot;
              weighted += p[j - b] * dot;
            }
            const double* qi = qv.data() + i * d + h * hd;
            double* gqi = gq.data() + i * d + h * hd;
            for (std::size_t j = b; j <= i; ++j) {
              const double ds = p[j - b] * (dp[j - b] - weighted) * inv_sqrt;
              const double* kj = kv.data() + j * d + h * hd;
              double* gkj = gk.data() + j * d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
        accumulate(t, iq, gq);
        accumulate(t, ik, gk);
        accumulate(t, iv, gv);
      });
}

}  // namespace bupo::numeric
