#include "bupo/model/generate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <string>
#include <thread>

#include "bupo/errors.hpp"
#include "bupo/model/forward.hpp"
#include "bupo/numeric/kernels.hpp"

namespace bupo::model {

namespace k = bupo::numeric::kernels;

namespace {

// Sequences decoded together share one set of batched matrix products.
constexpr std::size_t kChunkSize = 64;

struct SequenceState {
  Generation gen;
  std::mt19937_64 rng;
  std::size_t cursor = 0;  // position fed at the next step
  bool done = false;
};

double entropy_from_log_probs(std::span<const double> logp) {
  double h = 0.0;
  for (double lp : logp) h -= std::exp(lp) * lp;
  return h;
}

class Decoder {
 public:
  Decoder(const ModelParameters& params, const ModelConfig& config,
          const SamplingSettings& settings, std::size_t batch)
      : p_(params), c_(config), s_(settings), batch_(batch) {
    const std::size_t cache = batch * config.max_seq_len * config.d_model;
    keys_.assign(config.num_layers, std::vector<double>(cache));
    values_.assign(config.num_layers, std::vector<double>(cache));
  }

  void run(std::vector<SequenceState>& seqs) {
    const std::size_t d = c_.d_model, n = c_.vocab_size;
    std::vector<std::size_t> active;
    std::vector<double> logits, logp, probs, scaled;
    while (true) {
      active.clear();
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (!seqs[i].done) active.push_back(i);
      }
      if (active.empty()) break;
      const std::size_t rows = active.size();

      numeric::Tensor h({rows, d});
      for (std::size_t r = 0; r < rows; ++r) {
        const auto& st = seqs[active[r]];
        const TokenId tok = st.gen.tokens[st.cursor];
        std::copy_n(p_.embedding.data() + tok * d, d, h.data() + r * d);
      }
      numeric::Tensor internal_hidden;
      for (std::size_t l = 0; l < c_.num_layers; ++l) {
        h = layer_step(l, h, seqs, active);
        if (s_.internal_layer == l + 1) internal_hidden = h;
      }
      numeric::Tensor normed = k::rms_norm(h, p_.final_norm, c_.norm_eps);
      numeric::Tensor out_logits({rows, n});
      const numeric::Tensor& eu = p_.output_embedding();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t v = 0; v < n; ++v) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += normed.at(r, j) * eu.at(v, j);
          out_logits.at(r, v) = dot;
        }
      }
      if (!out_logits.all_finite()) throw NumericFault("generate: non-finite logits");

      scaled.resize(n);
      logp.resize(n);
      probs.resize(n);
      for (std::size_t r = 0; r < rows; ++r) {
        SequenceState& st = seqs[active[r]];
        ++st.cursor;
        if (st.cursor < st.gen.tokens.size()) continue;  // still consuming the prompt

        for (std::size_t v = 0; v < n; ++v) scaled[v] = out_logits.at(r, v) / s_.temperature;
        k::log_softmax_row(scaled, logp);
        k::softmax_row(scaled, probs);
        const std::size_t tok = sample_index(probs, st.rng());
        st.gen.tokens.push_back(static_cast<TokenId>(tok));
        st.gen.logprobs.push_back(logp[tok]);
        st.gen.entropies.push_back(entropy_from_log_probs(logp));

        if (s_.internal_layer > 0) {
          std::vector<double> hrow(internal_hidden.row(r).begin(), internal_hidden.row(r).end());
          if (s_.internal_apply_norm) {
            std::vector<double> tmp(d);
            k::rms_norm_row(hrow, p_.final_norm.values(), c_.norm_eps, tmp);
            hrow = tmp;
          }
          for (std::size_t v = 0; v < n; ++v) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += hrow[j] * eu.at(v, j);
            scaled[v] = dot / s_.temperature;
          }
          k::log_softmax_row(scaled, logp);
          if (!std::isfinite(logp[tok])) throw NumericFault("generate: non-finite internal log-prob");
          st.gen.internal_logprobs.push_back(logp[tok]);
          st.gen.internal_entropies.push_back(entropy_from_log_probs(logp));
        }
        if (tok == s_.eos_id || st.gen.response_length() >= s_.max_new_tokens ||
            st.gen.tokens.size() >= c_.max_seq_len) {
          st.done = true;
        }
      }
    }
  }

 private:
  numeric::Tensor layer_step(std::size_t l, const numeric::Tensor& h,
                             std::vector<SequenceState>& seqs,
                             const std::vector<std::size_t>& active) {
    const LayerParameters& lp = p_.layers[l];
    const std::size_t rows = h.rows(), d = c_.d_model, heads = c_.num_heads;
    const std::size_t hd = c_.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    numeric::Tensor x = k::rms_norm(h, lp.attn_norm, c_.norm_eps);
    numeric::Tensor q = k::matmul(x, lp.wq);
    numeric::Tensor key = k::matmul(x, lp.wk);
    numeric::Tensor val = k::matmul(x, lp.wv);
    numeric::Tensor attn({rows, d});
    std::vector<double> scores, weights;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t slot = active[r];
      const std::size_t pos = seqs[active[r]].cursor;
      k::rope_row(q.row(r), pos, heads, c_.rope_base);
      k::rope_row(key.row(r), pos, heads, c_.rope_base);
      double* kc = keys_[l].data() + slot * c_.max_seq_len * d;
      double* vc = values_[l].data() + slot * c_.max_seq_len * d;
      std::copy_n(key.data() + r * d, d, kc + pos * d);
      std::copy_n(val.data() + r * d, d, vc + pos * d);
      scores.resize(pos + 1);
      weights.resize(pos + 1);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const double* qi = q.data() + r * d + hh * hd;
        for (std::size_t j = 0; j <= pos; ++j) {
          const double* kj = kc + j * d + hh * hd;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_sqrt;
        }
        k::softmax_row(scores, weights);
        double* oi = attn.data() + r * d + hh * hd;
        for (std::size_t j = 0; j <= pos; ++j) {
          const double* vj = vc + j * d + hh * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += weights[j] * vj[c];
        }
      }
    }
    numeric::Tensor a = k::matmul(attn, lp.wo);
    numeric::Tensor mid = h;
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += a[i];
    numeric::Tensor xf = k::rms_norm(mid, lp.ffn_norm, c_.norm_eps);
    numeric::Tensor gate = k::matmul(xf, lp.w_gate);
    numeric::Tensor up = k::matmul(xf, lp.w_up);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = k::silu(gate[i]) * up[i];
    numeric::Tensor f = k::matmul(gate, lp.w_down);
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += f[i];
    return mid;
  }

  const ModelParameters& p_;
  const ModelConfig& c_;
  const SamplingSettings& s_;
  std::size_t batch_;
  std::vector<std::vector<double>> keys_, values_;
};

std::size_t run_threads() {
  if (const char* env = std::getenv("RUN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

void decode_chunk(const ModelParameters& params, const ModelConfig& config,
                  const SamplingSettings& settings, std::vector<SequenceState>& seqs) {
  Decoder decoder(params, config, settings, seqs.size());
  decoder.run(seqs);
}

}  // namespace

std::size_t sample_index(std::span<const double> probs, std::uint64_t random_bits) {
  const double u = static_cast<double>(random_bits >> 11) * 0x1.0p-53;
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cumulative += probs[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  return last_positive;
}

std::vector<Generation> generate_batch(const ModelParameters& params, const ModelConfig& config,
                                       std::span<const GenerationRequest> requests,
                                       const SamplingSettings& settings) {
  if (!(settings.temperature > 0.0)) throw InputError("temperature must be positive");
  if (settings.internal_layer > config.num_layers) {
    throw InputError("internal layer " + std::to_string(settings.internal_layer) +
                     " out of range for " + std::to_string(config.num_layers) + " layers");
  }
  std::vector<SequenceState> states(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    validate_tokens(config, requests[i].prompt);
    states[i].gen.tokens = requests[i].prompt;
    states[i].gen.prompt_length = requests[i].prompt.size();
    states[i].rng.seed(requests[i].seed);
    states[i].done = settings.max_new_tokens == 0 ||
                     requests[i].prompt.size() >= config.max_seq_len;
  }

  std::vector<std::vector<SequenceState>> chunks;
  for (std::size_t b = 0; b < states.size(); b += kChunkSize) {
    const std::size_t e = std::min(states.size(), b + kChunkSize);
    chunks.emplace_back(std::make_move_iterator(states.begin() + b),
                        std::make_move_iterator(states.begin() + e));
  }
  const std::size_t threads = std::min(run_threads(), chunks.size());
  if (threads <= 1) {
    for (auto& chunk : chunks) decode_chunk(params, config, settings, chunk);
  } else {
    std::vector<std::exception_ptr> errors(chunks.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t c = t; c < chunks.size(); c += threads) {
          try {
            decode_chunk(params, config, settings, chunks[c]);
          } catch (...) {
            errors[c] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<Generation> out;
  out.reserve(requests.size());
  for (auto& chunk : chunks) {
    for (auto& st : chunk) out.push_back(std::move(st.gen));
  }
  return out;
}

Generation generate(const ModelParameters& params, const ModelConfig& config,
                    std::span<const TokenId> prompt, const SamplingSettings& settings,
                    std::uint64_t seed) {
  if (prompt.empty()) throw InputError("prompt is empty");
  const GenerationRequest request{std::vector<TokenId>(prompt.begin(), prompt.end()), seed};
  return std::move(generate_batch(params, config, std::span(&request, 1), settings).front());
}

}  // namespace bupo::model
