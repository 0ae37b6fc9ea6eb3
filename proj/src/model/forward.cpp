#include "quala/model/forward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "quala/errors.hpp"
#include "quala/numerics/mac_counter.hpp"

namespace quala::model {

using numerics::Graph;
using numerics::RowRef;
using numerics::Tensor;
using numerics::Var;

namespace {

template <typename T>
Var apply_linear(Graph<T>& g, LinearHook<T>* hook, std::size_t layer, LinearSite site, Var x, Var w, Var b) {
  if (hook) return hook->linear(g, layer, site, x, w, b);
  return g.linear(x, w, b);
}

template <typename T>
struct AttentionResult {
  Var hidden;
  LayerTap tap;
  Tensor<T> probs;  // [h×m×m]
};

template <typename T>
AttentionResult<T> attention_block(Graph<T>& g, const LayerSet<Var>& w, const ModelConfig& cfg, std::size_t layer,
                                   Var x, LinearHook<T>* hook, bool keep_probs) {
  const std::size_t m = g.value(x).dim(0);
  const std::size_t heads = cfg.num_heads, dh = cfg.head_dim();
  const Var q = apply_linear(g, hook, layer, LinearSite::query, x, w.query_weight, w.query_bias);
  const Var k = apply_linear(g, hook, layer, LinearSite::key, x, w.key_weight, w.key_bias);
  const Var v = apply_linear(g, hook, layer, LinearSite::value, x, w.value_weight, w.value_bias);
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));

  AttentionResult<T> out;
  if (keep_probs) out.probs = Tensor<T>(numerics::Shape{heads, m, m});
  std::vector<Var> contexts;
  contexts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = g.columns(q, h * dh, dh);
    const Var kh = g.columns(k, h * dh, dh);
    const Var vh = g.columns(v, h * dh, dh);
    const Var probs = g.softmax(g.scale(g.matmul_transposed(qh, kh), inv_scale));
    if (keep_probs) {
      auto src = g.value(probs).data();
      std::copy(src.begin(), src.end(), out.probs.data().begin() + static_cast<std::ptrdiff_t>(h * m * m));
    }
    contexts.push_back(g.matmul(probs, vh));
  }
  const Var context = heads == 1 ? contexts[0] : g.concat_columns(contexts);
  const Var projected =
      apply_linear(g, hook, layer, LinearSite::attention_output, context, w.output_weight, w.output_bias);
  out.hidden = g.layer_norm(g.add(x, projected), w.attention_norm_gain, w.attention_norm_bias);
  out.tap = {q, k, v};
  return out;
}

template <typename T>
Var ffn_block(Graph<T>& g, const LayerSet<Var>& w, std::size_t layer, Var x, LinearHook<T>* hook) {
  const Var inner = g.gelu(apply_linear(g, hook, layer, LinearSite::ffn_in, x, w.ffn_in_weight, w.ffn_in_bias));
  const Var outer = apply_linear(g, hook, layer, LinearSite::ffn_out, inner, w.ffn_out_weight, w.ffn_out_bias);
  return g.layer_norm(g.add(x, outer), w.ffn_norm_gain, w.ffn_norm_bias);
}

template <typename T>
Var embed(Graph<T>& g, const ParamSet<Var>& p, const ModelConfig& cfg, std::span<const TokenId> tokens) {
  const std::size_t n = tokens.size();
  if (n == 0) throw InputError("empty token sequence");
  if (n > cfg.max_positions) {
    throw InputError("sequence length " + std::to_string(n) + " exceeds max positions " +
                     std::to_string(cfg.max_positions));
  }
  std::vector<std::size_t> ids(n), positions(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " is outside vocabulary of size " + std::to_string(cfg.vocab_size));
    }
    ids[i] = tokens[i];
    positions[i] = i;
  }
  Var x = g.add(g.gather_rows(p.token_embedding, ids), g.gather_rows(p.position_embedding, positions));
  if (p.type_embedding) {
    const std::vector<std::size_t> zeros(n, 0);
    x = g.add(x, g.gather_rows(*p.type_embedding, zeros));
  }
  return g.layer_norm(x, p.embedding_norm_gain, p.embedding_norm_bias);
}

template <typename T>
void span_head(Graph<T>& g, const ParamSet<Var>& p, EncoderOutput& out) {
  const Var logits = g.linear(out.hidden, p.span_weight, p.span_bias);
  out.start_logits = g.column(logits, 0);
  out.end_logits = g.column(logits, 1);
}

// Positions (by row index into `incoming`) kept at this layer, ascending.
std::vector<std::size_t> select_rows(const std::vector<double>& scores, std::size_t keep, const AdaptiveOptions& opts) {
  const std::size_t m = scores.size();
  std::vector<std::size_t> candidates(m - 1);
  std::iota(candidates.begin(), candidates.end(), std::size_t{1});
  if (opts.drop_policy == DropPolicy::random) {
    if (!opts.rng) throw ContractError("random drop policy requires an rng");
    for (std::size_t i = candidates.size(); i > 1; --i) {
      std::swap(candidates[i - 1], candidates[opts.rng->uniform_int(0, i - 1)]);
    }
  } else {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  }
  std::vector<std::size_t> rows{0};
  rows.insert(rows.end(), candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep - 1));
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

template <typename T>
std::vector<double> significance_scores(const Tensor<T>& attention_probs) {
  if (attention_probs.rank() != 3 || attention_probs.dim(1) != attention_probs.dim(2)) {
    throw DimensionError("significance_scores: expected [h×m×m], got " + numerics::shape_string(attention_probs.shape()));
  }
  const std::size_t h = attention_probs.dim(0), m = attention_probs.dim(1);
  std::vector<double> scores(m, 0.0);
  const auto data = attention_probs.data();
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t q = 0; q < m; ++q)
      for (std::size_t j = 0; j < m; ++j) scores[j] += static_cast<double>(data[(head * m + q) * m + j]);
  const double norm = 1.0 / static_cast<double>(h * m);
  for (double& s : scores) s *= norm;
  return scores;
}

template <typename T>
std::pair<std::size_t, std::size_t> predict_span(std::span<const T> start_logits, std::span<const T> end_logits,
                                                 std::size_t max_span_len) {
  if (start_logits.size() != end_logits.size() || start_logits.empty()) {
    throw DimensionError("predict_span: start/end logits must be non-empty and equally long");
  }
  const std::size_t n = start_logits.size();
  std::pair<std::size_t, std::size_t> best{0, 0};
  T best_score = start_logits[0] + end_logits[0];
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t last = std::min(n - 1, s + max_span_len);
    for (std::size_t e = s; e <= last; ++e) {
      const T score = start_logits[s] + end_logits[e];
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

template <typename T>
EncoderOutput encode_full(Graph<T>& g, const ParamSet<Var>& p, const ModelConfig& cfg,
                          std::span<const TokenId> tokens, LinearHook<T>* hook) {
  EncoderOutput out;
  Var x = embed(g, p, cfg, tokens);
  const std::size_t n = tokens.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  numerics::MacScope macs;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    AttentionResult<T> attn = attention_block(g, p.layers[i], cfg, i, x, hook, false);
    out.taps.push_back(attn.tap);
    x = ffn_block(g, p.layers[i], i, attn.hidden, hook);
    out.trace.layers.push_back({all, all, {}, false});
  }
  out.trace.macs = macs.elapsed();
  out.trace.restored_rows = n;
  out.hidden = x;
  span_head(g, p, out);
  return out;
}

template <typename T>
EncoderOutput encode_adaptive(Graph<T>& g, const ParamSet<Var>& p, const ModelConfig& cfg,
                              std::span<const TokenId> tokens, const LengthConfiguration& lc,
                              const AdaptiveOptions& opts, LinearHook<T>* hook) {
  const std::size_t n = tokens.size();
  if (lc.size() != cfg.num_layers) {
    throw ConfigurationError("length configuration " + lc.to_string() + " has " + std::to_string(lc.size()) +
                             " entries for a " + std::to_string(cfg.num_layers) + "-layer model");
  }
  // Re-validate: a default-constructed or hand-built config may bypass the constructor.
  const LengthConfiguration retain = LengthConfiguration(lc.retain()).clamped(n);
  if (!opts.skip_layers.empty() && opts.skip_layers.size() != cfg.num_layers) {
    throw ConfigurationError("layer skip mask length does not match layer count");
  }

  EncoderOutput out;
  Var x = embed(g, p, cfg, tokens);
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), std::size_t{0});

  // Frozen rows: (source var, row in source) per original position.
  std::vector<Var> sources;
  std::vector<RowRef> origin(n);
  std::vector<bool> frozen(n, false);

  numerics::MacScope macs;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    LayerTrace lt;
    lt.incoming = active;
    if (!opts.skip_layers.empty() && opts.skip_layers[i]) {
      lt.retained = active;
      lt.skipped = true;
      out.trace.layers.push_back(std::move(lt));
      continue;
    }
    const std::size_t m = active.size();
    const std::size_t keep = std::min(retain[i], m);
    AttentionResult<T> attn = attention_block(g, p.layers[i], cfg, i, x, hook, true);
    out.taps.push_back(attn.tap);
    lt.significance = significance_scores(attn.probs);

    Var h = attn.hidden;
    if (keep < m) {
      const std::vector<std::size_t> rows = select_rows(lt.significance, keep, opts);
      std::vector<bool> kept(m, false);
      for (std::size_t r : rows) kept[r] = true;
      const std::size_t src = sources.size();
      sources.push_back(attn.hidden);
      for (std::size_t r = 0; r < m; ++r) {
        if (!kept[r]) {
          origin[active[r]] = {src, r};
          frozen[active[r]] = true;
        }
      }
      std::vector<std::size_t> next;
      next.reserve(keep);
      for (std::size_t r : rows) next.push_back(active[r]);
      active = std::move(next);
      h = g.gather_rows(attn.hidden, rows);
    }
    lt.retained = active;
    out.trace.layers.push_back(std::move(lt));
    x = ffn_block(g, p.layers[i], i, h, hook);
  }
  out.trace.macs = macs.elapsed();

  if (sources.empty()) {
    out.hidden = x;
  } else {
    const std::size_t last = sources.size();
    sources.push_back(x);
    for (std::size_t r = 0; r < active.size(); ++r) origin[active[r]] = {last, r};
    out.hidden = g.assemble_rows(sources, origin);
  }
  out.trace.restored_rows = g.value(out.hidden).dim(0);
  span_head(g, p, out);
  return out;
}

template <typename T>
Encoder<T>::Encoder(const Parameters<T>& params, LinearHook<T>* hook)
    : config_(params.config), hook_(hook), graph_(false), bound_(bind(graph_, params, false)), mark_(graph_.size()) {}

template <typename T>
ForwardResult<T> Encoder<T>::finish(const EncoderOutput& out, std::size_t max_span_len) {
  ForwardResult<T> r;
  r.hidden = graph_.value(out.hidden);
  const auto s = graph_.value(out.start_logits).data();
  const auto e = graph_.value(out.end_logits).data();
  r.span.start_logits.assign(s.begin(), s.end());
  r.span.end_logits.assign(e.begin(), e.end());
  std::tie(r.span.start, r.span.end) = predict_span<T>(s, e, max_span_len);
  r.trace = out.trace;
  graph_.truncate(mark_);
  return r;
}

template <typename T>
ForwardResult<T> Encoder<T>::full(std::span<const TokenId> tokens, std::size_t max_span_len) {
  try {
    return finish(encode_full(graph_, bound_, config_, tokens, hook_), max_span_len);
  } catch (...) {
    graph_.truncate(mark_);
    throw;
  }
}

template <typename T>
ForwardResult<T> Encoder<T>::adaptive(std::span<const TokenId> tokens, const LengthConfiguration& lc,
                                      std::size_t max_span_len, const AdaptiveOptions& options) {
  try {
    return finish(encode_adaptive(graph_, bound_, config_, tokens, lc, options, hook_), max_span_len);
  } catch (...) {
    graph_.truncate(mark_);
    throw;
  }
}

template <typename T>
ForwardResult<T> forward_full(const Parameters<T>& params, std::span<const TokenId> tokens,
                              std::size_t max_span_len) {
  Encoder<T> enc(params);
  return enc.full(tokens, max_span_len);
}

template <typename T>
ForwardResult<T> forward_adaptive(const Parameters<T>& params, std::span<const TokenId> tokens,
                                  const LengthConfiguration& lc, std::size_t max_span_len,
                                  const AdaptiveOptions& options) {
  Encoder<T> enc(params);
  return enc.adaptive(tokens, lc, max_span_len, options);
}

#define QUALA_INSTANTIATE(T)                                                                                     \
  template std::vector<double> significance_scores(const Tensor<T>&);                                           \
  template std::pair<std::size_t, std::size_t> predict_span(std::span<const T>, std::span<const T>, std::size_t); \
  template EncoderOutput encode_full(Graph<T>&, const ParamSet<Var>&, const ModelConfig&,                        \
                                     std::span<const TokenId>, LinearHook<T>*);                                  \
  template EncoderOutput encode_adaptive(Graph<T>&, const ParamSet<Var>&, const ModelConfig&,                    \
                                         std::span<const TokenId>, const LengthConfiguration&,                   \
                                         const AdaptiveOptions&, LinearHook<T>*);                                \
  template class Encoder<T>;                                                                                     \
  template ForwardResult<T> forward_full(const Parameters<T>&, std::span<const TokenId>, std::size_t);           \
  template ForwardResult<T> forward_adaptive(const Parameters<T>&, std::span<const TokenId>,                     \
                                             const LengthConfiguration&, std::size_t, const AdaptiveOptions&);

QUALA_INSTANTIATE(float)
QUALA_INSTANTIATE(double)

#undef QUALA_INSTANTIATE

}  // namespace quala::model
