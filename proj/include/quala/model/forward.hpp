#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "quala/model/config.hpp"
#include "quala/model/params.hpp"
#include "quala/numerics/graph.hpp"
#include "quala/numerics/rng.hpp"

namespace quala::model {

/// How tokens are chosen for retention at each layer.
enum class DropPolicy { significance, random };

/// The six weight products of an encoder layer.
enum class LinearSite { query, key, value, attention_output, ffn_in, ffn_out };

/// Replaces the fp32 `x·W + b` at each linear site. Calibration observers and
/// the int8 path plug in here; the Drop-and-Restore control flow is shared.
template <typename T>
class LinearHook {
 public:
  virtual ~LinearHook() = default;
  virtual numerics::Var linear(numerics::Graph<T>& graph, std::size_t layer, LinearSite site, numerics::Var x,
                               numerics::Var weight, numerics::Var bias) = 0;
};

struct LayerTrace {
  /// Original positions entering the layer (ascending).
  std::vector<std::size_t> incoming;
  /// Original positions passed to the next layer (ascending, ⊆ incoming).
  std::vector<std::size_t> retained;
  /// Significance of each incoming token; empty for a skipped layer.
  std::vector<double> significance;
  bool skipped = false;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  /// Multiply-accumulates of the encoder stack (embeddings and span head excluded).
  std::uint64_t macs = 0;
  /// Row count of the restored hidden state fed to the span head.
  std::size_t restored_rows = 0;
};

struct SpanPrediction {
  std::vector<double> start_logits;
  std::vector<double> end_logits;
  std::size_t start = 0;
  std::size_t end = 0;
};

struct AdaptiveOptions {
  DropPolicy drop_policy = DropPolicy::significance;
  /// Required for DropPolicy::random.
  numerics::Rng* rng = nullptr;
  /// LayerDrop mask; a skipped layer passes its input through and drops nothing.
  std::vector<bool> skip_layers;
};

struct LayerTap {
  numerics::Var query, key, value;
};

struct EncoderOutput {
  /// n×d hidden states with every original position present.
  numerics::Var hidden;
  numerics::Var start_logits;
  numerics::Var end_logits;
  std::vector<LayerTap> taps;
  ForwardTrace trace;
};

/// Average attention received: s_j = (1/(h·m))·Σ_heads Σ_queries A[head,q,j].
/// `attention_probs` has shape [h×m×m].
template <typename T>
std::vector<double> significance_scores(const numerics::Tensor<T>& attention_probs);

/// Best (start, end) with start ≤ end ≤ start + max_span_len; ties go to the
/// smallest start, then the smallest end.
template <typename T>
std::pair<std::size_t, std::size_t> predict_span(std::span<const T> start_logits, std::span<const T> end_logits,
                                                 std::size_t max_span_len);

/// Post-norm encoder over every token, then the span head.
template <typename T>
EncoderOutput encode_full(numerics::Graph<T>& graph, const ParamSet<numerics::Var>& params,
                          const ModelConfig& config, std::span<const TokenId> tokens,
                          LinearHook<T>* hook = nullptr);

/// Drop-and-Restore forward. Layer i runs the attention block on its m_i
/// incoming tokens, keeps the top-l_i by significance (CLS always kept),
/// freezes the dropped tokens at their post-attention value and runs the FFN
/// on the retained ones. After the last layer every frozen vector goes back to
/// its original row.
template <typename T>
EncoderOutput encode_adaptive(numerics::Graph<T>& graph, const ParamSet<numerics::Var>& params,
                              const ModelConfig& config, std::span<const TokenId> tokens,
                              const LengthConfiguration& lc, const AdaptiveOptions& options = {},
                              LinearHook<T>* hook = nullptr);

template <typename T>
struct ForwardResult {
  numerics::Tensor<T> hidden;
  SpanPrediction span;
  ForwardTrace trace;
};

/// Inference-only runner: binds the weights once into a non-recording graph
/// and rewinds it after every call.
template <typename T>
class Encoder {
 public:
  explicit Encoder(const Parameters<T>& params, LinearHook<T>* hook = nullptr);

  ForwardResult<T> full(std::span<const TokenId> tokens, std::size_t max_span_len);
  ForwardResult<T> adaptive(std::span<const TokenId> tokens, const LengthConfiguration& lc,
                            std::size_t max_span_len, const AdaptiveOptions& options = {});

  const ModelConfig& config() const { return config_; }

 private:
  ForwardResult<T> finish(const EncoderOutput& out, std::size_t max_span_len);

  ModelConfig config_;
  LinearHook<T>* hook_;
  numerics::Graph<T> graph_;
  ParamSet<numerics::Var> bound_;
  std::size_t mark_;
};

template <typename T>
ForwardResult<T> forward_full(const Parameters<T>& params, std::span<const TokenId> tokens,
                              std::size_t max_span_len);

template <typename T>
ForwardResult<T> forward_adaptive(const Parameters<T>& params, std::span<const TokenId> tokens,
                                  const LengthConfiguration& lc, std::size_t max_span_len,
                                  const AdaptiveOptions& options = {});

}  // namespace quala::model
