#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>

#include "quala/model/forward.hpp"
#include "quala/training/data.hpp"

namespace quala::training {

struct SpanMetrics {
  double exact_match = 0.0;
  double token_f1 = 0.0;
};

/// 2·|pred ∩ gold| / (|pred| + |gold|) over inclusive index ranges.
double token_f1(std::pair<std::size_t, std::size_t> pred, std::pair<std::size_t, std::size_t> gold);

/// Averages exact match and token F1 of `predictions` against the gold spans.
SpanMetrics score_predictions(std::span<const std::pair<std::size_t, std::size_t>> predictions,
                              std::span<const Example> data);

/// Runs every example through the full encoder, or the Drop-and-Restore
/// encoder when `lc` is given. `lc` is clamped per example length.
SpanMetrics evaluate(const model::Parameters<float>& params, std::span<const Example> data,
                     const std::optional<model::LengthConfiguration>& lc, std::size_t max_span_len,
                     model::LinearHook<float>* hook = nullptr);

}  // namespace quala::training
