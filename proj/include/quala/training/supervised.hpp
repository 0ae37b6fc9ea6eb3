#pragma once

#include <cstddef>
#include <span>

#include "quala/model/forward.hpp"
#include "quala/training/config.hpp"
#include "quala/training/data.hpp"
#include "quala/training/history.hpp"
#include "quala/training/optimizer.hpp"

namespace quala::training {

struct TrainResult {
  model::Parameters<float> params;
  MetricHistory history;
  std::size_t steps = 0;
};

/// Mean of the start and end cross-entropies of one encoder output.
template <typename T>
numerics::Var span_loss(numerics::Graph<T>& graph, const model::EncoderOutput& out, const Example& example);

/// One optimizer step on the batch-mean span loss. Returns the loss value.
/// Throws NumericError naming `step` when the loss is not finite.
double supervised_step(model::Parameters<float>& params, AdamW& optimizer, std::span<const Example> batch,
                       double learning_rate, std::size_t step);

/// Visits shuffled mini-batches for `tc.epochs` epochs (or until
/// `tc.max_steps`), calling `fn(batch, step, epoch)` and `on_epoch(epoch)`.
template <typename Fn, typename EpochFn>
void for_each_batch(std::span<const Example> data, const TrainConfig& tc, numerics::Rng& rng, Fn&& fn,
                    EpochFn&& on_epoch);

/// Supervised fine-tuning from an initialized or distilled model. The result
/// is marked fine-tuned. `dev`, when non-empty, is scored after each epoch.
TrainResult finetune_supervised(model::Parameters<float> params, std::span<const Example> train,
                                const TrainConfig& tc, std::span<const Example> dev = {});

}  // namespace quala::training

#include "quala/training/batching.ipp"
