#pragma once

#include <span>
#include <string>
#include <vector>

#include "quala/model/forward.hpp"
#include "quala/training/config.hpp"
#include "quala/training/supervised.hpp"

namespace quala::training {

/// LengthDrop: m₁ = n, p_i ~ U[0, p_max], l_i = max(1, ⌊m_i(1 − p_i)⌋), m_{i+1} = l_i.
model::LengthConfiguration sample_length_config(std::size_t n, std::size_t num_layers, double p_max,
                                                numerics::Rng& rng);

/// Applies fixed per-layer drop ratios with the same floor rule.
model::LengthConfiguration length_config_from_ratios(std::size_t n, std::span<const double> ratios);

/// Every layer drops the maximal ratio p_max.
model::LengthConfiguration smallest_length_config(std::size_t n, std::size_t num_layers, double p_max);

struct SubmodelPass {
  std::string name;
  model::LengthConfiguration lc;
  /// LayerDrop mask, one flag per layer.
  std::vector<bool> skip;
};

/// One full pass (implicit) followed by the smallest sub-model and the
/// sampled ones, all sized for the longest sequence in the batch.
struct SandwichBatchPlan {
  bool full_pass = true;
  SubmodelPass smallest;
  std::vector<SubmodelPass> sampled;

  std::vector<const SubmodelPass*> submodels() const;
};

SandwichBatchPlan plan_sandwich(std::size_t n, std::size_t num_layers, const TrainConfig& tc, numerics::Rng& rng);

/// Detached start/end distributions of the full pass, one pair per example.
template <typename T>
struct SoftTargets {
  std::vector<numerics::Tensor<T>> start, end;
};

struct SandwichLosses {
  double supervised_full = 0.0;
  std::vector<double> distill_per_submodel;
  double total = 0.0;
};

/// Builds the sandwich objective on `graph`. The full-pass distributions are
/// taken from the graph values (detached) unless `fixed_targets` is given.
/// `drop_rng` is consumed only under DropPolicy::random.
template <typename T>
numerics::Var sandwich_loss(numerics::Graph<T>& graph, const model::ParamSet<numerics::Var>& bound,
                            const model::ModelConfig& config, std::span<const Example> batch,
                            const SandwichBatchPlan& plan, const TrainConfig& tc, numerics::Rng* drop_rng,
                            SandwichLosses* losses = nullptr, const SoftTargets<T>* fixed_targets = nullptr);

/// One optimizer step on the sandwich objective at `learning_rate`. Throws
/// NumericError naming the offending pass when a loss is not finite.
SandwichLosses sandwich_step(model::Parameters<float>& params, AdamW& optimizer, std::span<const Example> batch,
                             const TrainConfig& tc, numerics::Rng& rng, double learning_rate, std::size_t step = 0);

/// Drop-and-Restore training of a fine-tuned model; the result is marked
/// length-adaptive.
TrainResult train_drop_and_restore(model::Parameters<float> params, std::span<const Example> train,
                                   const TrainConfig& tc, std::span<const Example> dev = {});

}  // namespace quala::training
