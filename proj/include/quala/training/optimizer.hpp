#pragma once

#include <cstdint>
#include <vector>

#include "quala/model/params.hpp"

namespace quala::training {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Decoupled decay; applied to matrices only, never to biases or norm gains.
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay over a Parameters value. Moment buffers
/// follow the canonical tensor order of `for_each_named`.
class AdamW {
 public:
  AdamW(const model::Parameters<float>& params, AdamConfig config);

  void step(model::Parameters<float>& params, const model::ParamSet<numerics::Tensor<float>>& grads,
            double learning_rate);

  std::uint64_t steps() const { return steps_; }

 private:
  AdamConfig config_;
  std::vector<numerics::Tensor<float>> m_, v_;
  std::uint64_t steps_ = 0;
};

}  // namespace quala::training
