#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

namespace quala::training {

template <typename Fn, typename EpochFn>
void for_each_batch(std::span<const Example> data, const TrainConfig& tc, numerics::Rng& rng, Fn&& fn,
                    EpochFn&& on_epoch) {
  std::vector<std::size_t> order(data.size());
  std::vector<Example> batch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);
    for (std::size_t begin = 0; begin < order.size(); begin += tc.batch_size) {
      if (tc.max_steps && step >= tc.max_steps) break;
      batch.clear();
      for (std::size_t j = begin; j < std::min(order.size(), begin + tc.batch_size); ++j) batch.push_back(data[order[j]]);
      fn(std::span<const Example>(batch), step, epoch);
      ++step;
    }
    on_epoch(epoch);
    if (tc.max_steps && step >= tc.max_steps) break;
  }
}

}  // namespace quala::training
