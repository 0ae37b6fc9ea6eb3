#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "quala/model/config.hpp"

namespace quala::training {

/// One span-extraction record. The answer covers token indices
/// [answer_start, answer_end], both inclusive.
struct Example {
  std::vector<model::TokenId> tokens;
  std::size_t answer_start = 0;
  std::size_t answer_end = 0;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

/// Throws InputError unless the span lies inside the sequence and every id is
/// below `vocab_size`.
void validate_example(const Example& example, std::size_t vocab_size);
void validate_dataset(std::span<const Example> data, std::size_t vocab_size);

/// Longest sequence in `batch`.
std::size_t max_length(std::span<const Example> batch);

}  // namespace quala::training
