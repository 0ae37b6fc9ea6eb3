#include "quala/training/data.hpp"

#include <algorithm>
#include <string>

#include "quala/errors.hpp"

namespace quala::training {

void validate_example(const Example& example, std::size_t vocab_size) {
  const std::size_t n = example.tokens.size();
  if (n == 0) throw InputError("example has no tokens");
  if (example.answer_start > example.answer_end || example.answer_end >= n) {
    throw InputError("answer span (" + std::to_string(example.answer_start) + "," +
                     std::to_string(example.answer_end) + ") outside a sequence of length " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (example.tokens[i] >= vocab_size) {
      throw InputError("token id " + std::to_string(example.tokens[i]) + " at position " + std::to_string(i) +
                       " exceeds vocabulary size " + std::to_string(vocab_size));
    }
  }
}

void validate_dataset(std::span<const Example> data, std::size_t vocab_size) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      validate_example(data[i], vocab_size);
    } catch (const InputError& e) {
      throw InputError("record " + std::to_string(i) + ": " + e.what());
    }
  }
}

std::size_t max_length(std::span<const Example> batch) {
  std::size_t n = 0;
  for (const auto& ex : batch) n = std::max(n, ex.tokens.size());
  return n;
}

}  // namespace quala::training
