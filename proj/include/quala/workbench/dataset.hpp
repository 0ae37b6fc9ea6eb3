#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>

#include "quala/training/data.hpp"

namespace quala::workbench {

/// Needle-span task. Token 0 is CLS, tokens 1 and 2 form the cue, ids in
/// [3, 3 + answer_vocab) are answer tokens and the rest are background.
struct GeneratorSettings {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;
  std::size_t answer_vocab = 16;
  std::size_t min_span = 1;
  std::size_t max_span = 4;
  /// Probability, per record, of planting answer tokens away from the cue.
  double distractor_rate = 0.5;
  std::size_t n_train = 4000;
  std::size_t n_dev = 400;
  std::size_t n_test = 400;

  /// Throws ConfigurationError for inconsistent sizes.
  void validate() const;

  static constexpr model::TokenId cls_token = 0;
  static constexpr model::TokenId cue_first = 1;
  static constexpr model::TokenId cue_second = 2;
  static constexpr model::TokenId answer_base = 3;
};

struct Splits {
  training::Dataset train, dev, test;
};

/// Each split is drawn from its own stream of `seed`.
Splits gen_dataset(const GeneratorSettings& settings, std::uint64_t seed);

/// One record per line: {"tokens":[...],"answer_start":i,"answer_end":j}.
void write_jsonl(const std::filesystem::path& path, const training::Dataset& data);
training::Dataset read_jsonl(const std::filesystem::path& path);

}  // namespace quala::workbench
