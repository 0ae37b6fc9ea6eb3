#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace quala::model {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_size = 128;
  std::size_t vocab_size = 64;
  std::size_t max_positions = 64;
  /// Token-type table rows; 0 means no table. Row 0 is added to every token.
  std::size_t type_vocab_size = 0;

  std::size_t head_dim() const { return hidden_size / num_heads; }
  /// Throws ConfigurationError when a field is zero or d is not divisible by h.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Where a model is in the distill → fine-tune → Drop-and-Restore sequence.
enum class TrainingStage : std::uint32_t {
  initialized = 0,
  distilled = 1,
  finetuned = 2,
  length_adaptive = 3,
};

std::string stage_name(TrainingStage stage);

/// Per-layer token retention counts (l₁,…,l_L), monotone non-increasing and
/// at least 1 everywhere.
class LengthConfiguration {
 public:
  LengthConfiguration() = default;
  /// Throws ConfigurationError on an empty, zero-valued or increasing sequence.
  explicit LengthConfiguration(std::vector<std::size_t> retain);

  /// (n,…,n) for L layers.
  static LengthConfiguration full(std::size_t n, std::size_t num_layers);

  const std::vector<std::size_t>& retain() const { return retain_; }
  std::size_t size() const { return retain_.size(); }
  std::size_t operator[](std::size_t i) const { return retain_[i]; }

  /// Throws ConfigurationError unless the config has L entries and every entry
  /// is ≤ n.
  void check_against(std::size_t n, std::size_t num_layers) const;
  /// Entry-wise min(l_i, active count) for an input of length n.
  LengthConfiguration clamped(std::size_t n) const;

  /// "a-b-c"
  std::string to_string(char sep = '-') const;
  static LengthConfiguration parse(const std::string& text);

  auto operator<=>(const LengthConfiguration&) const = default;

 private:
  std::vector<std::size_t> retain_;
};

}  // namespace quala::model
