#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include "quala/model/forward.hpp"
#include "quala/training/optimizer.hpp"

namespace quala::training {

struct TrainConfig {
  std::size_t epochs = 5;
  /// Hard cap on optimizer steps across all epochs; 0 means no cap.
  std::size_t max_steps = 0;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  /// Linear warmup from 0 over this many steps.
  std::size_t warmup_steps = 0;
  /// Linear decay to 0 at the final planned step after warmup.
  bool linear_decay = false;
  std::uint64_t seed = 42;
  /// LengthDrop upper ratio.
  double p_max = 0.2;
  double p_layerdrop = 0.1;
  std::size_t n_random_sandwiches = 2;
  std::size_t max_span_len = 4;
  AdamConfig adam;
  model::DropPolicy drop_policy = model::DropPolicy::significance;
  /// Adds the supervised loss to each sub-model pass as well.
  bool submodel_supervised = false;
  /// Steps between metric-history rows; epochs always end with a row.
  std::size_t log_every = 50;
  /// Steps between dev evaluations; 0 evaluates at epoch ends only.
  std::size_t eval_every = 0;

  /// Throws ConfigurationError when a field is out of range.
  void validate() const;

  /// Number of optimizer steps over a training set of `examples` records.
  std::size_t planned_steps(std::size_t examples) const;
  /// Learning rate for `step` (0-based) out of `total` planned steps.
  double learning_rate_at(std::size_t step, std::size_t total) const;
};

enum class RelationKind { qq, kk, vv };

std::string relation_kind_name(RelationKind kind);
RelationKind parse_relation_kind(const std::string& text);

struct DistillConfig {
  std::size_t relation_heads = 4;
  /// Teacher layer to mimic; the last layer when unset.
  std::optional<std::size_t> teacher_layer;
  std::set<RelationKind> relation_kinds{RelationKind::qq, RelationKind::kk, RelationKind::vv};

  /// Checks head divisibility against both widths and the layer index.
  void validate(const model::ModelConfig& teacher, const model::ModelConfig& student) const;
};

}  // namespace quala::training
