#include "quala/training/config.hpp"

#include <algorithm>

#include "quala/errors.hpp"

namespace quala::training {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigurationError("batch_size must be at least 1");
  if (!(learning_rate >= 0.0)) throw ConfigurationError("learning_rate must be non-negative");
  if (!(p_max >= 0.0 && p_max < 1.0)) throw ConfigurationError("p_max must lie in [0, 1)");
  if (!(p_layerdrop >= 0.0 && p_layerdrop < 1.0)) throw ConfigurationError("p_layerdrop must lie in [0, 1)");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigurationError("Adam betas must lie in [0, 1)");
  if (!(adam.epsilon > 0.0)) throw ConfigurationError("Adam epsilon must be positive");
  if (!(adam.weight_decay >= 0.0)) throw ConfigurationError("weight_decay must be non-negative");
  if (log_every == 0) throw ConfigurationError("log_every must be at least 1");
}

std::size_t TrainConfig::planned_steps(std::size_t examples) const {
  const std::size_t per_epoch = (examples + batch_size - 1) / batch_size;
  const std::size_t total = per_epoch * epochs;
  return max_steps ? std::min(max_steps, total) : total;
}

double TrainConfig::learning_rate_at(std::size_t step, std::size_t total) const {
  if (warmup_steps && step < warmup_steps) return learning_rate * double(step + 1) / double(warmup_steps);
  if (!linear_decay || total <= warmup_steps) return learning_rate;
  const double remaining = double(total - std::min(step, total)) / double(total - warmup_steps);
  return learning_rate * remaining;
}

std::string relation_kind_name(RelationKind kind) {
  switch (kind) {
    case RelationKind::qq: return "QQ";
    case RelationKind::kk: return "KK";
    case RelationKind::vv: return "VV";
  }
  return "?";
}

RelationKind parse_relation_kind(const std::string& text) {
  if (text == "QQ" || text == "qq") return RelationKind::qq;
  if (text == "KK" || text == "kk") return RelationKind::kk;
  if (text == "VV" || text == "vv") return RelationKind::vv;
  throw ConfigurationError("unknown relation kind '" + text + "'");
}

void DistillConfig::validate(const model::ModelConfig& teacher, const model::ModelConfig& student) const {
  if (relation_heads == 0) throw ConfigurationError("relation_heads must be at least 1");
  if (teacher.hidden_size % relation_heads || student.hidden_size % relation_heads) {
    throw ConfigurationError("relation_heads " + std::to_string(relation_heads) + " must divide both widths (" +
                             std::to_string(teacher.hidden_size) + ", " + std::to_string(student.hidden_size) + ")");
  }
  if (teacher_layer && *teacher_layer >= teacher.num_layers)
    throw ConfigurationError("teacher_layer " + std::to_string(*teacher_layer) + " out of range");
  if (relation_kinds.empty()) throw ConfigurationError("relation_kinds must not be empty");
}

}  // namespace quala::training
