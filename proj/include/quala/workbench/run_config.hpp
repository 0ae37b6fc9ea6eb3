#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "quala/model/config.hpp"
#include "quala/search/search.hpp"
#include "quala/training/config.hpp"
#include "quala/workbench/dataset.hpp"

namespace quala::workbench {

struct QuantSettings {
  /// Only "projections" (every attention-projection and FFN weight) is known.
  std::string plan = "projections";
  std::size_t calibration_batches = 4;
  std::size_t calibration_batch_size = 32;
};

struct SummarySettings {
  /// The adaptive rows use the best frontier member within this fraction of
  /// the full-length MACs.
  double budget_fraction = 0.7;
};

/// Everything one pipeline run depends on. Stage seeds are derived from
/// `seed`, so the per-stage `seed` fields of the training configs are not
/// serialized.
struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "run";
  GeneratorSettings data;
  model::ModelConfig teacher;
  model::ModelConfig student;
  training::TrainConfig teacher_training;
  training::DistillConfig distillation;
  training::TrainConfig distill_training;
  training::TrainConfig finetune;
  training::TrainConfig length_adaptive;
  search::SearchConfig search;
  QuantSettings quant;
  SummarySettings summary;

  /// Toy presets with the tuned defaults.
  static RunConfig defaults();

  /// Throws ConfigurationError on any inconsistent setting.
  void validate() const;
};

/// Key order is fixed, so equal configs serialize to equal bytes.
std::string to_json(const RunConfig& rc);
/// Missing keys keep their defaults; unknown keys are rejected with
/// ConfigurationError naming the key path.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Per-stage seed: a pure function of the run seed and the stage tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage);

}  // namespace quala::workbench
