#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "quala/errors.hpp"
#include "quala/search/search.hpp"
#include "quala/training/evaluate.hpp"
#include "quala/workbench/checkpoint.hpp"
#include "quala/workbench/run_config.hpp"

namespace quala::workbench {

/// A stage failed; earlier artifacts stay on disk.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("stage '" + stage + "' failed: " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Artifact locations inside a run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "run_config.json"; }
  std::filesystem::path dataset(const std::string& split) const { return root / "data" / (split + ".jsonl"); }
  std::filesystem::path checkpoint(const std::string& name) const { return root / "checkpoints" / (name + ".qlml"); }
  std::filesystem::path metrics(const std::string& name) const { return root / "metrics" / (name + ".csv"); }
  std::filesystem::path pareto() const { return root / "pareto.csv"; }
  std::filesystem::path search_history() const { return root / "search_history.csv"; }
  std::filesystem::path summary() const { return root / "summary.csv"; }
};

// Checkpoint names.
inline constexpr const char* teacher_ckpt = "teacher";
inline constexpr const char* distilled_ckpt = "student_distilled";
inline constexpr const char* finetuned_ckpt = "student_finetuned";
inline constexpr const char* adaptive_ckpt = "student_length_adaptive";
inline constexpr const char* quantized_ckpt = "student_quantized";

// Seed tags passed to derive_seed.
enum SeedTag : std::uint64_t {
  teacher_init_seed = 1,
  teacher_train_seed = 2,
  student_init_seed = 3,
  distill_seed = 4,
  finetune_seed = 5,
  lat_seed = 6,
  search_seed = 7,
};

// Each stage reads its inputs from the run directory and writes its outputs
// there. `log` receives one progress line per stage when non-null.
void stage_gen_data(const RunConfig& rc, std::ostream* log = nullptr);
void stage_train_teacher(const RunConfig& rc, std::ostream* log = nullptr);
void stage_distill(const RunConfig& rc, std::ostream* log = nullptr);
void stage_finetune(const RunConfig& rc, std::ostream* log = nullptr);
void stage_lat(const RunConfig& rc, std::ostream* log = nullptr);
void stage_search(const RunConfig& rc, std::ostream* log = nullptr);
void stage_quantize(const RunConfig& rc, std::ostream* log = nullptr);
void stage_summary(const RunConfig& rc, std::ostream* log = nullptr);

/// Writes run_config.json, then runs every stage in order.
void run_pipeline(const RunConfig& rc, std::ostream* log = nullptr);

/// Rebuilds the frontier from pareto.csv.
search::ParetoFront read_pareto_csv(const std::filesystem::path& path);

/// Scores a checkpoint on `data`; quantized checkpoints run through the
/// integer kernels.
training::SpanMetrics evaluate_checkpoint(const Checkpoint& ck, std::span<const training::Example> data,
                                          const std::optional<model::LengthConfiguration>& lc,
                                          std::size_t max_span_len);

struct SummaryRow {
  std::string model;
  double size_mib = 0;
  model::LengthConfiguration lc;
  double token_f1 = 0;
  double exact_match = 0;
  std::uint64_t macs = 0;
};

std::string summary_csv(std::span<const SummaryRow> rows);

/// The split the summary rows and `eval` default to.
inline constexpr const char* summary_split = "test";

}  // namespace quala::workbench
