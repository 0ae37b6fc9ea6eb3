#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "quala/model/params.hpp"
#include "quala/quant/quant.hpp"

namespace quala::workbench {

// File layout, all integers little-endian:
//
//   "QLML" | u32 version | u64 header length | header (JSON) | payload
//
// The header records the kind (fp32 or quantized), the training stage, the
// architecture and a directory with one entry per parameter tensor:
// {name, dtype, shape, offset, nbytes} plus, for i8 entries, the index of a
// weight quantization record. Quantization records hold the scheme and zero
// point; their per-channel f32 scales live in the payload at
// {scale_offset, scale_nbytes}. Activation ranges are listed per weight name
// with a one-element scale region each. Payload regions tile the payload in
// directory order with no gaps.

inline constexpr char checkpoint_magic[4] = {'Q', 'L', 'M', 'L'};
inline constexpr std::uint32_t checkpoint_version = 1;

enum class CheckpointKind { fp32, quantized };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::fp32;
  /// For quantized checkpoints, quantized weights hold dequantized values.
  model::Parameters<float> params;
  std::optional<quant::QuantizedModel> quantized;
};

std::string encode_checkpoint(const model::Parameters<float>& params);
std::string encode_checkpoint(const quant::QuantizedModel& qmodel);
/// Throws FormatError naming the offending entry; `label` prefixes messages.
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& label = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const model::Parameters<float>& params);
void save_checkpoint(const std::filesystem::path& path, const quant::QuantizedModel& qmodel);
Checkpoint load_checkpoint(const std::filesystem::path& path);

model::TrainingStage parse_stage(const std::string& text);

/// Whole-file helpers shared by the artifact writers.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace quala::workbench
