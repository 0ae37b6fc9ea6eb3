#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "quala/model/config.hpp"
#include "quala/model/params.hpp"

namespace quala::costmodel {

/// Named tensors stored as int8 with one fp32 scale per output channel; all
/// other tensors stay fp32.
struct QuantPlan {
  std::set<std::string> quantized;

  static QuantPlan none() { return {}; }
  /// Every attention-projection and FFN weight matrix of every layer.
  static QuantPlan projections(const model::ModelConfig& config);
  bool contains(const std::string& name) const { return quantized.contains(name); }
};

struct CostReport {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::uint64_t bytes_fp32 = 0;
  std::uint64_t bytes_quantized = 0;
};

struct SizeEstimate {
  std::uint64_t bytes = 0;
  double mib() const { return static_cast<double>(bytes) / (1024.0 * 1024.0); }
};

/// Σ_i [4·m_i·d² + 2·m_i²·d + 2·l_i·d·d_ff] with m₁ = n and m_{i+1} = l_i.
/// Attention projections, scores and context run on the incoming tokens and
/// the FFN on the retained ones; embeddings, norms, softmax, biases and the
/// span head are not counted. `lc` is clamped to n the same way the forward
/// pass clamps it.
std::uint64_t flops_count(const model::ModelConfig& config, std::size_t n, const model::LengthConfiguration& lc);
std::uint64_t flops_count_full(const model::ModelConfig& config, std::size_t n);

/// Parameter count of the model described by `config`, including word,
/// position and type tables (no pooler).
std::uint64_t param_count(const model::ModelConfig& config);
std::uint64_t param_count(const std::vector<model::TensorSpec>& specs);

/// fp32 tensors at 4 bytes/element; planned tensors at 1 byte/element plus 4
/// bytes per output-channel scale.
SizeEstimate size_estimate(const std::vector<model::TensorSpec>& specs, const QuantPlan& plan);
SizeEstimate size_estimate(const model::ModelConfig& config, const QuantPlan& plan);

CostReport cost_report(const model::ModelConfig& config, std::size_t n, const model::LengthConfiguration& lc,
                       const QuantPlan& plan);

double flops_ratio(std::uint64_t reference_macs, std::uint64_t model_macs);

/// Architecture presets used for the size and FLOPs reproductions.
struct Preset {
  std::string name;
  model::ModelConfig config;
};
const std::vector<Preset>& presets();
/// Throws ConfigurationError for an unknown name.
model::ModelConfig preset(const std::string& name);

}  // namespace quala::costmodel
