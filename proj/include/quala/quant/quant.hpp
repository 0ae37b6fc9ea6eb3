#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quala/costmodel/costmodel.hpp"
#include "quala/model/forward.hpp"
#include "quala/numerics/tensor.hpp"

namespace quala::quant {

using numerics::Tensor;

enum class Scheme : std::uint32_t {
  /// int8 codes in [−127, 127], one scale per output column, zero point 0.
  symmetric_per_channel = 0,
  /// uint8 codes in [0, 255], one scale and zero point for the whole tensor.
  asymmetric_per_tensor = 1,
};

/// Affine map r = S·(q − Z).
struct QuantParams {
  Scheme scheme = Scheme::asymmetric_per_tensor;
  std::vector<float> scale;
  std::int32_t zero_point = 0;

  std::int32_t q_min() const { return scheme == Scheme::symmetric_per_channel ? -127 : 0; }
  std::int32_t q_max() const { return scheme == Scheme::symmetric_per_channel ? 127 : 255; }
  /// Throws ContractError unless every scale is positive and Z is in range.
  void validate() const;

  bool operator==(const QuantParams&) const = default;
};

/// Running extrema of one observed tensor.
struct RangeStats {
  float min = 0.0f;
  float max = 0.0f;
  std::size_t count = 0;

  void observe(std::span<const float> values);
  void merge(const RangeStats& other);
  bool operator==(const RangeStats&) const = default;
};

struct CalibrationStats {
  /// Keyed by the name of the weight the observed activation multiplies.
  std::map<std::string, RangeStats> tensors;

  void merge(const CalibrationStats& other);
  bool operator==(const CalibrationStats&) const = default;
};

struct QuantizedTensor {
  numerics::Shape shape;
  QuantParams params;
  /// One code per element in row-major order, within [q_min, q_max].
  std::vector<std::int32_t> codes;

  bool operator==(const QuantizedTensor&) const = default;
};

/// S = (max − min)/255 and Z = clamp(round(−min/S), 0, 255) over the range
/// widened to contain 0. A collapsed range becomes [−1e-8, 1e-8].
QuantParams compute_qparams(const RangeStats& stats);

/// S_c = max|w[:, c]|/127 for every column c of a [k×n] weight; Z = 0.
QuantParams compute_weight_qparams(const Tensor<float>& weight);

/// q = clamp(round(x/S) + Z), rounding half away from zero.
QuantizedTensor quantize_tensor(const Tensor<float>& x, const QuantParams& qp);
Tensor<float> dequantize(const QuantizedTensor& qt);

/// Integer GEMM: acc = Σ_k (q_x − Z_x)·q_w in int32, out = S_x·S_w[c]·acc + bias.
/// Counts m·k·n MACs. Requires k ≤ 2¹⁵.
Tensor<float> quantized_linear(const QuantizedTensor& x, const QuantizedTensor& w, const Tensor<float>& bias);

inline constexpr std::size_t max_inner_dim = std::size_t{1} << 15;

/// Name of the weight used at (layer, site).
std::string weight_name(std::size_t layer, model::LinearSite site);

using CalibrationBatch = std::vector<std::vector<model::TokenId>>;

/// Min/max of every projection input over full-length fp32 forward passes.
CalibrationStats collect_stats(const model::Parameters<float>& params, std::span<const CalibrationBatch> batches);

struct QuantizedModel {
  /// fp32 tensors; each quantized weight holds its dequantized value.
  model::Parameters<float> params;
  std::map<std::string, QuantizedTensor> weights;
  /// Input activation parameters, keyed like `weights`.
  std::map<std::string, QuantParams> activations;

  costmodel::QuantPlan plan() const;
  bool operator==(const QuantizedModel&) const = default;
};

/// Calibrates activations and quantizes every projection and FFN weight.
QuantizedModel quantize_model(const model::Parameters<float>& params, std::span<const CalibrationBatch> batches);

/// Assembles a model from stored pieces; checks that every projection weight
/// has a code tensor and an activation range.
QuantizedModel assemble_quantized(model::Parameters<float> params, std::map<std::string, QuantizedTensor> weights,
                                  std::map<std::string, QuantParams> activations);

/// Routes every projection through quantized_linear.
class QuantizedLinear final : public model::LinearHook<float> {
 public:
  explicit QuantizedLinear(const QuantizedModel& model);
  numerics::Var linear(numerics::Graph<float>& graph, std::size_t layer, model::LinearSite site, numerics::Var x,
                       numerics::Var weight, numerics::Var bias) override;

 private:
  struct Site {
    const QuantizedTensor* weight;
    const QuantParams* activation;
  };
  std::vector<std::array<Site, 6>> sites_;
};

model::ForwardResult<float> forward_quantized_adaptive(const QuantizedModel& qmodel,
                                                       std::span<const model::TokenId> tokens,
                                                       const model::LengthConfiguration& lc,
                                                       std::size_t max_span_len);
model::ForwardResult<float> forward_quantized_full(const QuantizedModel& qmodel,
                                                   std::span<const model::TokenId> tokens, std::size_t max_span_len);

}  // namespace quala::quant
