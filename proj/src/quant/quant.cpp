#include "quala/quant/quant.hpp"

#include <algorithm>
#include <cmath>

#include "quala/errors.hpp"
#include "quala/numerics/mac_counter.hpp"

namespace quala::quant {

using numerics::Graph;
using numerics::Var;

void QuantParams::validate() const {
  if (scale.empty()) throw ContractError("quantization parameters without a scale");
  for (float s : scale)
    if (!(s > 0.0f) || !std::isfinite(s)) throw ContractError("quantization scale must be positive and finite");
  if (zero_point < q_min() || zero_point > q_max()) throw ContractError("zero point outside the code range");
  if (scheme == Scheme::symmetric_per_channel && zero_point != 0)
    throw ContractError("symmetric quantization requires a zero point of 0");
}

void RangeStats::observe(std::span<const float> values) {
  if (values.empty()) return;
  for (float v : values)
    if (!std::isfinite(v)) throw NumericError("calibration observed a non-finite activation");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (count == 0) {
    min = *lo;
    max = *hi;
  } else {
    min = std::min(min, *lo);
    max = std::max(max, *hi);
  }
  ++count;
}

void RangeStats::merge(const RangeStats& other) {
  if (other.count == 0) return;
  if (count == 0) {
    *this = other;
    return;
  }
  min = std::min(min, other.min);
  max = std::max(max, other.max);
  count += other.count;
}

void CalibrationStats::merge(const CalibrationStats& other) {
  for (const auto& [name, s] : other.tensors) tensors[name].merge(s);
}

QuantParams compute_qparams(const RangeStats& stats) {
  if (stats.count == 0) throw ContractError("quantization parameters need at least one observation");
  if (!std::isfinite(stats.min) || !std::isfinite(stats.max)) throw NumericError("non-finite calibration range");
  if (stats.min > stats.max) throw ContractError("calibration range has min > max");
  double lo = std::min(0.0, double(stats.min));
  double hi = std::max(0.0, double(stats.max));
  if (hi - lo <= 0.0) {
    lo = -1e-8;
    hi = 1e-8;
  }
  QuantParams qp;
  qp.scheme = Scheme::asymmetric_per_tensor;
  const float s = float((hi - lo) / 255.0);
  qp.scale = {s};
  qp.zero_point = std::int32_t(std::clamp(std::round(-lo / double(s)), 0.0, 255.0));
  return qp;
}

QuantParams compute_weight_qparams(const Tensor<float>& weight) {
  if (weight.rank() != 2) throw DimensionError("per-channel weight quantization expects a matrix");
  const std::size_t k = weight.rows(), n = weight.cols();
  std::vector<double> peak(n, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const float w = weight.at(r, c);
      if (!std::isfinite(w)) throw NumericError("non-finite weight");
      peak[c] = std::max(peak[c], double(std::abs(w)));
    }
  QuantParams qp;
  qp.scheme = Scheme::symmetric_per_channel;
  qp.zero_point = 0;
  qp.scale.resize(n);
  for (std::size_t c = 0; c < n; ++c) qp.scale[c] = float((peak[c] > 0.0 ? peak[c] : 1e-8) / 127.0);
  return qp;
}

namespace {

std::size_t channel_count(const QuantParams& qp, const numerics::Shape& shape) {
  if (qp.scheme == Scheme::asymmetric_per_tensor) {
    if (qp.scale.size() != 1) throw ContractError("per-tensor quantization takes exactly one scale");
    return 1;
  }
  if (shape.size() != 2) throw DimensionError("per-channel quantization expects a matrix");
  if (qp.scale.size() != shape[1])
    throw ContractError("per-channel quantization needs " + std::to_string(shape[1]) + " scales, got " +
                        std::to_string(qp.scale.size()));
  return shape[1];
}

}  // namespace

QuantizedTensor quantize_tensor(const Tensor<float>& x, const QuantParams& qp) {
  qp.validate();
  const std::size_t channels = channel_count(qp, x.shape());
  QuantizedTensor out{x.shape(), qp, std::vector<std::int32_t>(x.numel())};
  const double lo = qp.q_min(), hi = qp.q_max();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double s = qp.scale[channels == 1 ? 0 : i % channels];
    const double q = std::round(double(x[i]) / s) + qp.zero_point;
    out.codes[i] = std::int32_t(std::clamp(q, lo, hi));
  }
  return out;
}

Tensor<float> dequantize(const QuantizedTensor& qt) {
  const std::size_t channels = channel_count(qt.params, qt.shape);
  Tensor<float> out(qt.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double s = qt.params.scale[channels == 1 ? 0 : i % channels];
    out[i] = float(s * double(qt.codes[i] - qt.params.zero_point));
  }
  return out;
}

Tensor<float> quantized_linear(const QuantizedTensor& x, const QuantizedTensor& w, const Tensor<float>& bias) {
  if (x.params.scheme != Scheme::asymmetric_per_tensor || w.params.scheme != Scheme::symmetric_per_channel)
    throw ContractError("quantized_linear expects per-tensor activations and per-channel weights");
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[0])
    throw DimensionError("quantized_linear: cannot multiply " + numerics::shape_string(x.shape) + " by " +
                         numerics::shape_string(w.shape));
  const std::size_t m = x.shape[0], k = x.shape[1], n = w.shape[1];
  if (k > max_inner_dim)
    throw ContractError("quantized_linear: inner dimension " + std::to_string(k) + " exceeds the int32 accumulator bound");
  if (bias.numel() != n) throw DimensionError("quantized_linear: bias length does not match the output width");
  channel_count(w.params, w.shape);

  Tensor<float> out(numerics::Shape{m, n});
  std::vector<std::int32_t> acc(n);
  const std::int32_t zx = x.params.zero_point;
  const double sx = x.params.scale[0];
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::int32_t a = x.codes[i * k + kk] - zx;
      if (a == 0) continue;
      const std::int32_t* wrow = w.codes.data() + kk * n;
      for (std::size_t c = 0; c < n; ++c) acc[c] += a * wrow[c];
    }
    for (std::size_t c = 0; c < n; ++c)
      out.at(i, c) = float(sx * double(w.params.scale[c]) * double(acc[c])) + bias[c];
  }
  numerics::add_macs(std::uint64_t(m) * k * n);
  return out;
}

std::string weight_name(std::size_t layer, model::LinearSite site) {
  const std::string p = "layer." + std::to_string(layer) + ".";
  switch (site) {
    case model::LinearSite::query: return p + "attention.query.weight";
    case model::LinearSite::key: return p + "attention.key.weight";
    case model::LinearSite::value: return p + "attention.value.weight";
    case model::LinearSite::attention_output: return p + "attention.output.weight";
    case model::LinearSite::ffn_in: return p + "ffn.in.weight";
    case model::LinearSite::ffn_out: return p + "ffn.out.weight";
  }
  throw ContractError("unknown linear site");
}

namespace {

class RangeObserver final : public model::LinearHook<float> {
 public:
  explicit RangeObserver(CalibrationStats& stats) : stats_(stats) {}
  Var linear(Graph<float>& g, std::size_t layer, model::LinearSite site, Var x, Var w, Var b) override {
    stats_.tensors[weight_name(layer, site)].observe(g.value(x).data());
    return g.linear(x, w, b);
  }

 private:
  CalibrationStats& stats_;
};

constexpr std::array<model::LinearSite, 6> all_sites{model::LinearSite::query,          model::LinearSite::key,
                                                     model::LinearSite::value,          model::LinearSite::attention_output,
                                                     model::LinearSite::ffn_in,         model::LinearSite::ffn_out};

}  // namespace

CalibrationStats collect_stats(const model::Parameters<float>& params, std::span<const CalibrationBatch> batches) {
  if (batches.empty()) throw ContractError("calibration needs at least one batch");
  CalibrationStats total;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (batches[b].empty()) throw ContractError("calibration batch " + std::to_string(b) + " is empty");
    CalibrationStats batch_stats;
    RangeObserver observer(batch_stats);
    model::Encoder<float> encoder(params, &observer);
    for (const auto& tokens : batches[b]) encoder.full(tokens, 1);
    total.merge(batch_stats);
  }
  return total;
}

costmodel::QuantPlan QuantizedModel::plan() const {
  costmodel::QuantPlan p;
  for (const auto& [name, _] : weights) p.quantized.insert(name);
  return p;
}

QuantizedModel assemble_quantized(model::Parameters<float> params, std::map<std::string, QuantizedTensor> weights,
                                  std::map<std::string, QuantParams> activations) {
  for (std::size_t layer = 0; layer < params.config.num_layers; ++layer) {
    for (auto site : all_sites) {
      const auto name = weight_name(layer, site);
      if (!weights.contains(name)) throw FormatError("quantized model is missing weight codes for " + name);
      if (!activations.contains(name)) throw FormatError("quantized model is missing the activation range for " + name);
      weights.at(name).params.validate();
      activations.at(name).validate();
    }
  }
  for (const auto& [name, _] : weights)
    if (!model::is_projection_weight(name)) throw FormatError("unexpected quantized tensor " + name);
  return QuantizedModel{std::move(params), std::move(weights), std::move(activations)};
}

QuantizedModel quantize_model(const model::Parameters<float>& params, std::span<const CalibrationBatch> batches) {
  const auto stats = collect_stats(params, batches);
  QuantizedModel qm;
  qm.params = params;
  model::for_each_named(qm.params.tensors, [&](const std::string& name, Tensor<float>& t) {
    if (!model::is_projection_weight(name)) return;
    auto q = quantize_tensor(t, compute_weight_qparams(t));
    t = dequantize(q);
    qm.weights.emplace(name, std::move(q));
    const auto it = stats.tensors.find(name);
    if (it == stats.tensors.end()) throw ContractError("calibration never reached " + name);
    qm.activations.emplace(name, compute_qparams(it->second));
  });
  return qm;
}

QuantizedLinear::QuantizedLinear(const QuantizedModel& model) {
  sites_.resize(model.params.config.num_layers);
  for (std::size_t layer = 0; layer < sites_.size(); ++layer)
    for (std::size_t s = 0; s < all_sites.size(); ++s) {
      const auto name = weight_name(layer, all_sites[s]);
      sites_[layer][s] = {&model.weights.at(name), &model.activations.at(name)};
    }
}

Var QuantizedLinear::linear(Graph<float>& graph, std::size_t layer, model::LinearSite site, Var x, Var, Var bias) {
  const Site& s = sites_.at(layer)[std::size_t(site)];
  const auto xq = quantize_tensor(graph.value(x), *s.activation);
  return graph.input(quantized_linear(xq, *s.weight, graph.value(bias)));
}

model::ForwardResult<float> forward_quantized_adaptive(const QuantizedModel& qmodel,
                                                       std::span<const model::TokenId> tokens,
                                                       const model::LengthConfiguration& lc,
                                                       std::size_t max_span_len) {
  QuantizedLinear hook(qmodel);
  model::Encoder<float> encoder(qmodel.params, &hook);
  return encoder.adaptive(tokens, lc, max_span_len);
}

model::ForwardResult<float> forward_quantized_full(const QuantizedModel& qmodel,
                                                   std::span<const model::TokenId> tokens, std::size_t max_span_len) {
  QuantizedLinear hook(qmodel);
  model::Encoder<float> encoder(qmodel.params, &hook);
  return encoder.full(tokens, max_span_len);
}

}  // namespace quala::quant
