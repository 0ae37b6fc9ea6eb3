#include "quala/costmodel/costmodel.hpp"

#include "quala/errors.hpp"
#include "quala/numerics/tensor.hpp"

namespace quala::costmodel {

QuantPlan QuantPlan::projections(const model::ModelConfig& config) {
  QuantPlan plan;
  for (const auto& spec : model::parameter_specs(config)) {
    if (model::is_projection_weight(spec.name)) plan.quantized.insert(spec.name);
  }
  return plan;
}

std::uint64_t flops_count(const model::ModelConfig& config, std::size_t n, const model::LengthConfiguration& lc) {
  if (lc.size() != config.num_layers) {
    throw ConfigurationError("length configuration " + lc.to_string() + " does not have " +
                             std::to_string(config.num_layers) + " entries");
  }
  const model::LengthConfiguration retain = model::LengthConfiguration(lc.retain()).clamped(n);
  const std::uint64_t d = config.hidden_size, ff = config.ffn_size;
  std::uint64_t total = 0;
  std::uint64_t m = n;
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    const std::uint64_t l = retain[i];
    total += 4 * m * d * d + 2 * m * m * d + 2 * l * d * ff;
    m = l;
  }
  return total;
}

std::uint64_t flops_count_full(const model::ModelConfig& config, std::size_t n) {
  return flops_count(config, n, model::LengthConfiguration::full(n, config.num_layers));
}

std::uint64_t param_count(const std::vector<model::TensorSpec>& specs) {
  std::uint64_t total = 0;
  for (const auto& s : specs) total += numerics::shape_numel(s.shape);
  return total;
}

std::uint64_t param_count(const model::ModelConfig& config) { return param_count(model::parameter_specs(config)); }

SizeEstimate size_estimate(const std::vector<model::TensorSpec>& specs, const QuantPlan& plan) {
  SizeEstimate est;
  for (const auto& s : specs) {
    const std::uint64_t numel = numerics::shape_numel(s.shape);
    if (plan.contains(s.name)) {
      est.bytes += numel + 4 * static_cast<std::uint64_t>(s.shape.back());
    } else {
      est.bytes += 4 * numel;
    }
  }
  return est;
}

SizeEstimate size_estimate(const model::ModelConfig& config, const QuantPlan& plan) {
  return size_estimate(model::parameter_specs(config), plan);
}

CostReport cost_report(const model::ModelConfig& config, std::size_t n, const model::LengthConfiguration& lc,
                       const QuantPlan& plan) {
  const auto specs = model::parameter_specs(config);
  CostReport r;
  r.macs = flops_count(config, n, lc);
  r.params = param_count(specs);
  r.bytes_fp32 = size_estimate(specs, QuantPlan::none()).bytes;
  r.bytes_quantized = size_estimate(specs, plan).bytes;
  return r;
}

double flops_ratio(std::uint64_t reference_macs, std::uint64_t model_macs) {
  if (model_macs == 0) throw ContractError("flops_ratio: model MACs are zero");
  return static_cast<double>(reference_macs) / static_cast<double>(model_macs);
}

namespace {

model::ModelConfig make(std::size_t layers, std::size_t d, std::size_t heads, std::size_t ff, std::size_t vocab,
                        std::size_t pos, std::size_t types) {
  model::ModelConfig c;
  c.num_layers = layers;
  c.hidden_size = d;
  c.num_heads = heads;
  c.ffn_size = ff;
  c.vocab_size = vocab;
  c.max_positions = pos;
  c.type_vocab_size = types;
  return c;
}

}  // namespace

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = {
      {"bert-base", make(12, 768, 12, 3072, 30522, 512, 2)},
      {"tinybert", make(6, 768, 12, 3072, 30522, 512, 2)},
      {"minilm", make(6, 384, 12, 1536, 50265, 514, 1)},
      {"toy-teacher", make(4, 64, 4, 256, 64, 64, 0)},
      {"toy-student", make(2, 32, 4, 128, 64, 64, 0)},
  };
  return all;
}

model::ModelConfig preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p.config;
  std::string known;
  for (const auto& p : presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigurationError("unknown preset '" + name + "' (known: " + known + ")");
}

}  // namespace quala::costmodel
