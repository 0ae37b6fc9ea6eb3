#include "quala/model/params.hpp"

#include "quala/errors.hpp"

namespace quala::model {

using numerics::Shape;
using numerics::Tensor;
using numerics::Var;

namespace {

// Builds a ParamSet of shapes so names and shapes come from one place.
ParamSet<Shape> shape_set(const ModelConfig& c) {
  const std::size_t d = c.hidden_size, f = c.ffn_size;
  ParamSet<Shape> s;
  s.token_embedding = {c.vocab_size, d};
  s.position_embedding = {c.max_positions, d};
  if (c.type_vocab_size > 0) s.type_embedding = Shape{c.type_vocab_size, d};
  s.embedding_norm_gain = {d};
  s.embedding_norm_bias = {d};
  s.layers.resize(c.num_layers);
  for (auto& l : s.layers) {
    l.query_weight = l.key_weight = l.value_weight = l.output_weight = {d, d};
    l.query_bias = l.key_bias = l.value_bias = l.output_bias = {d};
    l.attention_norm_gain = l.attention_norm_bias = {d};
    l.ffn_in_weight = {d, f};
    l.ffn_in_bias = {f};
    l.ffn_out_weight = {f, d};
    l.ffn_out_bias = {d};
    l.ffn_norm_gain = l.ffn_norm_bias = {d};
  }
  s.span_weight = {d, 2};
  s.span_bias = {2};
  return s;
}

enum class InitKind { normal, zero, one };

InitKind init_kind(const std::string& name) {
  if (name.ends_with(".gain")) return InitKind::one;
  if (name.ends_with(".bias")) return InitKind::zero;
  return InitKind::normal;
}

template <typename T>
Parameters<T> make_params(const ModelConfig& config, numerics::Rng* rng) {
  config.validate();
  ParamSet<Shape> shapes = shape_set(config);
  Parameters<T> p;
  p.config = config;
  p.tensors.layers.resize(config.num_layers);
  if (shapes.type_embedding) p.tensors.type_embedding.emplace();
  std::vector<std::pair<std::string, Shape>> specs;
  for_each_named(shapes, [&](const std::string& name, const Shape& s) { specs.emplace_back(name, s); });
  std::size_t i = 0;
  for_each_named(p.tensors, [&](const std::string& name, Tensor<T>& t) {
    t = Tensor<T>(specs[i++].second);
    switch (init_kind(name)) {
      case InitKind::one:
        for (T& v : t.data()) v = T(1);
        break;
      case InitKind::zero:
        break;
      case InitKind::normal:
        if (rng) {
          for (T& v : t.data()) v = static_cast<T>(0.02 * rng->normal());
        }
        break;
    }
  });
  return p;
}

}  // namespace

std::vector<TensorSpec> parameter_specs(const ModelConfig& config) {
  config.validate();
  ParamSet<Shape> shapes = shape_set(config);
  std::vector<TensorSpec> out;
  for_each_named(shapes, [&](const std::string& name, const Shape& s) { out.push_back({name, s}); });
  return out;
}

bool is_projection_weight(const std::string& name) {
  if (!name.starts_with("layer.")) return false;
  return name.ends_with("attention.query.weight") || name.ends_with("attention.key.weight") ||
         name.ends_with("attention.value.weight") || name.ends_with("attention.output.weight") ||
         name.ends_with("ffn.in.weight") || name.ends_with("ffn.out.weight");
}

template <typename T>
Parameters<T> init_params(const ModelConfig& config, numerics::Rng& rng) {
  return make_params<T>(config, &rng);
}

template <typename T>
Parameters<T> zero_params(const ModelConfig& config) {
  return make_params<T>(config, nullptr);
}

template <typename T>
ParamSet<Var> bind(numerics::Graph<T>& graph, const Parameters<T>& params, bool trainable) {
  ParamSet<Var> out;
  out.layers.resize(params.tensors.layers.size());
  if (params.tensors.type_embedding) out.type_embedding.emplace();
  std::vector<Var> vars;
  for_each_named(params.tensors, [&](const std::string&, const Tensor<T>& t) {
    vars.push_back(trainable ? graph.parameter(t) : graph.input(t));
  });
  std::size_t i = 0;
  for_each_named(out, [&](const std::string&, Var& v) { v = vars[i++]; });
  return out;
}

template <typename T>
ParamSet<Tensor<T>> collect_grads(const numerics::Graph<T>& graph, const ParamSet<Var>& bound) {
  ParamSet<Tensor<T>> out;
  out.layers.resize(bound.layers.size());
  if (bound.type_embedding) out.type_embedding.emplace();
  std::vector<Var> vars;
  for_each_named(bound, [&](const std::string&, const Var& v) { vars.push_back(v); });
  std::size_t i = 0;
  for_each_named(out, [&](const std::string&, Tensor<T>& t) { t = graph.grad(vars[i++]); });
  return out;
}

template Parameters<float> init_params(const ModelConfig&, numerics::Rng&);
template Parameters<double> init_params(const ModelConfig&, numerics::Rng&);
template Parameters<float> zero_params(const ModelConfig&);
template Parameters<double> zero_params(const ModelConfig&);
template ParamSet<Var> bind(numerics::Graph<float>&, const Parameters<float>&, bool);
template ParamSet<Var> bind(numerics::Graph<double>&, const Parameters<double>&, bool);
template ParamSet<Tensor<float>> collect_grads(const numerics::Graph<float>&, const ParamSet<Var>&);
template ParamSet<Tensor<double>> collect_grads(const numerics::Graph<double>&, const ParamSet<Var>&);

}  // namespace quala::model
