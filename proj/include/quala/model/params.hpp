#pragma once

#include <optional>
#include <string>
#include <vector>

#include "quala/model/config.hpp"
#include "quala/numerics/graph.hpp"
#include "quala/numerics/rng.hpp"
#include "quala/numerics/tensor.hpp"

namespace quala::model {

/// One encoder layer. Field is a Tensor for stored weights or a Var once the
/// weights are bound into a graph.
template <typename Field>
struct LayerSet {
  Field query_weight, query_bias;
  Field key_weight, key_bias;
  Field value_weight, value_bias;
  Field output_weight, output_bias;
  Field attention_norm_gain, attention_norm_bias;
  Field ffn_in_weight, ffn_in_bias;
  Field ffn_out_weight, ffn_out_bias;
  Field ffn_norm_gain, ffn_norm_bias;

  bool operator==(const LayerSet&) const = default;
};

template <typename Field>
struct ParamSet {
  Field token_embedding;
  Field position_embedding;
  std::optional<Field> type_embedding;
  Field embedding_norm_gain, embedding_norm_bias;
  std::vector<LayerSet<Field>> layers;
  Field span_weight, span_bias;

  bool operator==(const ParamSet&) const = default;
};

/// Visits every (name, field) pair in canonical order. The name set is fully
/// determined by the layer count and the presence of a type table.
template <typename Set, typename Fn>
void for_each_named(Set& set, Fn&& fn) {
  fn(std::string("embeddings.token"), set.token_embedding);
  fn(std::string("embeddings.position"), set.position_embedding);
  if (set.type_embedding) fn(std::string("embeddings.type"), *set.type_embedding);
  fn(std::string("embeddings.norm.gain"), set.embedding_norm_gain);
  fn(std::string("embeddings.norm.bias"), set.embedding_norm_bias);
  for (std::size_t i = 0; i < set.layers.size(); ++i) {
    auto& l = set.layers[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    fn(p + "attention.query.weight", l.query_weight);
    fn(p + "attention.query.bias", l.query_bias);
    fn(p + "attention.key.weight", l.key_weight);
    fn(p + "attention.key.bias", l.key_bias);
    fn(p + "attention.value.weight", l.value_weight);
    fn(p + "attention.value.bias", l.value_bias);
    fn(p + "attention.output.weight", l.output_weight);
    fn(p + "attention.output.bias", l.output_bias);
    fn(p + "attention.norm.gain", l.attention_norm_gain);
    fn(p + "attention.norm.bias", l.attention_norm_bias);
    fn(p + "ffn.in.weight", l.ffn_in_weight);
    fn(p + "ffn.in.bias", l.ffn_in_bias);
    fn(p + "ffn.out.weight", l.ffn_out_weight);
    fn(p + "ffn.out.bias", l.ffn_out_bias);
    fn(p + "ffn.norm.gain", l.ffn_norm_gain);
    fn(p + "ffn.norm.bias", l.ffn_norm_bias);
  }
  fn(std::string("span_head.weight"), set.span_weight);
  fn(std::string("span_head.bias"), set.span_bias);
}

/// Name and shape of every parameter tensor, in canonical order, computed from
/// the config alone.
struct TensorSpec {
  std::string name;
  numerics::Shape shape;
};
std::vector<TensorSpec> parameter_specs(const ModelConfig& config);

/// True for the per-layer attention-projection and FFN weight matrices.
bool is_projection_weight(const std::string& name);

template <typename T>
struct Parameters {
  ModelConfig config;
  TrainingStage stage = TrainingStage::initialized;
  ParamSet<numerics::Tensor<T>> tensors;

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    out.stage = stage;
    out.tensors = cast_set<U>(tensors);
    return out;
  }

  bool operator==(const Parameters&) const = default;

 private:
  template <typename U>
  static ParamSet<numerics::Tensor<U>> cast_set(const ParamSet<numerics::Tensor<T>>& in);
};

template <typename T>
template <typename U>
ParamSet<numerics::Tensor<U>> Parameters<T>::cast_set(const ParamSet<numerics::Tensor<T>>& in) {
  ParamSet<numerics::Tensor<U>> out;
  out.layers.resize(in.layers.size());
  if (in.type_embedding) out.type_embedding.emplace();
  std::vector<const numerics::Tensor<T>*> src;
  for_each_named(in, [&](const std::string&, const numerics::Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_named(out, [&](const std::string&, numerics::Tensor<U>& t) { t = src[i++]->template cast<U>(); });
  return out;
}

/// Weights ~ N(0, 0.02²), biases 0, norm gains 1.
template <typename T>
Parameters<T> init_params(const ModelConfig& config, numerics::Rng& rng);

/// Zero weights with unit norm gains; for size bookkeeping without sampling.
template <typename T>
Parameters<T> zero_params(const ModelConfig& config);

/// Registers every tensor as a graph leaf (trainable parameters when
/// `trainable`, constants otherwise).
template <typename T>
ParamSet<numerics::Var> bind(numerics::Graph<T>& graph, const Parameters<T>& params, bool trainable);

/// Gradients of bound parameters, in the same structure as the weights.
template <typename T>
ParamSet<numerics::Tensor<T>> collect_grads(const numerics::Graph<T>& graph, const ParamSet<numerics::Var>& bound);

}  // namespace quala::model
