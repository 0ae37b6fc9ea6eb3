#include "quala/training/distill.hpp"

#include <cmath>

#include "quala/errors.hpp"

namespace quala::training {

using numerics::Graph;
using numerics::Shape;
using numerics::Tensor;
using numerics::Var;

namespace {

Tensor<double> relation_of(const Tensor<double>& x, std::size_t heads) {
  if (x.rank() != 2) throw DimensionError("minilm_relations: expected a matrix");
  const std::size_t m = x.rows(), d = x.cols();
  if (heads == 0 || d % heads) {
    throw ConfigurationError("minilm_relations: width " + std::to_string(d) + " is not divisible by " +
                             std::to_string(heads) + " relation heads");
  }
  const std::size_t dr = d / heads;
  const double inv = 1.0 / std::sqrt(double(dr));
  Tensor<double> out(Shape{heads, m, m});
  Tensor<double> scores(Shape{m, m});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t c = h * dr; c < (h + 1) * dr; ++c) s += x.at(i, c) * x.at(j, c);
        scores.at(i, j) = s * inv;
      }
    const auto probs = numerics::softmax_lastdim(scores);
    std::copy(probs.data().begin(), probs.data().end(), out.data().begin() + std::ptrdiff_t(h * m * m));
  }
  return out;
}

Var tap_of(const model::LayerTap& tap, RelationKind kind) {
  switch (kind) {
    case RelationKind::qq: return tap.query;
    case RelationKind::kk: return tap.key;
    case RelationKind::vv: return tap.value;
  }
  return tap.query;
}

}  // namespace

Relations minilm_relations(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                           std::size_t relation_heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) throw DimensionError("minilm_relations: Q, K, V shapes differ");
  return Relations{{relation_of(q, relation_heads), relation_of(k, relation_heads), relation_of(v, relation_heads)}};
}

double minilm_distill_loss(const Relations& teacher, const Relations& student, const std::set<RelationKind>& kinds) {
  if (kinds.empty()) throw ContractError("minilm_distill_loss: no relation kinds selected");
  double total = 0.0;
  std::size_t rows = 0;
  for (RelationKind kind : kinds) {
    const auto& t = teacher.kinds[std::size_t(kind)];
    const auto& s = student.kinds[std::size_t(kind)];
    if (t.shape() != s.shape() || t.rank() != 3) {
      throw ContractError("minilm_distill_loss: teacher " + relation_kind_name(kind) +
                          " relations and student relations differ in shape");
    }
    const std::size_t m = t.dim(2);
    for (std::size_t r = 0; r < t.numel() / m; ++r) {
      total += numerics::kl_divergence<double>(std::span(t.data()).subspan(r * m, m),
                                               std::span(s.data()).subspan(r * m, m));
      ++rows;
    }
  }
  return total / double(rows);
}

template <typename T>
std::vector<Var> relation_logits(Graph<T>& graph, Var x, std::size_t relation_heads) {
  const std::size_t d = graph.value(x).cols();
  if (relation_heads == 0 || d % relation_heads)
    throw ConfigurationError("relation heads must divide the projection width " + std::to_string(d));
  const std::size_t dr = d / relation_heads;
  const T inv = T(1) / std::sqrt(T(dr));
  std::vector<Var> out;
  for (std::size_t h = 0; h < relation_heads; ++h) {
    const Var xh = graph.columns(x, h * dr, dr);
    out.push_back(graph.scale(graph.matmul_transposed(xh, xh), inv));
  }
  return out;
}

template <typename T>
Var minilm_distill_loss(Graph<T>& graph, const Relations& teacher, const model::LayerTap& student,
                        std::size_t relation_heads, const std::set<RelationKind>& kinds) {
  if (kinds.empty()) throw ContractError("minilm_distill_loss: no relation kinds selected");
  const std::size_t m = graph.value(student.query).rows();
  std::vector<Var> terms;
  for (RelationKind kind : kinds) {
    const auto& t = teacher.kinds[std::size_t(kind)];
    if (t.rank() != 3 || t.dim(0) != relation_heads || t.dim(1) != m || t.dim(2) != m) {
      throw ContractError("minilm_distill_loss: teacher " + relation_kind_name(kind) + " relations have shape " +
                          numerics::shape_string(t.shape()) + ", student needs [" + std::to_string(relation_heads) +
                          "x" + std::to_string(m) + "x" + std::to_string(m) + "]");
    }
    const auto logits = relation_logits(graph, tap_of(student, kind), relation_heads);
    for (std::size_t h = 0; h < relation_heads; ++h) {
      Tensor<T> target(Shape{m, m});
      for (std::size_t i = 0; i < m * m; ++i) target[i] = T(t[h * m * m + i]);
      terms.push_back(graph.kl_with_logits(target, logits[h]));
    }
  }
  return graph.scale(graph.add_n(terms), T(1) / T(kinds.size() * relation_heads * m));
}

template std::vector<Var> relation_logits<float>(Graph<float>&, Var, std::size_t);
template std::vector<Var> relation_logits<double>(Graph<double>&, Var, std::size_t);
template Var minilm_distill_loss<float>(Graph<float>&, const Relations&, const model::LayerTap&, std::size_t,
                                        const std::set<RelationKind>&);
template Var minilm_distill_loss<double>(Graph<double>&, const Relations&, const model::LayerTap&, std::size_t,
                                         const std::set<RelationKind>&);

TrainResult distill_train(const model::Parameters<float>& teacher, model::Parameters<float> student,
                          std::span<const std::vector<model::TokenId>> corpus, const DistillConfig& dc,
                          const TrainConfig& tc) {
  tc.validate();
  dc.validate(teacher.config, student.config);
  if (teacher.stage == model::TrainingStage::initialized)
    throw ContractError("distillation needs a trained teacher, got an initialized one");
  if (student.stage != model::TrainingStage::initialized)
    throw ContractError("distillation starts from an initialized student, got stage '" +
                        model::stage_name(student.stage) + "'");
  if (corpus.empty()) throw ContractError("distillation needs a non-empty corpus");

  Dataset sequences;
  sequences.reserve(corpus.size());
  for (const auto& tokens : corpus) sequences.push_back(Example{tokens, 0, 0});
  validate_dataset(sequences, std::min(teacher.config.vocab_size, student.config.vocab_size));

  const std::size_t layer = dc.teacher_layer.value_or(teacher.config.num_layers - 1);
  Graph<float> teacher_graph(false);
  const auto teacher_bound = model::bind(teacher_graph, teacher, false);
  const std::size_t mark = teacher_graph.size();
  auto teacher_relations = [&](const std::vector<model::TokenId>& tokens) {
    const auto out = model::encode_full(teacher_graph, teacher_bound, teacher.config, tokens);
    const auto& tap = out.taps[layer];
    Relations r = minilm_relations(teacher_graph.value(tap.query).template cast<double>(),
                                   teacher_graph.value(tap.key).template cast<double>(),
                                   teacher_graph.value(tap.value).template cast<double>(), dc.relation_heads);
    teacher_graph.truncate(mark);
    return r;
  };

  TrainResult result{std::move(student), MetricHistory({"step", "epoch", "distill_loss"}), 0};
  AdamW optimizer(result.params, tc.adam);
  numerics::Rng rng(tc.seed);
  const std::size_t total_steps = tc.planned_steps(sequences.size());
  double window = 0.0;
  std::size_t window_steps = 0;
  auto flush = [&](std::size_t epoch) {
    std::optional<double> loss;
    if (window_steps) loss = window / double(window_steps);
    result.history.add_row({double(result.steps), double(epoch), loss});
    window = 0.0;
    window_steps = 0;
  };
  for_each_batch(
      sequences, tc, rng,
      [&](std::span<const Example> batch, std::size_t step, std::size_t epoch) {
        Graph<float> g;
        const auto bound = model::bind(g, result.params, true);
        std::vector<Var> losses;
        for (const auto& ex : batch) {
          const Relations target = teacher_relations(ex.tokens);
          const auto out = model::encode_full(g, bound, result.params.config, ex.tokens);
          losses.push_back(minilm_distill_loss(g, target, out.taps.back(), dc.relation_heads, dc.relation_kinds));
        }
        const Var loss = g.scale(g.add_n(losses), 1.0f / float(batch.size()));
        const double value = g.value(loss)[0];
        if (!std::isfinite(value)) throw NumericError("non-finite distillation loss at step " + std::to_string(step));
        g.backward(loss);
        optimizer.step(result.params, model::collect_grads(g, bound), tc.learning_rate_at(step, total_steps));
        window += value;
        ++window_steps;
        result.steps = step + 1;
        if (result.steps % tc.log_every == 0) flush(epoch);
      },
      [&](std::size_t epoch) { flush(epoch); });
  result.params.stage = model::TrainingStage::distilled;
  return result;
}

}  // namespace quala::training
