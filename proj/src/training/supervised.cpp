#include "quala/training/supervised.hpp"

#include <cmath>

#include "quala/errors.hpp"
#include "quala/training/evaluate.hpp"

namespace quala::training {

using numerics::Graph;
using numerics::Var;

template <typename T>
Var span_loss(Graph<T>& graph, const model::EncoderOutput& out, const Example& example) {
  const Var start = graph.cross_entropy(out.start_logits, example.answer_start);
  const Var end = graph.cross_entropy(out.end_logits, example.answer_end);
  return graph.scale(graph.add(start, end), T(0.5));
}

template Var span_loss<float>(Graph<float>&, const model::EncoderOutput&, const Example&);
template Var span_loss<double>(Graph<double>&, const model::EncoderOutput&, const Example&);

double supervised_step(model::Parameters<float>& params, AdamW& optimizer, std::span<const Example> batch,
                       double learning_rate, std::size_t step) {
  if (batch.empty()) throw ContractError("supervised_step: empty batch");
  Graph<float> g;
  const auto bound = model::bind(g, params, true);
  Var loss;
  try {
    std::vector<Var> losses;
    losses.reserve(batch.size());
    for (const auto& ex : batch)
      losses.push_back(span_loss(g, model::encode_full(g, bound, params.config, ex.tokens), ex));
    loss = g.scale(g.add_n(losses), 1.0f / float(batch.size()));
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
  }
  const double value = g.value(loss)[0];
  if (!std::isfinite(value)) throw NumericError("non-finite supervised loss at step " + std::to_string(step));
  g.backward(loss);
  optimizer.step(params, model::collect_grads(g, bound), learning_rate);
  return value;
}

TrainResult finetune_supervised(model::Parameters<float> params, std::span<const Example> train,
                                const TrainConfig& tc, std::span<const Example> dev) {
  tc.validate();
  if (params.stage != model::TrainingStage::initialized && params.stage != model::TrainingStage::distilled) {
    throw ContractError("fine-tuning expects an initialized or distilled model, got stage '" +
                        model::stage_name(params.stage) + "'");
  }
  if (train.empty()) throw ContractError("fine-tuning needs a non-empty training set");
  validate_dataset(train, params.config.vocab_size);

  TrainResult result{std::move(params), MetricHistory({"step", "epoch", "loss", "dev_exact_match", "dev_token_f1"}), 0};
  AdamW optimizer(result.params, tc.adam);
  numerics::Rng rng(tc.seed);
  const std::size_t total_steps = tc.planned_steps(train.size());
  double window = 0.0;
  std::size_t window_steps = 0;
  std::optional<std::size_t> last_eval;
  auto flush = [&](std::size_t epoch, std::optional<SpanMetrics> dev_metrics) {
    std::optional<double> loss;
    if (window_steps) loss = window / double(window_steps);
    result.history.add_row({double(result.steps), double(epoch), loss,
                            dev_metrics ? std::optional(dev_metrics->exact_match) : std::nullopt,
                            dev_metrics ? std::optional(dev_metrics->token_f1) : std::nullopt});
    window = 0.0;
    window_steps = 0;
  };
  for_each_batch(
      train, tc, rng,
      [&](std::span<const Example> batch, std::size_t step, std::size_t epoch) {
        window += supervised_step(result.params, optimizer, batch, tc.learning_rate_at(step, total_steps), step);
        ++window_steps;
        result.steps = step + 1;
        const bool eval_now = tc.eval_every && !dev.empty() && result.steps % tc.eval_every == 0;
        if (eval_now) {
          flush(epoch, evaluate(result.params, dev, std::nullopt, tc.max_span_len));
          last_eval = result.steps;
        } else if (result.steps % tc.log_every == 0) {
          flush(epoch, std::nullopt);
        }
      },
      [&](std::size_t epoch) {
        std::optional<SpanMetrics> m;
        if (!dev.empty() && last_eval != result.steps) m = evaluate(result.params, dev, std::nullopt, tc.max_span_len);
        if (m || window_steps) flush(epoch, m);
        last_eval = result.steps;
      });
  result.params.stage = model::TrainingStage::finetuned;
  return result;
}

}  // namespace quala::training
