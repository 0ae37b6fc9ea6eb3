#include "quala/training/length_adaptive.hpp"

#include <algorithm>
#include <cmath>

#include "quala/errors.hpp"
#include "quala/training/evaluate.hpp"

namespace quala::training {

using numerics::Graph;
using numerics::Tensor;
using numerics::Var;

model::LengthConfiguration length_config_from_ratios(std::size_t n, std::span<const double> ratios) {
  if (n == 0) throw InputError("length configurations need n >= 1");
  std::vector<std::size_t> retain;
  retain.reserve(ratios.size());
  std::size_t m = n;
  for (double p : ratios) {
    const auto kept = static_cast<std::size_t>(std::floor(double(m) * (1.0 - p)));
    m = std::max<std::size_t>(1, std::min(kept, m));
    retain.push_back(m);
  }
  return model::LengthConfiguration(std::move(retain));
}

model::LengthConfiguration sample_length_config(std::size_t n, std::size_t num_layers, double p_max,
                                                numerics::Rng& rng) {
  std::vector<double> ratios(num_layers);
  for (auto& p : ratios) p = rng.uniform(0.0, p_max);
  return length_config_from_ratios(n, ratios);
}

model::LengthConfiguration smallest_length_config(std::size_t n, std::size_t num_layers, double p_max) {
  const std::vector<double> ratios(num_layers, p_max);
  return length_config_from_ratios(n, ratios);
}

std::vector<const SubmodelPass*> SandwichBatchPlan::submodels() const {
  std::vector<const SubmodelPass*> out{&smallest};
  for (const auto& s : sampled) out.push_back(&s);
  return out;
}

namespace {

std::vector<bool> layer_skips(std::size_t num_layers, double p, numerics::Rng& rng) {
  std::vector<bool> skip(num_layers);
  for (std::size_t i = 0; i < num_layers; ++i) skip[i] = rng.bernoulli(p);
  return skip;
}

}  // namespace

SandwichBatchPlan plan_sandwich(std::size_t n, std::size_t num_layers, const TrainConfig& tc, numerics::Rng& rng) {
  SandwichBatchPlan plan;
  plan.smallest = {"smallest", smallest_length_config(n, num_layers, tc.p_max),
                   layer_skips(num_layers, tc.p_layerdrop, rng)};
  for (std::size_t i = 0; i < tc.n_random_sandwiches; ++i) {
    auto lc = sample_length_config(n, num_layers, tc.p_max, rng);
    plan.sampled.push_back({"sampled[" + std::to_string(i) + "]", std::move(lc),
                            layer_skips(num_layers, tc.p_layerdrop, rng)});
  }
  return plan;
}

template <typename T>
Var sandwich_loss(Graph<T>& graph, const model::ParamSet<Var>& bound, const model::ModelConfig& config,
                  std::span<const Example> batch, const SandwichBatchPlan& plan, const TrainConfig& tc,
                  numerics::Rng* drop_rng, SandwichLosses* losses, const SoftTargets<T>* fixed_targets) {
  if (batch.empty()) throw ContractError("sandwich_loss: empty batch");
  if (fixed_targets && (fixed_targets->start.size() != batch.size() || fixed_targets->end.size() != batch.size()))
    throw ContractError("sandwich_loss: one target pair per example is required");
  const T inv_batch = T(1) / T(batch.size());

  SoftTargets<T> targets;
  std::vector<Var> supervised;
  for (const auto& ex : batch) {
    const auto out = model::encode_full(graph, bound, config, ex.tokens);
    supervised.push_back(span_loss(graph, out, ex));
    if (!fixed_targets) {
      targets.start.push_back(numerics::softmax_lastdim(graph.value(out.start_logits)));
      targets.end.push_back(numerics::softmax_lastdim(graph.value(out.end_logits)));
    }
  }
  const SoftTargets<T>& soft = fixed_targets ? *fixed_targets : targets;
  std::vector<Var> terms{graph.scale(graph.add_n(supervised), inv_batch)};
  const double full_value = graph.value(terms[0])[0];
  if (!std::isfinite(full_value)) throw NumericError("non-finite loss in the full pass");
  if (losses) {
    losses->supervised_full = full_value;
    losses->distill_per_submodel.clear();
  }

  for (const SubmodelPass* pass : plan.submodels()) {
    model::AdaptiveOptions options{tc.drop_policy, drop_rng, pass->skip};
    std::vector<Var> per_example;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto out = model::encode_adaptive(graph, bound, config, batch[i].tokens, pass->lc, options);
      const Var kl = graph.scale(graph.add(graph.kl_with_logits(soft.start[i], out.start_logits),
                                           graph.kl_with_logits(soft.end[i], out.end_logits)),
                                 T(0.5));
      per_example.push_back(tc.submodel_supervised ? graph.add(kl, span_loss(graph, out, batch[i])) : kl);
    }
    const Var pass_loss = graph.scale(graph.add_n(per_example), inv_batch);
    const double value = graph.value(pass_loss)[0];
    if (!std::isfinite(value)) throw NumericError("non-finite loss in sub-model pass " + pass->name);
    if (losses) losses->distill_per_submodel.push_back(value);
    terms.push_back(pass_loss);
  }
  const Var total = graph.add_n(terms);
  if (losses) losses->total = graph.value(total)[0];
  return total;
}

template Var sandwich_loss<float>(Graph<float>&, const model::ParamSet<Var>&, const model::ModelConfig&,
                                  std::span<const Example>, const SandwichBatchPlan&, const TrainConfig&,
                                  numerics::Rng*, SandwichLosses*, const SoftTargets<float>*);
template Var sandwich_loss<double>(Graph<double>&, const model::ParamSet<Var>&, const model::ModelConfig&,
                                   std::span<const Example>, const SandwichBatchPlan&, const TrainConfig&,
                                   numerics::Rng*, SandwichLosses*, const SoftTargets<double>*);

SandwichLosses sandwich_step(model::Parameters<float>& params, AdamW& optimizer, std::span<const Example> batch,
                             const TrainConfig& tc, numerics::Rng& rng, double learning_rate, std::size_t step) {
  const auto plan = plan_sandwich(max_length(batch), params.config.num_layers, tc, rng);
  Graph<float> g;
  const auto bound = model::bind(g, params, true);
  SandwichLosses losses;
  Var total;
  try {
    total = sandwich_loss(g, bound, params.config, batch, plan, tc, &rng, &losses);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
  }
  g.backward(total);
  optimizer.step(params, model::collect_grads(g, bound), learning_rate);
  return losses;
}

TrainResult train_drop_and_restore(model::Parameters<float> params, std::span<const Example> train,
                                   const TrainConfig& tc, std::span<const Example> dev) {
  tc.validate();
  if (params.stage != model::TrainingStage::finetuned && params.stage != model::TrainingStage::length_adaptive) {
    throw ContractError("Drop-and-Restore training expects a fine-tuned model, got stage '" +
                        model::stage_name(params.stage) + "'");
  }
  if (train.empty()) throw ContractError("Drop-and-Restore training needs a non-empty training set");
  validate_dataset(train, params.config.vocab_size);

  TrainResult result{std::move(params),
                     MetricHistory({"step", "epoch", "loss_total", "supervised_full", "distill_smallest",
                                    "distill_sampled", "dev_exact_match", "dev_token_f1"}),
                     0};
  AdamW optimizer(result.params, tc.adam);
  numerics::Rng shuffle_rng(tc.seed);
  numerics::Rng sandwich_rng(tc.seed, 1);
  const std::size_t total_steps = tc.planned_steps(train.size());
  double sums[4] = {0, 0, 0, 0};
  std::size_t window_steps = 0;
  std::optional<std::size_t> last_eval;
  auto flush = [&](std::size_t epoch, std::optional<SpanMetrics> m) {
    std::vector<std::optional<double>> row{double(result.steps), double(epoch)};
    for (double s : sums) row.push_back(window_steps ? std::optional(s / double(window_steps)) : std::nullopt);
    if (tc.n_random_sandwiches == 0) row[5] = std::nullopt;
    row.push_back(m ? std::optional(m->exact_match) : std::nullopt);
    row.push_back(m ? std::optional(m->token_f1) : std::nullopt);
    result.history.add_row(std::move(row));
    std::fill(std::begin(sums), std::end(sums), 0.0);
    window_steps = 0;
  };
  for_each_batch(
      train, tc, shuffle_rng,
      [&](std::span<const Example> batch, std::size_t step, std::size_t epoch) {
        const auto l = sandwich_step(result.params, optimizer, batch, tc, sandwich_rng,
                                     tc.learning_rate_at(step, total_steps), step);
        sums[0] += l.total;
        sums[1] += l.supervised_full;
        sums[2] += l.distill_per_submodel[0];
        if (l.distill_per_submodel.size() > 1) {
          double s = 0.0;
          for (std::size_t i = 1; i < l.distill_per_submodel.size(); ++i) s += l.distill_per_submodel[i];
          sums[3] += s / double(l.distill_per_submodel.size() - 1);
        }
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
  result.params.stage = model::TrainingStage::length_adaptive;
  return result;
}

}  // namespace quala::training
