#include "quala/training/evaluate.hpp"

#include <algorithm>

#include "quala/errors.hpp"

namespace quala::training {

double token_f1(std::pair<std::size_t, std::size_t> pred, std::pair<std::size_t, std::size_t> gold) {
  const std::size_t lo = std::max(pred.first, gold.first);
  const std::size_t hi = std::min(pred.second, gold.second);
  const double overlap = hi >= lo ? double(hi - lo + 1) : 0.0;
  const double sizes = double(pred.second - pred.first + 1) + double(gold.second - gold.first + 1);
  return 2.0 * overlap / sizes;
}

SpanMetrics score_predictions(std::span<const std::pair<std::size_t, std::size_t>> predictions,
                              std::span<const Example> data) {
  if (predictions.size() != data.size()) throw ContractError("prediction count does not match the dataset");
  SpanMetrics m;
  if (data.empty()) return m;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::pair gold{data[i].answer_start, data[i].answer_end};
    m.exact_match += predictions[i] == gold ? 1.0 : 0.0;
    m.token_f1 += token_f1(predictions[i], gold);
  }
  m.exact_match /= double(data.size());
  m.token_f1 /= double(data.size());
  return m;
}

SpanMetrics evaluate(const model::Parameters<float>& params, std::span<const Example> data,
                     const std::optional<model::LengthConfiguration>& lc, std::size_t max_span_len,
                     model::LinearHook<float>* hook) {
  model::Encoder<float> encoder(params, hook);
  std::vector<std::pair<std::size_t, std::size_t>> predictions;
  predictions.reserve(data.size());
  for (const auto& ex : data) {
    const auto r = lc ? encoder.adaptive(ex.tokens, *lc, max_span_len) : encoder.full(ex.tokens, max_span_len);
    predictions.emplace_back(r.span.start, r.span.end);
  }
  return score_predictions(predictions, data);
}

}  // namespace quala::training
