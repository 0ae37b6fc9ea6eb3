#include "quala/training/optimizer.hpp"

#include <cmath>

namespace quala::training {

using numerics::Tensor;

AdamW::AdamW(const model::Parameters<float>& params, AdamConfig config) : config_(config) {
  model::for_each_named(params.tensors, [&](const std::string&, const Tensor<float>& t) {
    m_.emplace_back(t.shape());
    v_.emplace_back(t.shape());
  });
}

void AdamW::step(model::Parameters<float>& params, const model::ParamSet<Tensor<float>>& grads,
                 double learning_rate) {
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(steps_));
  const double c2 = 1.0 - std::pow(b2, double(steps_));
  std::vector<const Tensor<float>*> g;
  model::for_each_named(grads, [&](const std::string&, const Tensor<float>& t) { g.push_back(&t); });

  std::size_t i = 0;
  model::for_each_named(params.tensors, [&](const std::string&, Tensor<float>& p) {
    const bool decay = p.rank() >= 2;
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& gi = *g[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = gi[j];
      m[j] = float(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = float(b2 * v[j] + (1.0 - b2) * gj * gj);
      double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
      if (decay) update += config_.weight_decay * p[j];
      p[j] = float(p[j] - learning_rate * update);
    }
    ++i;
  });
}

}  // namespace quala::training
