#pragma once

#include <array>
#include <span>
#include <vector>

#include "quala/model/forward.hpp"
#include "quala/training/config.hpp"
#include "quala/training/supervised.hpp"

namespace quala::training {

/// Self-relation matrices R_Q, R_K, R_V, each [r×m×m]:
/// R_X[h] = softmax(X_h X_hᵀ / √(d/r)) with X_h the h-th column block of X.
struct Relations {
  std::array<numerics::Tensor<double>, 3> kinds;  // indexed by RelationKind
};

Relations minilm_relations(const numerics::Tensor<double>& q, const numerics::Tensor<double>& k,
                           const numerics::Tensor<double>& v, std::size_t relation_heads);

/// Mean over the selected kinds, heads and rows of KL(teacher row ‖ student row).
double minilm_distill_loss(const Relations& teacher, const Relations& student,
                           const std::set<RelationKind>& kinds = {RelationKind::qq, RelationKind::kk,
                                                                  RelationKind::vv});

/// Per-head relation logits X_h X_hᵀ / √d_r for one projection, as graph nodes.
template <typename T>
std::vector<numerics::Var> relation_logits(numerics::Graph<T>& graph, numerics::Var x, std::size_t relation_heads);

/// In-graph distillation loss: `teacher` holds fixed relation tensors, the
/// student side comes from the projection taps.
template <typename T>
numerics::Var minilm_distill_loss(numerics::Graph<T>& graph, const Relations& teacher, const model::LayerTap& student,
                                  std::size_t relation_heads, const std::set<RelationKind>& kinds);

/// Trains `student` to mimic the relations of one teacher layer on unlabeled
/// token sequences. The student's last layer is matched. The result is
/// marked distilled.
TrainResult distill_train(const model::Parameters<float>& teacher, model::Parameters<float> student,
                          std::span<const std::vector<model::TokenId>> corpus, const DistillConfig& dc,
                          const TrainConfig& tc);

}  // namespace quala::training
