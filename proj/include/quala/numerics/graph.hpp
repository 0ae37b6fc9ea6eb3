#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "quala/numerics/tensor.hpp"

namespace quala::numerics {

/// Handle to a node of a Graph.
struct Var {
  std::uint32_t id = 0;
  bool operator==(const Var&) const = default;
};

/// Row source for Graph::assemble_rows: row `row` of input `source`.
struct RowRef {
  std::size_t source = 0;
  std::size_t row = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, so reverse id
/// order is a valid topological order and backward visits each node once.
///
/// A graph built with `record = false` stores values only; it is the cheap
/// path for inference.
template <typename T>
class Graph {
 public:
  using TensorT = Tensor<T>;
  using BackwardFn = std::function<void(Graph&, const TensorT& grad_out)>;

  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  /// Drops every node created after the first `size` nodes.
  void truncate(std::size_t size);

  Var input(TensorT value);
  Var parameter(TensorT value);
  Var detach(Var x) { return input(value(x)); }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Accumulated gradient of a parameter leaf (zeros if none reached it).
  const TensorT& grad(Var v) const;
  void zero_grad();

  /// Seeds d(loss)/d(loss) = 1 and accumulates into parameter gradients.
  /// Repeated calls accumulate.
  void backward(Var loss);

  Var matmul(Var a, Var b);
  Var matmul_transposed(Var a, Var b);
  Var transpose(Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, T factor);
  /// x[rows×n] + bias[n] on every row.
  Var add_bias(Var x, Var bias);
  Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

  Var softmax(Var x);
  Var log_softmax(Var x);
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5));
  Var gelu(Var x);

  Var reshape(Var x, Shape shape);
  Var columns(Var x, std::size_t begin, std::size_t count);
  /// Column c of a 2-D tensor as a 1-D tensor.
  Var column(Var x, std::size_t c);
  Var concat_columns(std::span<const Var> parts);
  Var gather_rows(Var x, std::span<const std::size_t> rows);
  Var assemble_rows(std::span<const Var> sources, std::span<const RowRef> picks);

  Var sum(Var x);
  Var mean(Var x);
  Var add_n(std::span<const Var> terms);

  /// −log softmax(logits)[target] for 1-D logits.
  Var cross_entropy(Var logits, std::size_t target);
  /// Σ over rows of KL(p_row ‖ q_row) on probabilities.
  Var kl_divergence(Var p, Var q);
  /// Σ over rows of KL(target_row ‖ softmax(logits_row)). The target is a
  /// constant whose rows are distributions; gradient is softmax − target.
  Var kl_with_logits(const TensorT& target, Var logits);

 private:
  struct Node {
    TensorT value;
    bool requires_grad = false;
    bool is_parameter = false;
    BackwardFn backward;
  };

  Var push(TensorT value, bool requires_grad, BackwardFn backward);
  bool any_requires_grad(std::initializer_list<Var> vars) const;
  void accumulate(Var v, const TensorT& g);
  void accumulate(Var v, TensorT&& g);

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::optional<TensorT>> param_grads_;
  std::vector<std::optional<TensorT>> work_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace quala::numerics
