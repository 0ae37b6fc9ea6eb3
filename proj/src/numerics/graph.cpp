#include "quala/numerics/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "quala/errors.hpp"
#include "quala/numerics/mac_counter.hpp"

namespace quala::numerics {

namespace {

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes differ, " + shape_string(a) + " vs " + shape_string(b));
}

void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(s));
}

}  // namespace

template <typename T>
void Graph<T>::truncate(std::size_t size) {
  if (size > nodes_.size()) throw ContractError("Graph::truncate beyond current size");
  nodes_.resize(size);
  param_grads_.resize(size);
}

template <typename T>
Var Graph<T>::push(TensorT value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = record_ && requires_grad;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  param_grads_.emplace_back();
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::input(TensorT value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
Var Graph<T>::parameter(TensorT value) {
  const Shape shape = value.shape();
  Var v = push(std::move(value), true, nullptr);
  if (record_) {
    nodes_[v.id].is_parameter = true;
    param_grads_[v.id] = TensorT(shape);
  }
  return v;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  const auto& g = param_grads_.at(v.id);
  if (!g) throw ContractError("Graph::grad: node " + std::to_string(v.id) + " is not a recorded parameter");
  return *g;
}

template <typename T>
void Graph<T>::zero_grad() {
  for (auto& g : param_grads_) {
    if (g) std::fill(g->data().begin(), g->data().end(), T(0));
  }
}

template <typename T>
bool Graph<T>::any_requires_grad(std::initializer_list<Var> vars) const {
  if (!record_) return false;
  for (Var v : vars)
    if (nodes_[v.id].requires_grad) return true;
  return false;
}

template <typename T>
void Graph<T>::accumulate(Var v, const TensorT& g) {
  if (!nodes_[v.id].requires_grad) return;
  auto& slot = work_[v.id];
  if (!slot) {
    slot = g;
  } else {
    add_into(*slot, g);
  }
}

template <typename T>
void Graph<T>::accumulate(Var v, TensorT&& g) {
  if (!nodes_[v.id].requires_grad) return;
  auto& slot = work_[v.id];
  if (!slot) {
    slot = std::move(g);
  } else {
    add_into(*slot, g);
  }
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (!record_) throw ContractError("backward on a graph that does not record");
  const Node& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(root.value.shape()));
  }
  if (!root.requires_grad) return;
  work_.assign(loss.id + 1, std::nullopt);
  work_[loss.id] = TensorT::full(root.value.shape(), T(1));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (!work_[id]) continue;
    TensorT g = std::move(*work_[id]);
    work_[id].reset();
    Node& node = nodes_[id];
    if (node.is_parameter) {
      add_into(*param_grads_[id], g);
    } else if (node.backward) {
      node.backward(*this, g);
    }
  }
  work_.clear();
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  TensorT out = numerics::matmul(value(a), value(b));
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, const TensorT& go) {
    const TensorT& av = g.value(a);
    const TensorT& bv = g.value(b);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (g.requires_grad(a)) {
      TensorT da(av.shape());
      gemm_nt(go.data().data(), bv.data().data(), da.data().data(), m, n, k);
      g.accumulate(a, std::move(da));
    }
    if (g.requires_grad(b)) {
      TensorT db(bv.shape());
      gemm_tn(av.data().data(), go.data().data(), db.data().data(), k, m, n);
      g.accumulate(b, std::move(db));
    }
  });
}

template <typename T>
Var Graph<T>::matmul_transposed(Var a, Var b) {
  TensorT out = numerics::matmul_transposed(value(a), value(b));
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, const TensorT& go) {
    const TensorT& av = g.value(a);
    const TensorT& bv = g.value(b);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    if (g.requires_grad(a)) {
      // da = go[m×n] · b[n×k]
      TensorT da(av.shape());
      gemm_nn(go.data().data(), bv.data().data(), da.data().data(), m, n, k);
      g.accumulate(a, std::move(da));
    }
    if (g.requires_grad(b)) {
      // db = goᵀ[n×m] · a[m×k]
      TensorT db(bv.shape());
      gemm_tn(go.data().data(), av.data().data(), db.data().data(), n, m, k);
      g.accumulate(b, std::move(db));
    }
  });
}

template <typename T>
Var Graph<T>::transpose(Var x) {
  return push(numerics::transpose(value(x)), any_requires_grad({x}),
              [x](Graph& g, const TensorT& go) { g.accumulate(x, numerics::transpose(go)); });
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  require_same_shape(value(a).shape(), value(b).shape(), "add");
  TensorT out = value(a);
  add_into(out, value(b));
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, const TensorT& go) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

template <typename T>
Var Graph<T>::sub(Var a, Var b) {
  require_same_shape(value(a).shape(), value(b).shape(), "sub");
  TensorT out = value(a);
  auto o = out.data();
  auto bv = value(b).data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, const TensorT& go) {
    g.accumulate(a, go);
    if (g.requires_grad(b)) {
      TensorT neg = go;
      for (T& v : neg.data()) v = -v;
      g.accumulate(b, std::move(neg));
    }
  });
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  require_same_shape(value(a).shape(), value(b).shape(), "mul");
  TensorT out = value(a);
  auto o = out.data();
  auto bv = value(b).data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, const TensorT& go) {
    if (g.requires_grad(a)) {
      TensorT da = go;
      auto bv = g.value(b).data();
      for (std::size_t i = 0; i < bv.size(); ++i) da[i] *= bv[i];
      g.accumulate(a, std::move(da));
    }
    if (g.requires_grad(b)) {
      TensorT db = go;
      auto av = g.value(a).data();
      for (std::size_t i = 0; i < av.size(); ++i) db[i] *= av[i];
      g.accumulate(b, std::move(db));
    }
  });
}

template <typename T>
Var Graph<T>::scale(Var x, T factor) {
  TensorT out = value(x);
  for (T& v : out.data()) v *= factor;
  return push(std::move(out), any_requires_grad({x}), [x, factor](Graph& g, const TensorT& go) {
    TensorT dx = go;
    for (T& v : dx.data()) v *= factor;
    g.accumulate(x, std::move(dx));
  });
}

template <typename T>
Var Graph<T>::add_bias(Var x, Var bias) {
  const TensorT& xv = value(x);
  const TensorT& bv = value(bias);
  if (bv.numel() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " + shape_string(xv.shape()));
  }
  TensorT out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bv[j];
  }
  return push(std::move(out), any_requires_grad({x, bias}), [x, bias](Graph& g, const TensorT& go) {
    g.accumulate(x, go);
    if (g.requires_grad(bias)) {
      TensorT db(g.value(bias).shape());
      for (std::size_t r = 0; r < go.rows(); ++r) {
        auto row = go.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) db[j] += row[j];
      }
      g.accumulate(bias, std::move(db));
    }
  });
}

template <typename T>
Var Graph<T>::softmax(Var x) {
  TensorT out = softmax_lastdim(value(x));
  Var y = push(std::move(out), any_requires_grad({x}), nullptr);
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [x, y](Graph& g, const TensorT& go) {
      const TensorT& yv = g.value(y);
      TensorT dx(yv.shape());
      for (std::size_t r = 0; r < yv.rows(); ++r) {
        auto yr = yv.row(r);
        auto gr = go.row(r);
        auto dr = dx.row(r);
        T dot = T(0);
        for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] = yr[j] * (gr[j] - dot);
      }
      g.accumulate(x, std::move(dx));
    };
  }
  return y;
}

template <typename T>
Var Graph<T>::log_softmax(Var x) {
  TensorT out = log_softmax_lastdim(value(x));
  Var y = push(std::move(out), any_requires_grad({x}), nullptr);
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [x, y](Graph& g, const TensorT& go) {
      const TensorT& yv = g.value(y);
      TensorT dx(yv.shape());
      for (std::size_t r = 0; r < yv.rows(); ++r) {
        auto yr = yv.row(r);
        auto gr = go.row(r);
        auto dr = dx.row(r);
        T total = T(0);
        for (T v : gr) total += v;
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] = gr[j] - std::exp(yr[j]) * total;
      }
      g.accumulate(x, std::move(dx));
    };
  }
  return y;
}

template <typename T>
Var Graph<T>::layer_norm(Var x, Var gain, Var bias, T eps) {
  TensorT out = numerics::layer_norm(value(x), value(gain), value(bias), eps);
  return push(std::move(out), any_requires_grad({x, gain, bias}), [x, gain, bias, eps](Graph& g, const TensorT& go) {
    const TensorT& xv = g.value(x);
    const TensorT& gv = g.value(gain);
    const std::size_t d = xv.cols();
    TensorT dx(xv.shape());
    TensorT dgain(gv.shape());
    TensorT dbias(gv.shape());
    std::vector<T> xhat(d);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      auto in = xv.row(r);
      auto gr = go.row(r);
      T mu = T(0);
      for (T v : in) mu += v;
      mu /= T(d);
      T var = T(0);
      for (T v : in) var += (v - mu) * (v - mu);
      var /= T(d);
      const T inv = T(1) / std::sqrt(var + eps);
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (in[j] - mu) * inv;
        const T dy = gr[j] * gv[j];
        sum_dy += dy;
        sum_dy_xhat += dy * xhat[j];
        dgain[j] += gr[j] * xhat[j];
        dbias[j] += gr[j];
      }
      auto dr = dx.row(r);
      for (std::size_t j = 0; j < d; ++j) {
        const T dy = gr[j] * gv[j];
        dr[j] = inv * (dy - sum_dy / T(d) - xhat[j] * sum_dy_xhat / T(d));
      }
    }
    g.accumulate(x, std::move(dx));
    g.accumulate(gain, std::move(dgain));
    g.accumulate(bias, std::move(dbias));
  });
}

template <typename T>
Var Graph<T>::gelu(Var x) {
  return push(numerics::gelu(value(x)), any_requires_grad({x}), [x](Graph& g, const TensorT& go) {
    const TensorT& xv = g.value(x);
    TensorT dx(xv.shape());
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      dx[i] = go[i] * (cdf + v * pdf);
    }
    g.accumulate(x, std::move(dx));
  });
}

template <typename T>
Var Graph<T>::reshape(Var x, Shape shape) {
  TensorT out = value(x).reshaped(std::move(shape));
  return push(std::move(out), any_requires_grad({x}), [x](Graph& g, const TensorT& go) {
    g.accumulate(x, go.reshaped(g.value(x).shape()));
  });
}

template <typename T>
Var Graph<T>::columns(Var x, std::size_t begin, std::size_t count) {
  const TensorT& xv = value(x);
  require_2d(xv.shape(), "columns");
  if (count == 0 || begin + count > xv.dim(1)) {
    throw DimensionError("columns: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0);
  TensorT out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
  return push(std::move(out), any_requires_grad({x}), [x, begin, count](Graph& g, const TensorT& go) {
    TensorT dx(g.value(x).shape());
    for (std::size_t r = 0; r < go.dim(0); ++r)
      std::copy_n(go.row(r).begin(), count, dx.row(r).begin() + static_cast<std::ptrdiff_t>(begin));
    g.accumulate(x, std::move(dx));
  });
}

template <typename T>
Var Graph<T>::column(Var x, std::size_t c) {
  const TensorT& xv = value(x);
  require_2d(xv.shape(), "column");
  if (c >= xv.dim(1)) throw DimensionError("column: index " + std::to_string(c) + " outside " + shape_string(xv.shape()));
  TensorT out(Shape{xv.dim(0)});
  for (std::size_t r = 0; r < xv.dim(0); ++r) out[r] = xv.at(r, c);
  return push(std::move(out), any_requires_grad({x}), [x, c](Graph& g, const TensorT& go) {
    TensorT dx(g.value(x).shape());
    for (std::size_t r = 0; r < go.numel(); ++r) dx.at(r, c) = go[r];
    g.accumulate(x, std::move(dx));
  });
}

template <typename T>
Var Graph<T>::concat_columns(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_columns: no inputs");
  const std::size_t rows = value(parts[0]).dim(0);
  std::size_t total = 0;
  for (Var p : parts) {
    require_2d(value(p).shape(), "concat_columns");
    if (value(p).dim(0) != rows) throw DimensionError("concat_columns: row counts differ");
    total += value(p).dim(1);
  }
  TensorT out(Shape{rows, total});
  std::size_t offset = 0;
  bool needs_grad = false;
  for (Var p : parts) {
    const TensorT& pv = value(p);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    offset += pv.dim(1);
    needs_grad = needs_grad || any_requires_grad({p});
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(std::move(out), needs_grad, [inputs](Graph& g, const TensorT& go) {
    std::size_t offset = 0;
    for (Var p : inputs) {
      const std::size_t w = g.value(p).dim(1);
      if (g.requires_grad(p)) {
        TensorT dp(g.value(p).shape());
        for (std::size_t r = 0; r < go.dim(0); ++r)
          std::copy_n(go.row(r).begin() + static_cast<std::ptrdiff_t>(offset), w, dp.row(r).begin());
        g.accumulate(p, std::move(dp));
      }
      offset += w;
    }
  });
}

template <typename T>
Var Graph<T>::gather_rows(Var x, std::span<const std::size_t> rows) {
  std::vector<RowRef> picks;
  picks.reserve(rows.size());
  for (std::size_t r : rows) picks.push_back({0, r});
  const Var sources[] = {x};
  return assemble_rows(sources, picks);
}

template <typename T>
Var Graph<T>::assemble_rows(std::span<const Var> sources, std::span<const RowRef> picks) {
  if (sources.empty() || picks.empty()) throw ContractError("assemble_rows: empty input");
  const std::size_t width = value(sources[0]).cols();
  bool needs_grad = false;
  for (Var s : sources) {
    if (value(s).cols() != width) throw DimensionError("assemble_rows: sources have different widths");
    needs_grad = needs_grad || any_requires_grad({s});
  }
  TensorT out(Shape{picks.size(), width});
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const RowRef& p = picks[i];
    if (p.source >= sources.size()) throw IndexError("assemble_rows: source index out of range");
    const TensorT& sv = value(sources[p.source]);
    if (p.row >= sv.rows()) {
      throw IndexError("assemble_rows: row " + std::to_string(p.row) + " outside " + shape_string(sv.shape()));
    }
    std::copy(sv.row(p.row).begin(), sv.row(p.row).end(), out.row(i).begin());
  }
  std::vector<Var> src(sources.begin(), sources.end());
  std::vector<RowRef> pk(picks.begin(), picks.end());
  return push(std::move(out), needs_grad, [src, pk](Graph& g, const TensorT& go) {
    std::vector<std::optional<TensorT>> grads(src.size());
    for (std::size_t i = 0; i < pk.size(); ++i) {
      const Var s = src[pk[i].source];
      if (!g.requires_grad(s)) continue;
      auto& slot = grads[pk[i].source];
      if (!slot) slot = TensorT(g.value(s).shape());
      auto dst = slot->row(pk[i].row);
      auto from = go.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += from[j];
    }
    for (std::size_t s = 0; s < src.size(); ++s)
      if (grads[s]) g.accumulate(src[s], std::move(*grads[s]));
  });
}

template <typename T>
Var Graph<T>::sum(Var x) {
  T total = T(0);
  for (T v : value(x).data()) total += v;
  return push(TensorT::scalar(total), any_requires_grad({x}), [x](Graph& g, const TensorT& go) {
    g.accumulate(x, TensorT::full(g.value(x).shape(), go[0]));
  });
}

template <typename T>
Var Graph<T>::mean(Var x) {
  return scale(sum(x), T(1) / T(value(x).numel()));
}

template <typename T>
Var Graph<T>::add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ContractError("add_n: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::size_t target) {
  const TensorT& lv = value(logits);
  if (lv.rank() != 1) throw DimensionError("cross_entropy: expected 1-D logits, got " + shape_string(lv.shape()));
  const T loss = cross_entropy_logits(lv.data(), target);
  return push(TensorT::scalar(loss), any_requires_grad({logits}), [logits, target](Graph& g, const TensorT& go) {
    TensorT p = softmax_lastdim(g.value(logits));
    p[target] -= T(1);
    for (T& v : p.data()) v *= go[0];
    g.accumulate(logits, std::move(p));
  });
}

template <typename T>
Var Graph<T>::kl_divergence(Var p, Var q) {
  const TensorT& pv = value(p);
  const TensorT& qv = value(q);
  require_same_shape(pv.shape(), qv.shape(), "kl_divergence");
  T total = T(0);
  for (std::size_t r = 0; r < pv.rows(); ++r) total += numerics::kl_divergence(pv.row(r), qv.row(r));
  return push(TensorT::scalar(total), any_requires_grad({p, q}), [p, q](Graph& g, const TensorT& go) {
    const TensorT& pv = g.value(p);
    const TensorT& qv = g.value(q);
    if (g.requires_grad(p)) {
      TensorT dp(pv.shape());
      for (std::size_t i = 0; i < pv.numel(); ++i)
        dp[i] = pv[i] > T(0) ? go[0] * (std::log(pv[i] / qv[i]) + T(1)) : T(0);
      g.accumulate(p, std::move(dp));
    }
    if (g.requires_grad(q)) {
      TensorT dq(qv.shape());
      for (std::size_t i = 0; i < qv.numel(); ++i) dq[i] = pv[i] > T(0) ? -go[0] * pv[i] / qv[i] : T(0);
      g.accumulate(q, std::move(dq));
    }
  });
}

template <typename T>
Var Graph<T>::kl_with_logits(const TensorT& target, Var logits) {
  const TensorT& lv = value(logits);
  require_same_shape(target.shape(), lv.shape(), "kl_with_logits");
  // log q is taken from the softmax itself where it is representable, so a
  // target equal to softmax(logits) gives exactly zero.
  const TensorT q = softmax_lastdim(lv);
  const TensorT logq = log_softmax_lastdim(lv);
  T total = T(0);
  for (std::size_t r = 0; r < target.rows(); ++r) {
    auto pr = target.row(r);
    auto qr = q.row(r);
    auto lr = logq.row(r);
    T row_mass = T(0);
    for (std::size_t j = 0; j < pr.size(); ++j) {
      row_mass += pr[j];
      if (pr[j] > T(0)) total += pr[j] * (std::log(pr[j]) - (qr[j] > T(0) ? std::log(qr[j]) : lr[j]));
    }
    if (std::abs(row_mass - T(1)) > T(1e-4)) throw NumericError("kl_with_logits: target row is not a distribution");
  }
  return push(TensorT::scalar(total), any_requires_grad({logits}), [target, logits](Graph& g, const TensorT& go) {
    TensorT dq = softmax_lastdim(g.value(logits));
    for (std::size_t i = 0; i < dq.numel(); ++i) dq[i] = go[0] * (dq[i] - target[i]);
    g.accumulate(logits, std::move(dq));
  });
}

template class Graph<float>;
template class Graph<double>;

}  // namespace quala::numerics
