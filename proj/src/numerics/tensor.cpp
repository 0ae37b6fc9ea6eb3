#include "quala/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "quala/errors.hpp"
#include "quala/numerics/mac_counter.hpp"

namespace quala::numerics {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimension of size 0 in shape " + shape_string(shape));
  }
}

void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(s));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor() : shape_{1}, data_(1, T(0)) {}

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), T(0));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a.shape(), "matmul");
  require_2d(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c(Shape{m, n});
  gemm_nn(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  add_macs(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a.shape(), "matmul_transposed");
  require_2d(b.shape(), "matmul_transposed");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_transposed: inner dimensions differ, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()) + "ᵀ");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> c(Shape{m, n});
  gemm_nt(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  add_macs(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_2d(x.shape(), "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
  return out;
}

namespace {

template <typename T>
void check_finite_row(std::span<const T> row, const char* op) {
  for (T v : row) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    check_finite_row(in, "softmax");
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    check_finite_row(in, "log_softmax");
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match input " + shape_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    T mu = T(0);
    for (T v : in) mu += v;
    mu /= T(d);
    T var = T(0);
    for (T v : in) var += (v - mu) * (v - mu);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mu) * inv * gain[j] + bias[j];
  }
  return out;
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

template <typename T>
T cross_entropy_logits(std::span<const T> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  }
  check_finite_row(logits, "cross_entropy");
  const T mx = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (T v : logits) total += std::exp(v - mx);
  return mx + std::log(total) - logits[target];
}

template <typename T>
T kl_divergence(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: lengths " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  }
  T total = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == T(0)) continue;
    if (!(q[i] > T(0))) throw NumericError("kl_divergence: q has no mass where p > 0 (index " + std::to_string(i) + ")");
    total += p[i] * std::log(p[i] / q[i]);
  }
  return total;
}

#define QUALA_INSTANTIATE(T)                                                                      \
  template class Tensor<T>;                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> matmul_transposed(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                           \
  template Tensor<T> log_softmax_lastdim(const Tensor<T>&);                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template T gelu_scalar(T);                                                                      \
  template T cross_entropy_logits(std::span<const T>, std::size_t);                               \
  template T kl_divergence(std::span<const T>, std::span<const T>);                               \
  template void gemm_nn(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);           \
  template void gemm_nt(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);           \
  template void gemm_tn(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);

QUALA_INSTANTIATE(float)
QUALA_INSTANTIATE(double)

#undef QUALA_INSTANTIATE

}  // namespace quala::numerics
