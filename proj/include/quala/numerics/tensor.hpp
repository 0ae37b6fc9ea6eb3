#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace quala::numerics {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Every dimension is at least 1 and the element
/// count always equals the product of the shape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  /// A single zero, so containers of tensors can be default-constructed.
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }

  /// Last dimension, and the product of all leading dimensions.
  std::size_t cols() const { return shape_.back(); }
  std::size_t rows() const { return data_.size() / shape_.back(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  std::span<const T> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
  std::span<T> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Plain value-level kernels. The graph ops reuse these for their forward pass.

/// m×k · k×n. Adds m·k·n to the thread's MAC counter.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// m×k · (n×k)ᵀ. Adds m·k·n to the thread's MAC counter.
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

/// Row-wise softmax over the last dimension, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// Exact x·Φ(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
T gelu_scalar(T x);

/// −log softmax(logits)[target].
template <typename T>
T cross_entropy_logits(std::span<const T> logits, std::size_t target);

/// Σ p·log(p/q) with 0·log 0 = 0. Both inputs are single distributions.
template <typename T>
T kl_divergence(std::span<const T> p, std::span<const T> q);

// Raw GEMM kernels that accumulate into c without touching the MAC counter.
// Layouts: nn = a[m×k]·b[k×n], nt = a[m×k]·b[n×k]ᵀ, tn = a[k×m]ᵀ·b[k×n].
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace quala::numerics
