#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dyngrain/tensor.hpp"

namespace dyngrain {

// Elementwise binary ops. Broadcasting is trailing-aligned only: the shorter
// shape must equal the trailing dimensions of the longer one.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
inline Tensor operator*(const Tensor& a, float s) { return mul_scalar(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, float s) { return add_scalar(a, s); }
Tensor neg(const Tensor& a);
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Unary elementwise.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
/// tanh approximation, as used by DiT MLPs.
Tensor gelu(const Tensor& a);

/// a[..., m, p] x b[..., p, n] with equal batch dims, or b[p, n] shared.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * weight[in, out] + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);
/// Normalizes the last axis, no affine parameters.
Tensor layer_norm(const Tensor& x, float eps = 1e-6f);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& xs, int axis);
/// out[..., j, ...] = x[..., index[j], ...] along `axis`. Indices may repeat.
Tensor gather(const Tensor& x, int axis, std::span<const std::int64_t> index);
/// Scatter-add: out[..., index[j], ...] += x[..., j, ...], out extent `extent`.
Tensor scatter(const Tensor& x, int axis, std::span<const std::int64_t> index,
               std::int64_t extent);

/// NHWC convolution, weight [kh, kw, cin, cout], bias [cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

Tensor mse(const Tensor& a, const Tensor& b);

/// Accumulates matmul multiply-accumulate counts per tag while alive.
/// Only forward matmuls are counted.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t total() const;
  std::uint64_t count(const std::string& tag) const;
  /// `prefix` itself plus every tag nested below it.
  std::uint64_t count_under(const std::string& prefix) const;
  const std::map<std::string, std::uint64_t>& by_tag() const { return counts_; }
  void add(std::uint64_t macs);

  static MacCounter* current();

 private:
  std::map<std::string, std::uint64_t> counts_;
  MacCounter* previous_;
};

/// Labels matmuls issued while alive. Nested tags join with '/'.
class MacTag {
 public:
  explicit MacTag(std::string tag);
  ~MacTag();
  MacTag(const MacTag&) = delete;
  MacTag& operator=(const MacTag&) = delete;
  static const std::string& current();

 private:
  std::string previous_;
};

}  // namespace dyngrain
