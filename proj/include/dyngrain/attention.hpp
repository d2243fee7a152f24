#pragma once

#include "dyngrain/nn.hpp"

namespace dyngrain {

/// Multi-head self-attention over [B, N, d] with an optional additive score
/// bias [N, N] shared by every head and batch entry.
struct Attention {
  Linear qkv;
  Linear proj;
  std::int64_t heads = 1;

  Attention() = default;
  Attention(std::int64_t dim, std::int64_t heads, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor* bias = nullptr) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Two-layer GELU MLP with hidden width ratio * d.
struct Mlp {
  Linear fc1, fc2;
  Mlp() = default;
  Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, NamedParams& out) const;
};

}  // namespace dyngrain
