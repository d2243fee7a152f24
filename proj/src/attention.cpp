#include "dyngrain/attention.hpp"

#include <cmath>

namespace dyngrain {

Attention::Attention(std::int64_t dim, std::int64_t heads_, Rng& rng)
    : qkv(dim, 3 * dim, rng), proj(dim, dim, rng), heads(heads_) {
  if (dim % heads_ != 0) {
    throw ShapeError("width " + std::to_string(dim) + " is not divisible by " +
                     std::to_string(heads_) + " heads");
  }
}

Tensor Attention::operator()(const Tensor& x, const Tensor* bias) const {
  const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2), dh = d / heads;
  if (bias != nullptr && bias->shape() != Shape{n, n}) {
    throw ShapeError("attention bias " + to_string(bias->shape()) + " does not match " +
                     std::to_string(n) + " tokens");
  }
  Tensor packed;
  {
    MacTag tag("attn.qkv");
    packed = qkv(x);
  }
  // [B, N, 3, H, dh] -> [3, B, H, N, dh]
  packed = permute(reshape(packed, {b, n, 3, heads, dh}), {2, 0, 3, 1, 4});
  const Tensor q = reshape(slice(packed, 0, 0, 1), {b, heads, n, dh});
  const Tensor k = reshape(slice(packed, 0, 1, 1), {b, heads, n, dh});
  const Tensor v = reshape(slice(packed, 0, 2, 1), {b, heads, n, dh});
  Tensor scores;
  {
    MacTag tag("attn.score");
    scores = mul_scalar(matmul(q, transpose(k, 2, 3)), 1.0f / std::sqrt(static_cast<float>(dh)));
  }
  if (bias != nullptr) scores = add(scores, *bias);
  Tensor out;
  {
    MacTag tag("attn.value");
    out = matmul(softmax(scores, -1), v);
  }
  out = reshape(permute(out, {0, 2, 1, 3}), {b, n, d});
  MacTag tag("attn.proj");
  return proj(out);
}

void Attention::collect(const std::string& prefix, NamedParams& out) const {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
}

Mlp::Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

void Mlp::collect(const std::string& prefix, NamedParams& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

}  // namespace dyngrain
