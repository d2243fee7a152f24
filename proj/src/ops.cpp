#include "dyngrain/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dyngrain {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

int normalize_axis(int axis, int rank, const Shape& shape) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for shape " + to_string(shape));
  }
  return a;
}

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& shorter, const Shape& longer) {
  if (shorter.size() > longer.size()) return false;
  return std::equal(shorter.rbegin(), shorter.rend(), longer.rbegin());
}

struct Broadcast {
  Shape out;
  std::int64_t n = 0, inner_a = 0, inner_b = 0;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast r;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) {
    r.out = sa;
  } else if (is_suffix(sb, sa)) {
    r.out = sa;
  } else if (is_suffix(sa, sb)) {
    r.out = sb;
  } else {
    throw ShapeError(std::string(op) + ": shapes " + to_string(sa) + " and " + to_string(sb) +
                     " are not trailing-broadcast compatible");
  }
  r.n = numel(r.out);
  r.inner_a = a.numel();
  r.inner_b = b.numel();
  return r;
}

// Visits every output index of a trailing broadcast as (out, a index, b index)
// in blocks, so the inner loop has no modulo and vectorizes.
template <typename Fn>
void for_each_broadcast(std::int64_t n, std::int64_t inner_a, std::int64_t inner_b, Fn fn) {
  if (inner_a == n && inner_b == n) {
    for (std::int64_t i = 0; i < n; ++i) fn(i, i, i);
  } else if (inner_a == n) {
    for (std::int64_t base = 0; base < n; base += inner_b)
      for (std::int64_t j = 0; j < inner_b; ++j) fn(base + j, base + j, j);
  } else {
    for (std::int64_t base = 0; base < n; base += inner_a)
      for (std::int64_t j = 0; j < inner_a; ++j) fn(base + j, j, base + j);
  }
}

template <typename F, typename GA, typename GB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, GA ga, GB gb) {
  const auto bc = broadcast(a, b, name);
  const float* xa = a.data().data();
  const float* xb = b.data().data();
  std::vector<float> out(static_cast<std::size_t>(bc.n));
  float* po = out.data();
  for_each_broadcast(bc.n, bc.inner_a, bc.inner_b,
                     [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { po[i] = f(xa[ia], xb[ib]); });
  auto na = a.node();
  auto nb = b.node();
  return make_result(bc.out, std::move(out), {a, b}, [na, nb, bc, ga, gb](detail::Node& o) {
    const float* g = o.grad.data();
    const float* da = na->data.data();
    const float* db = nb->data.data();
    if (na->requires_grad) {
      na->ensure_grad();
      float* ra = na->grad.data();
      for_each_broadcast(bc.n, bc.inner_a, bc.inner_b,
                         [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                           ra[ia] += g[i] * ga(da[ia], db[ib]);
                         });
    }
    if (nb->requires_grad) {
      nb->ensure_grad();
      float* rb = nb->grad.data();
      for_each_broadcast(bc.n, bc.inner_a, bc.inner_b,
                         [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                           rb[ib] += g[i] * gb(da[ia], db[ib]);
                         });
    }
  });
}

thread_local MacCounter* g_counter = nullptr;
thread_local std::string g_tag = "untagged";

void count_macs(std::uint64_t macs) {
  if (g_counter) g_counter->add(macs);
}

}  // namespace

// Unary ops need the output node in the adjoint; build them explicitly.
#define DYNGRAIN_UNARY(NAME, FWD, BWD)                                                   \
  Tensor NAME(const Tensor& a) {                                                        \
    const auto x = a.data();                                                            \
    std::vector<float> out(x.size());                                                   \
    for (std::size_t i = 0; i < x.size(); ++i) {                                        \
      const float v = x[i];                                                             \
      out[i] = (FWD);                                                                   \
    }                                                                                   \
    auto na = a.node();                                                                 \
    return make_result(a.shape(), std::move(out), {a}, [na](detail::Node& o) {          \
      if (!na->requires_grad) return;                                                   \
      na->ensure_grad();                                                                \
      for (std::size_t i = 0; i < o.data.size(); ++i) {                                 \
        const float v = na->data[i];                                                    \
        const float y = o.data[i];                                                      \
        (void)v;                                                                        \
        (void)y;                                                                        \
        na->grad[i] += o.grad[i] * (BWD);                                               \
      }                                                                                 \
    });                                                                                 \
  }

DYNGRAIN_UNARY(exp, std::exp(v), y)
DYNGRAIN_UNARY(square, v * v, 2.0f * v)
DYNGRAIN_UNARY(tanh, std::tanh(v), 1.0f - y * y)
DYNGRAIN_UNARY(sigmoid, 1.0f / (1.0f + std::exp(-v)), y * (1.0f - y))
DYNGRAIN_UNARY(silu, v / (1.0f + std::exp(-v)),
               (1.0f / (1.0f + std::exp(-v))) * (1.0f + v * (1.0f - 1.0f / (1.0f + std::exp(-v)))))
DYNGRAIN_UNARY(neg, -v, -1.0f)

#undef DYNGRAIN_UNARY

Tensor log(const Tensor& a) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0f)) throw ValueError("log of non-positive value " + std::to_string(x[i]));
    out[i] = std::log(x[i]);
  }
  auto na = a.node();
  return make_result(a.shape(), std::move(out), {a}, [na](detail::Node& o) {
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) na->grad[i] += o.grad[i] / na->data[i];
  });
}

Tensor gelu(const Tensor& a) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float c = 0.044715f;
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float v = x[i];
    out[i] = 0.5f * v * (1.0f + std::tanh(k * (v + c * v * v * v)));
  }
  auto na = a.node();
  return make_result(a.shape(), std::move(out), {a}, [na](detail::Node& o) {
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      const float v = na->data[i];
      const float u = k * (v + c * v * v * v);
      const float th = std::tanh(u);
      const float du = k * (1.0f + 3.0f * c * v * v);
      na->grad[i] += o.grad[i] * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](float x, float y) { return x / y; },
      [](float, float y) { return 1.0f / y; }, [](float x, float y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, float s) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
  auto na = a.node();
  return make_result(a.shape(), std::move(out), {a}, [na](detail::Node& o) {
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) na->grad[i] += o.grad[i];
  });
}

Tensor mul_scalar(const Tensor& a, float s) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  auto na = a.node();
  return make_result(a.shape(), std::move(out), {a}, [na, s](detail::Node& o) {
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) na->grad[i] += o.grad[i] * s;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::int64_t m = a.dim(-2), p = a.dim(-1);
  const std::int64_t pb = b.dim(-2), n = b.dim(-1);
  if (p != pb) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const bool shared_b = b.rank() == 2;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::int64_t batch = a.numel() / (m * p);
  if (!shared_b) {
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (ba != bb) {
      throw ShapeError("matmul batch dimensions differ: " + to_string(a.shape()) + " x " +
                       to_string(b.shape()));
    }
  }
  std::vector<float> out(static_cast<std::size_t>(numel(out_shape)));
  const float* A = a.data().data();
  const float* B = b.data().data();
  if (shared_b) {
    const std::int64_t rows = batch * m;
    MutMap(out.data(), rows, n).noalias() = ConstMap(A, rows, p) * ConstMap(B, p, n);
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * m * n, m, n).noalias() =
          ConstMap(A + i * m * p, m, p) * ConstMap(B + i * p * n, p, n);
    }
  }
  count_macs(static_cast<std::uint64_t>(batch * m * p * n));
  auto na = a.node();
  auto nb = b.node();
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [na, nb, batch, m, p, n, shared_b](detail::Node& o) {
                       const float* G = o.grad.data();
                       if (na->requires_grad) na->ensure_grad();
                       if (nb->requires_grad) nb->ensure_grad();
                       if (shared_b) {
                         const std::int64_t rows = batch * m;
                         if (na->requires_grad) {
                           MutMap(na->grad.data(), rows, p).noalias() +=
                               ConstMap(G, rows, n) * ConstMap(nb->data.data(), p, n).transpose();
                         }
                         if (nb->requires_grad) {
                           MutMap(nb->grad.data(), p, n).noalias() +=
                               ConstMap(na->data.data(), rows, p).transpose() * ConstMap(G, rows, n);
                         }
                         return;
                       }
                       for (std::int64_t i = 0; i < batch; ++i) {
                         const float* Gi = G + i * m * n;
                         if (na->requires_grad) {
                           MutMap(na->grad.data() + i * m * p, m, p).noalias() +=
                               ConstMap(Gi, m, n) *
                               ConstMap(nb->data.data() + i * p * n, p, n).transpose();
                         }
                         if (nb->requires_grad) {
                           MutMap(nb->grad.data() + i * p * n, p, n).noalias() +=
                               ConstMap(na->data.data() + i * m * p, m, p).transpose() *
                               ConstMap(Gi, m, n);
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() == 1) {
    return reshape(linear(reshape(x, {1, x.dim(0)}), weight, bias), {weight.dim(1)});
  }
  return add(matmul(x, weight), bias);
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t k = 0; k < sp.inner; ++k) {
      const std::int64_t base = o * sp.len * sp.inner + k;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::int64_t j = 0; j < sp.len; ++j) {
        const float v = in[base + j * sp.inner];
        if (!std::isfinite(v)) throw ValueError("softmax input is not finite");
        mx = std::max(mx, v);
      }
      float total = 0.0f;
      for (std::int64_t j = 0; j < sp.len; ++j) {
        const float e = std::exp(in[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        total += e;
      }
      const float inv = 1.0f / total;
      for (std::int64_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] *= inv;
    }
  }
  auto nx = x.node();
  return make_result(x.shape(), std::move(out), {x}, [nx, sp](detail::Node& o) {
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
      for (std::int64_t k = 0; k < sp.inner; ++k) {
        const std::int64_t base = oi * sp.len * sp.inner + k;
        float dot = 0.0f;
        for (std::int64_t j = 0; j < sp.len; ++j) {
          const auto idx = base + j * sp.inner;
          dot += o.grad[idx] * o.data[idx];
        }
        for (std::int64_t j = 0; j < sp.len; ++j) {
          const auto idx = base + j * sp.inner;
          nx->grad[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t k = 0; k < sp.inner; ++k) {
      const std::int64_t base = o * sp.len * sp.inner + k;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::int64_t j = 0; j < sp.len; ++j) {
        const float v = in[base + j * sp.inner];
        if (!std::isfinite(v)) throw ValueError("log_softmax input is not finite");
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::int64_t j = 0; j < sp.len; ++j) total += std::exp(double(in[base + j * sp.inner] - mx));
      const float lse = mx + static_cast<float>(std::log(total));
      for (std::int64_t j = 0; j < sp.len; ++j) {
        out[base + j * sp.inner] = in[base + j * sp.inner] - lse;
      }
    }
  }
  auto nx = x.node();
  return make_result(x.shape(), std::move(out), {x}, [nx, sp](detail::Node& o) {
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
      for (std::int64_t k = 0; k < sp.inner; ++k) {
        const std::int64_t base = oi * sp.len * sp.inner + k;
        float gsum = 0.0f;
        for (std::int64_t j = 0; j < sp.len; ++j) gsum += o.grad[base + j * sp.inner];
        for (std::int64_t j = 0; j < sp.len; ++j) {
          const auto idx = base + j * sp.inner;
          nx->grad[idx] += o.grad[idx] - std::exp(o.data[idx]) * gsum;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, float eps) {
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  const auto in = x.data();
  std::vector<float> out(in.size());
  std::vector<float> rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = in.data() + r * d;
    double mu = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<float>(rs);
    for (std::int64_t i = 0; i < d; ++i) out[r * d + i] = static_cast<float>((row[i] - mu) * rs);
  }
  auto nx = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [nx, d, rows, rstd = std::move(rstd)](detail::Node& o) {
                       if (!nx->requires_grad) return;
                       nx->ensure_grad();
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const float* g = o.grad.data() + r * d;
                         const float* y = o.data.data() + r * d;
                         float mg = 0.0f, mgy = 0.0f;
                         for (std::int64_t i = 0; i < d; ++i) {
                           mg += g[i];
                           mgy += g[i] * y[i];
                         }
                         mg /= static_cast<float>(d);
                         mgy /= static_cast<float>(d);
                         float* dx = nx->grad.data() + r * d;
                         for (std::int64_t i = 0; i < d; ++i) {
                           dx[i] += rstd[r] * (g[i] - mg - y[i] * mgy);
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  auto nx = x.node();
  return make_result({1}, {static_cast<float>(total)}, {x}, [nx](detail::Node& o) {
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (auto& g : nx->grad) g += o.grad[0];
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + ax);
    if (out_shape.empty()) out_shape.push_back(1);
  }
  const auto in = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0f);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t j = 0; j < sp.len; ++j) {
      const float* src = in.data() + (o * sp.len + j) * sp.inner;
      float* dst = out.data() + o * sp.inner;
      for (std::int64_t k = 0; k < sp.inner; ++k) dst[k] += src[k];
    }
  }
  auto nx = x.node();
  return make_result(std::move(out_shape), std::move(out), {x}, [nx, sp](detail::Node& o) {
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
      for (std::int64_t j = 0; j < sp.len; ++j) {
        float* dst = nx->grad.data() + (oi * sp.len + j) * sp.inner;
        const float* g = o.grad.data() + oi * sp.inner;
        for (std::int64_t k = 0; k < sp.inner; ++k) dst[k] += g[k];
      }
    }
  });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const float len = static_cast<float>(x.dim(axis));
  return mul_scalar(sum(x, axis, keepdim), 1.0f / len);
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape allows a single -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  auto nx = x.node();
  return make_result(std::move(shape), std::move(out), {x}, [nx](detail::Node& o) {
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx->grad[i] += o.grad[i];
  });
}

namespace {

// Source offset of every output element of a permutation, in output order.
std::vector<std::int64_t> permute_offsets(const Shape& in_shape, const std::vector<int>& perm) {
  const std::size_t r = in_shape.size();
  std::vector<std::int64_t> in_stride(r, 1);
  for (int i = static_cast<int>(r) - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  Shape out_shape(r);
  std::vector<std::int64_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  const std::int64_t n = numel(in_shape);
  std::vector<std::int64_t> offsets(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    offsets[flat] = off;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) {
        off += stride[d];
        break;
      }
      off -= stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return offsets;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw ShapeError("permute order has wrong length for shape " + to_string(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p]) throw ShapeError("permute order is not a permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];
  auto offsets = permute_offsets(x.shape(), perm);
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[offsets[i]];
  auto nx = x.node();
  return make_result(std::move(out_shape), std::move(out), {x},
                     [nx, offsets = std::move(offsets)](detail::Node& o) {
                       if (!nx->requires_grad) return;
                       nx->ensure_grad();
                       for (std::size_t i = 0; i < o.grad.size(); ++i) {
                         nx->grad[offsets[i]] += o.grad[i];
                       }
                     });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const int a = normalize_axis(axis0, x.rank(), x.shape());
  const int b = normalize_axis(axis1, x.rank(), x.shape());
  std::vector<int> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[a], perm[b]);
  return permute(x, perm);
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  if (start < 0 || length <= 0 || start + length > sp.len) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range on axis " + std::to_string(axis) + " of " +
                     to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const auto in = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * length * sp.inner));
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    std::copy_n(in.data() + (o * sp.len + start) * sp.inner, length * sp.inner,
                out.data() + o * length * sp.inner);
  }
  auto nx = x.node();
  return make_result(std::move(out_shape), std::move(out), {x},
                     [nx, sp, start, length](detail::Node& o) {
                       if (!nx->requires_grad) return;
                       nx->ensure_grad();
                       for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                         float* dst = nx->grad.data() + (oi * sp.len + start) * sp.inner;
                         const float* g = o.grad.data() + oi * length * sp.inner;
                         for (std::int64_t k = 0; k < length * sp.inner; ++k) dst[k] += g[k];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const int ax = normalize_axis(axis, xs[0].rank(), xs[0].shape());
  Shape out_shape = xs[0].shape();
  std::int64_t total = 0;
  for (const auto& t : xs) {
    Shape s = t.shape();
    if (s.size() != out_shape.size()) {
      throw ShapeError("concat rank mismatch: " + to_string(xs[0].shape()) + " vs " + to_string(s));
    }
    s[ax] = out_shape[ax];
    if (s != out_shape) {
      throw ShapeError("concat shape mismatch: " + to_string(xs[0].shape()) + " vs " +
                       to_string(t.shape()));
    }
    total += t.dim(ax);
  }
  out_shape[ax] = total;
  const auto sp = split_at(out_shape, ax);
  std::vector<float> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t cursor = 0;
  for (const auto& t : xs) {
    offsets.push_back(cursor);
    const std::int64_t len = t.dim(ax);
    const auto in = t.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(in.data() + o * len * sp.inner, len * sp.inner,
                  out.data() + (o * total + cursor) * sp.inner);
    }
    cursor += len;
  }
  std::vector<detail::NodePtr> nodes;
  for (const auto& t : xs) nodes.push_back(t.node());
  return make_result(std::move(out_shape), std::move(out), xs,
                     [nodes, offsets, sp, total](detail::Node& o) {
                       for (std::size_t t = 0; t < nodes.size(); ++t) {
                         auto& n = *nodes[t];
                         if (!n.requires_grad) continue;
                         n.ensure_grad();
                         const std::int64_t len =
                             static_cast<std::int64_t>(n.data.size()) / (sp.outer * sp.inner);
                         for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                           const float* g = o.grad.data() + (oi * total + offsets[t]) * sp.inner;
                           float* dst = n.grad.data() + oi * len * sp.inner;
                           for (std::int64_t k = 0; k < len * sp.inner; ++k) dst[k] += g[k];
                         }
                       }
                     });
}

Tensor gather(const Tensor& x, int axis, std::span<const std::int64_t> index) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  if (index.empty()) throw ShapeError("gather with an empty index");
  for (auto i : index) {
    if (i < 0 || i >= sp.len) {
      throw ShapeError("gather index " + std::to_string(i) + " out of range for axis extent " +
                       std::to_string(sp.len));
    }
  }
  const std::int64_t m = static_cast<std::int64_t>(index.size());
  Shape out_shape = x.shape();
  out_shape[ax] = m;
  const auto in = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * m * sp.inner));
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t j = 0; j < m; ++j) {
      std::copy_n(in.data() + (o * sp.len + index[j]) * sp.inner, sp.inner,
                  out.data() + (o * m + j) * sp.inner);
    }
  }
  auto nx = x.node();
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return make_result(std::move(out_shape), std::move(out), {x},
                     [nx, sp, m, idx = std::move(idx)](detail::Node& o) {
                       if (!nx->requires_grad) return;
                       nx->ensure_grad();
                       for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                         for (std::int64_t j = 0; j < m; ++j) {
                           float* dst = nx->grad.data() + (oi * sp.len + idx[j]) * sp.inner;
                           const float* g = o.grad.data() + (oi * m + j) * sp.inner;
                           for (std::int64_t k = 0; k < sp.inner; ++k) dst[k] += g[k];
                         }
                       }
                     });
}

Tensor scatter(const Tensor& x, int axis, std::span<const std::int64_t> index,
               std::int64_t extent) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  if (static_cast<std::int64_t>(index.size()) != sp.len) {
    throw ShapeError("scatter index length " + std::to_string(index.size()) +
                     " does not match axis extent of " + to_string(x.shape()));
  }
  for (auto i : index) {
    if (i < 0 || i >= extent) throw ShapeError("scatter index out of range");
  }
  Shape out_shape = x.shape();
  out_shape[ax] = extent;
  const auto in = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * extent * sp.inner), 0.0f);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t j = 0; j < sp.len; ++j) {
      const float* src = in.data() + (o * sp.len + j) * sp.inner;
      float* dst = out.data() + (o * extent + index[j]) * sp.inner;
      for (std::int64_t k = 0; k < sp.inner; ++k) dst[k] += src[k];
    }
  }
  auto nx = x.node();
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return make_result(std::move(out_shape), std::move(out), {x},
                     [nx, sp, extent, idx = std::move(idx)](detail::Node& o) {
                       if (!nx->requires_grad) return;
                       nx->ensure_grad();
                       for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                         for (std::int64_t j = 0; j < sp.len; ++j) {
                           float* dst = nx->grad.data() + (oi * sp.len + j) * sp.inner;
                           const float* g = o.grad.data() + (oi * extent + idx[j]) * sp.inner;
                           for (std::int64_t k = 0; k < sp.inner; ++k) dst[k] += g[k];
                         }
                       }
                     });
}

namespace {

struct ConvGeom {
  std::int64_t n, h, w, c, kh, kw, o, ho, wo;
  int stride, pad;
  std::int64_t patch() const { return kh * kw * c; }
  std::int64_t rows() const { return n * ho * wo; }
};

void im2col(const float* x, const ConvGeom& g, float* cols) {
  for (std::int64_t b = 0; b < g.n; ++b) {
    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        float* row = cols + ((b * g.ho + oy) * g.wo + ox) * g.patch();
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            float* dst = row + (ky * g.kw + kx) * g.c;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill_n(dst, g.c, 0.0f);
            } else {
              std::copy_n(x + ((b * g.h + iy) * g.w + ix) * g.c, g.c, dst);
            }
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, float* dx) {
  for (std::int64_t b = 0; b < g.n; ++b) {
    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        const float* row = cols + ((b * g.ho + oy) * g.wo + ox) * g.patch();
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const float* src = row + (ky * g.kw + kx) * g.c;
            float* dst = dx + ((b * g.h + iy) * g.w + ix) * g.c;
            for (std::int64_t k = 0; k < g.c; ++k) dst[k] += src[k];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d expects NHWC input and [kh,kw,cin,cout] weight, got " +
                     to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  ConvGeom g{};
  g.n = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c = x.dim(3);
  g.kh = weight.dim(0);
  g.kw = weight.dim(1);
  g.o = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(2) != g.c) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + ", weight " +
                     to_string(weight.shape()));
  }
  if (bias.numel() != g.o) throw ShapeError("conv2d bias shape " + to_string(bias.shape()));
  if (stride <= 0 || padding < 0) throw ShapeError("conv2d stride must be positive");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d output would be empty");
  std::vector<float> cols(static_cast<std::size_t>(g.rows() * g.patch()));
  im2col(x.data().data(), g, cols.data());
  std::vector<float> out(static_cast<std::size_t>(g.rows() * g.o));
  MutMap Y(out.data(), g.rows(), g.o);
  Y.noalias() = ConstMap(cols.data(), g.rows(), g.patch()) *
                ConstMap(weight.data().data(), g.patch(), g.o);
  const float* bp = bias.data().data();
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    for (std::int64_t k = 0; k < g.o; ++k) out[r * g.o + k] += bp[k];
  }
  auto nx = x.node();
  auto nw = weight.node();
  auto nb = bias.node();
  return make_result({g.n, g.ho, g.wo, g.o}, std::move(out), {x, weight, bias},
                     [nx, nw, nb, g](detail::Node& o) {
                       ConstMap G(o.grad.data(), g.rows(), g.o);
                       if (nb->requires_grad) {
                         nb->ensure_grad();
                         for (std::int64_t r = 0; r < g.rows(); ++r) {
                           for (std::int64_t k = 0; k < g.o; ++k) nb->grad[k] += o.grad[r * g.o + k];
                         }
                       }
                       if (nw->requires_grad) {
                         nw->ensure_grad();
                         std::vector<float> cols(static_cast<std::size_t>(g.rows() * g.patch()));
                         im2col(nx->data.data(), g, cols.data());
                         MutMap(nw->grad.data(), g.patch(), g.o).noalias() +=
                             ConstMap(cols.data(), g.rows(), g.patch()).transpose() * G;
                       }
                       if (nx->requires_grad) {
                         nx->ensure_grad();
                         std::vector<float> dcols(static_cast<std::size_t>(g.rows() * g.patch()));
                         MutMap(dcols.data(), g.rows(), g.patch()).noalias() =
                             G * ConstMap(nw->data.data(), g.patch(), g.o).transpose();
                         col2im(dcols.data(), g, nx->grad.data());
                       }
                     });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  return mean(square(sub(a, b)));
}

MacCounter::MacCounter() : previous_(g_counter) { g_counter = this; }
MacCounter::~MacCounter() { g_counter = previous_; }

std::uint64_t MacCounter::total() const {
  std::uint64_t t = 0;
  for (const auto& [k, v] : counts_) t += v;
  return t;
}

std::uint64_t MacCounter::count(const std::string& tag) const {
  auto it = counts_.find(tag);
  return it == counts_.end() ? 0 : it->second;
}

void MacCounter::add(std::uint64_t macs) { counts_[g_tag] += macs; }

std::uint64_t MacCounter::count_under(const std::string& prefix) const {
  std::uint64_t t = 0;
  for (const auto& [k, v] : counts_) {
    if (k == prefix || k.rfind(prefix + "/", 0) == 0) t += v;
  }
  return t;
}

MacCounter* MacCounter::current() { return g_counter; }

MacTag::MacTag(std::string tag) : previous_(g_tag) {
  g_tag = previous_ == "untagged" ? std::move(tag) : previous_ + "/" + tag;
}
MacTag::~MacTag() { g_tag = previous_; }
const std::string& MacTag::current() { return g_tag; }

}  // namespace dyngrain
