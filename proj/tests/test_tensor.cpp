#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "dyngrain/gft.hpp"
#include "dyngrain/gradcheck.hpp"
#include "dyngrain/ops.hpp"
#include "dyngrain/rng.hpp"

using namespace dyngrain;

namespace {

std::vector<float> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Shape random_shape(Rng& rng, int min_rank, int max_rank) {
  const int rank = min_rank + static_cast<int>(rng.below(max_rank - min_rank + 1));
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(1 + static_cast<std::int64_t>(rng.below(4)));
  return s;
}

}  // namespace

TEST_CASE("elementwise add and mul") {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  CHECK(vals(add(a, b)) == std::vector<float>{4, 6});
  Rng rng(1);
  Tensor x = randn({3, 4}, rng);
  CHECK(vals(mul(x, Tensor::ones(x.shape()))) == vals(x));
}

TEST_CASE("trailing broadcast and its rejection") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3}, {10, 20, 30});
  CHECK(vals(add(a, b)) == std::vector<float>{11, 22, 33, 14, 25, 36});
  Tensor c({4});
  try {
    add(Tensor({2, 3}), c);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4,)") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor({3, 2}), Tensor({3, 1})), ShapeError);
}

TEST_CASE("matmul values, identity and errors") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {5, 6});
  CHECK(vals(matmul(a, b)) == std::vector<float>{17, 39});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Rng rng(3);
  Tensor m = randn({2, 2}, rng);
  CHECK(vals(matmul(eye, m)) == vals(m));
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor({2, 2, 3}), Tensor({3, 3, 1})), ShapeError);
}

TEST_CASE("gradient of sum(A.B) wrt A is ones.B^T") {
  Rng rng(5);
  Tensor A = randn({3, 4}, rng).set_requires_grad();
  Tensor B = randn({4, 2}, rng);
  backward(sum(matmul(A, B)));
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      const float expect = B[k * 2] + B[k * 2 + 1];
      CHECK(A.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax basics") {
  auto s = softmax(Tensor({3}, {0, 0, 0}));
  for (float v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  auto big = softmax(Tensor({2}, {1000, 0}));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0f);
  CHECK(big[1] < 1e-30f);
  CHECK_THROWS_AS(softmax(Tensor({2}, {NAN, 0})), ValueError);

  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = randn({3, 5, 2}, rng) * 4.0f;
    for (int axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      auto total = sum(y, axis);
      for (float v : total.data()) CHECK(std::abs(v - 1.0f) < 1e-6f);
      for (float v : y.data()) CHECK(v >= 0.0f);
    }
  }
}

TEST_CASE("backward on simple roots") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  backward(sum(square(x)));
  CHECK(vals(Tensor({2}, {x.grad()[0], x.grad()[1]})) == std::vector<float>{2, 4});

  Tensor y = Rng(2).normal() * Tensor::ones({5});
  y.set_requires_grad();
  backward(sum(y));
  for (float g : y.grad()) CHECK(g == 1.0f);

  CHECK_THROWS_AS(backward(mul_scalar(y, 2.0f)), ShapeError);
  Tape::active().clear();
}

TEST_CASE("tape is cleared after backward") {
  Tensor x = Tensor::ones({3}).set_requires_grad();
  auto y = sum(square(x));
  CHECK(Tape::active().size() > 0);
  const auto epoch = Tape::active().epoch();
  backward(y);
  CHECK(Tape::active().size() == 0);
  CHECK(Tape::active().epoch() == epoch + 1);
  {
    NoGradGuard g;
    (void)sum(square(x));
    CHECK(Tape::active().size() == 0);
  }
}

TEST_CASE("layer norm is unit-normalized") {
  Rng rng(8);
  Tensor x = randn({4, 16}, rng) * 3.0f + 2.0f;
  auto y = layer_norm(x);
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int i = 0; i < 16; ++i) m += y[r * 16 + i];
    m /= 16;
    for (int i = 0; i < 16; ++i) v += (y[r * 16 + i] - m) * (y[r * 16 + i] - m);
    CHECK(std::abs(m) < 1e-5);
    CHECK(v / 16 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("scatter(gather(x, perm), perm) == x") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng.below(8));
    Tensor x = randn({3, n, 2}, rng);
    std::vector<std::int64_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    auto back = scatter(gather(x, 1, perm), 1, perm, n);
    CHECK(vals(back) == vals(x));
  }
}

TEST_CASE("shape ops") {
  Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(vals(transpose(x, 0, 1)) == std::vector<float>{0, 3, 1, 4, 2, 5});
  CHECK(vals(slice(x, 1, 1, 2)) == std::vector<float>{1, 2, 4, 5});
  CHECK(vals(concat({x, x}, 0)).size() == 12);
  CHECK(concat({x, slice(x, 1, 0, 1)}, 1).shape() == Shape{2, 4});
  CHECK_THROWS_AS(slice(x, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
  CHECK(reshape(x, {3, -1}).shape() == Shape{3, 2});
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(13);
  Tensor x = randn({2, 5, 6, 3}, rng);
  Tensor w = randn({3, 3, 3, 4}, rng);
  Tensor b = randn({4}, rng);
  for (int stride : {1, 2}) {
    auto y = conv2d(x, w, b, stride, 1);
    const auto ho = y.dim(1), wo = y.dim(2);
    for (int n = 0; n < 2; ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          for (int o = 0; o < 4; ++o) {
            double acc = b[o];
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * stride - 1 + ky, ix = ox * stride - 1 + kx;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                for (int c = 0; c < 3; ++c) {
                  acc += x[((n * 5 + iy) * 6 + ix) * 3 + c] * w[((ky * 3 + kx) * 3 + c) * 4 + o];
                }
              }
            CHECK(y[((n * ho + oy) * wo + ox) * 4 + o] == doctest::Approx(acc).epsilon(1e-5));
          }
  }
}

TEST_CASE("finite-difference agreement on random small shapes") {
  Rng rng(2024);
  INFO("seed 2024");
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s = random_shape(rng, 1, 3);
    const Shape tail(s.begin() + static_cast<std::ptrdiff_t>(rng.below(s.size())), s.end());
    Tensor a = randn(s, rng);
    Tensor b = randn(tail, rng);
    Tensor pos = add_scalar(rand_uniform(s, rng), 0.5f);
    const int axis = static_cast<int>(rng.below(s.size()));

    auto check = [&](const char* name, auto fn, std::vector<Tensor> in) {
      auto r = grad_check([&](const std::vector<Tensor>& v) { return fn(v); },
                          std::move(in));
      INFO(std::string(name) << " trial " << trial << " shape " << to_string(s) << " worst " << r.worst);
      CHECK(r.passed());
    };
    check("add", [](auto& v) { return add(v[0], v[1]); }, {a.clone(), b.clone()});
    check("sub", [](auto& v) { return sub(v[0], v[1]); }, {a.clone(), b.clone()});
    check("mul", [](auto& v) { return mul(v[0], v[1]); }, {a.clone(), b.clone()});
    check("div", [](auto& v) { return div(v[0], v[1]); }, {a.clone(), add_scalar(square(b), 1.0f)});
    check("exp", [](auto& v) { return exp(v[0]); }, {a.clone()});
    check("log", [](auto& v) { return log(v[0]); }, {pos.clone()});
    check("tanh", [](auto& v) { return tanh(v[0]); }, {a.clone()});
    check("sigmoid", [](auto& v) { return sigmoid(v[0]); }, {a.clone()});
    check("silu", [](auto& v) { return silu(v[0]); }, {a.clone()});
    check("gelu", [](auto& v) { return gelu(v[0]); }, {a.clone()});
    check("softmax", [axis](auto& v) { return softmax(v[0], axis); }, {a.clone()});
    check("log_softmax", [axis](auto& v) { return log_softmax(v[0], axis); }, {a.clone()});
    check("layer_norm", [](auto& v) { return layer_norm(v[0]); },
          {add_scalar(mul_scalar(a, 2.0f), 0.1f)});
    check("sum_axis", [axis](auto& v) { return sum(v[0], axis); }, {a.clone()});
    check("mean_axis", [axis](auto& v) { return mean(v[0], axis, true); }, {a.clone()});
    check("slice", [axis, &s](auto& v) { return slice(v[0], axis, 0, s[axis]); }, {a.clone()});
    check("concat", [axis](auto& v) { return concat({v[0], v[0]}, axis); }, {a.clone()});
    std::vector<int> perm(s.size());
    std::iota(perm.rbegin(), perm.rend(), 0);
    check("permute", [perm](auto& v) { return permute(v[0], perm); }, {a.clone()});
    std::vector<std::int64_t> idx;
    for (int i = 0; i < 5; ++i) idx.push_back(static_cast<std::int64_t>(rng.below(s[axis])));
    check("gather", [axis, idx](auto& v) { return gather(v[0], axis, idx); }, {a.clone()});

    const std::int64_t m = 1 + rng.below(3), p = 1 + rng.below(4), n = 1 + rng.below(3);
    Tensor A = randn({2, m, p}, rng), B = randn({2, p, n}, rng), W = randn({p, n}, rng);
    check("matmul_batched", [](auto& v) { return matmul(v[0], v[1]); }, {A, B});
    check("matmul_shared", [](auto& v) { return matmul(v[0], v[1]); }, {A.clone(), W});
  }
  {
    Rng r2(77);
    Tensor x = randn({2, 5, 4, 3}, r2), w = randn({3, 3, 3, 2}, r2), b = randn({2}, r2);
    auto res = grad_check(
        [](const std::vector<Tensor>& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
        {x, w, b});
    INFO(res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("composite graph gradients") {
  Rng rng(31);
  Tensor x = randn({3, 4}, rng), w = randn({4, 4}, rng);
  auto res = grad_check(
      [](const std::vector<Tensor>& v) {
        auto h = gelu(matmul(v[0], v[1]));
        auto s = softmax(add(h, v[0]), -1);
        return sum(mul(log_softmax(h, 0), s));
      },
      {x, w});
  INFO(res.worst);
  CHECK(res.passed());
}

TEST_CASE("Philox known-answer and determinism") {
  auto out = Rng::philox({0, 0, 0, 0}, {0, 0});
  CHECK(out[0] == 0x6627e8d5u);
  CHECK(out[1] == 0xe169c58du);
  CHECK(out[2] == 0xbc57ac4cu);
  CHECK(out[3] == 0x9b00dbd8u);
  Rng a(42, 3), b(42, 3), c(42, 4);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u32();
    CHECK(va == b.next_u32());
    (void)c;
  }
  CHECK(Rng(42, 3).next_u32() != Rng(42, 4).next_u32());
  CHECK(a.draws() == 100);
}

TEST_CASE("GFT1 round trip and byte layout") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  std::stringstream ss;
  write_gft(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 4 + 2 * 8 + 6 * 4);
  CHECK(bytes.substr(0, 4) == "GFT1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[16]) == 3);
  auto back = read_gft(ss);
  CHECK(back.shape() == t.shape());
  CHECK(vals(back) == vals(t));
  std::stringstream bad("GFT2");
  CHECK_THROWS_AS(read_gft(bad), FormatError);
}

TEST_CASE("MAC counter tags matmuls") {
  MacCounter counter;
  {
    MacTag tag("probe");
    matmul(Tensor({2, 3, 4}), Tensor({2, 4, 5}));
  }
  matmul(Tensor({3, 4}), Tensor({4, 2}));
  CHECK(counter.count("probe") == 2 * 3 * 4 * 5);
  CHECK(counter.count("untagged") == 24);
  CHECK(counter.total() == 144);
}
