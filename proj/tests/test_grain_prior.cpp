#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dyngrain/grain_prior.hpp"
#include "dyngrain/gradcheck.hpp"

using namespace dyngrain;

namespace {

GrainPriorConfig tiny() {
  GrainPriorConfig c;
  c.rows = c.cols = 4;
  c.hidden = 16;
  c.heads = 2;
  c.depth = 1;
  c.num_classes = 3;
  return c;
}

}  // namespace

TEST_CASE("grain prior forward shape, determinism, positional asymmetry") {
  Rng init(1);
  GrainPrior model(tiny(), init);
  Rng r1(5), r2(5);
  auto n1 = model.draw_noise(2, r1);
  auto n2 = model.draw_noise(2, r2);
  std::vector<std::int64_t> cls{0, 3};
  NoGradGuard ng;
  auto a = model.forward(n1, cls), b = model.forward(n2, cls);
  CHECK(a.shape() == Shape{2, 16, 2});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  std::vector<std::int64_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  auto permuted = model.forward(gather(n1, 1, perm), cls);
  auto expected = gather(a, 1, perm);
  double diff = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) diff += std::abs(permuted[i] - expected[i]);
  CHECK(diff > 1e-4);

  CHECK_THROWS_AS(model.forward(Tensor({1, 15, 16}), std::vector<std::int64_t>{0}), ShapeError);
}

TEST_CASE("class embedding changes logits once nonzero") {
  Rng init(2);
  GrainPrior model(tiny(), init);
  Rng r(3);
  auto noise = model.draw_noise(1, r);
  NoGradGuard ng;
  std::vector<std::int64_t> c0{0}, c1{1};
  auto a = model.forward(noise, c0), b = model.forward(noise, c1);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  for (auto& [name, p] : model.parameters()) {
    if (name == "class_embed") {
      Rng fill(9);
      for (auto& v : p.mutable_data()) v = fill.normal();
    }
  }
  auto c = model.forward(noise, c0), d = model.forward(noise, c1);
  CHECK_FALSE(std::equal(c.data().begin(), c.data().end(), d.data().begin()));
}

TEST_CASE("cross entropy examples") {
  std::vector<GrainMap> t{GrainMap(2, 2, 1)};
  t[0].at(0, 1) = 2;
  CHECK(grain_ce_loss(Tensor({1, 4, 2}), t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  Tensor confident({1, 4, 2});
  for (int r = 0; r < 4; ++r) confident.mutable_data()[r * 2 + t[0].cells[r] - 1] = 10.0f;
  CHECK(grain_ce_loss(confident, t).item() == doctest::Approx(4.53989e-5).epsilon(1e-3));
  CHECK(grain_ce_loss(confident, t).item() >= 0.0f);
  CHECK_THROWS_AS(grain_ce_loss(Tensor({1, 3, 2}), t), ShapeError);

  Rng rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<GrainMap> tg(2, GrainMap(2, 3, 1));
    for (auto& g : tg)
      for (auto& c : g.cells) c = 1 + static_cast<int>(rng.below(2));
    auto res = grad_check([&](const std::vector<Tensor>& v) { return grain_ce_loss(v[0], tg); },
                          {randn({2, 6, 2}, rng) * 2.0f});
    INFO(res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("grain prior end-to-end gradient") {
  Rng init(6);
  GrainPrior model(tiny(), init);
  Rng rng(7);
  for (int trial = 0; trial < 3; ++trial) {
    auto noise = model.draw_noise(1, rng);
    std::vector<GrainMap> tg(1, GrainMap(4, 4, 1));
    for (auto& c : tg[0].cells) c = 1 + static_cast<int>(rng.below(2));
    auto res = grad_check(
        [&](const std::vector<Tensor>& v) {
          return grain_ce_loss(model.forward(v[0], std::vector<std::int64_t>{1}), tg);
        },
        {noise});
    INFO(res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("temperature zero sampling and tie rule") {
  Rng rng(8);
  std::vector<float> fine_bias(16 * 2, 0.0f);
  for (int r = 0; r < 16; ++r) fine_bias[r * 2] = 1.0f;
  CHECK(sample_from_logits(fine_bias, 4, 4, 2, 0.0, rng).count_level(1) == 16);
  std::vector<float> equal(32, 0.5f);
  CHECK(sample_from_logits(equal, 4, 4, 2, 0.0, rng).count_level(2) == 16);
  CHECK_THROWS_AS(sample_from_logits(equal, 4, 4, 2, -1.0, rng), ValueError);

  for (int t = 0; t < 20; ++t) {
    std::vector<float> logits(32);
    for (auto& v : logits) v = rng.normal();
    auto base = sample_from_logits(logits, 4, 4, 2, 0.0, rng);
    for (int r = 0; r < 16; ++r) {
      const float shift = rng.normal() * 5.0f;
      logits[2 * r] += shift;
      logits[2 * r + 1] += shift;
    }
    CHECK(sample_from_logits(logits, 4, 4, 2, 0.0, rng) == base);
  }
}

TEST_CASE("temperature one matches softmax frequencies") {
  Rng rng(10);
  std::vector<float> logits{0.3f, -0.4f, 1.2f, 0.0f, -2.0f, 0.5f, 0.0f, 0.0f};
  std::vector<int> fine(4, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto g = sample_from_logits(logits, 2, 2, 2, 1.0, rng);
    for (int r = 0; r < 4; ++r) fine[r] += g.cells[r] == 1;
  }
  for (int r = 0; r < 4; ++r) {
    const double p = 1.0 / (1.0 + std::exp(logits[2 * r + 1] - logits[2 * r]));
    CHECK(std::abs(static_cast<double>(fine[r]) / draws - p) < 0.02);
  }
}

TEST_CASE("sample_grain_map is seeded") {
  Rng init(11);
  GrainPrior model(tiny(), init);
  Rng a(1), b(1);
  CHECK(sample_grain_map(model, a, 2, 1.0) == sample_grain_map(model, b, 2, 1.0));
  auto g = sample_grain_map(model, a, std::nullopt, 0.0);
  CHECK(g.rows == 4);
  CHECK_THROWS_AS(sample_grain_map(model, a, 0, -0.5), ValueError);
}
