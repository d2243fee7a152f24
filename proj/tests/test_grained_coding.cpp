#include <doctest.h>

#include <cmath>
#include <limits>

#include "dyngrain/grained_coding.hpp"
#include "dyngrain/oracles.hpp"
#include "dyngrain/rng.hpp"

using namespace dyngrain;

TEST_CASE("grayscale luma") {
  CHECK(to_grayscale(Tensor::ones({4, 4, 3})).data()[5] == doctest::Approx(1.0f));
  Tensor red({2, 2, 3});
  for (int i = 0; i < 4; ++i) red.mutable_data()[3 * i] = 1.0f;
  auto luma = to_grayscale(red);
  for (float v : luma.data()) CHECK(v == doctest::Approx(0.299f));
  Rng rng(1);
  Tensor img = rand_uniform({5, 5, 3}, rng);
  auto y = to_grayscale(img);
  for (int i = 0; i < 25; ++i) {
    const float lo = std::min({img[3 * i], img[3 * i + 1], img[3 * i + 2]});
    const float hi = std::max({img[3 * i], img[3 * i + 1], img[3 * i + 2]});
    CHECK(y[i] >= lo - 1e-6f);
    CHECK(y[i] <= hi + 1e-6f);
  }
  CHECK_THROWS_AS(to_grayscale(Tensor({4, 4, 4})), ShapeError);
}

TEST_CASE("region pdf and entropy examples") {
  const auto bins = bin_centers(4);
  std::vector<float> black(4, 0.0f);
  auto pdf = region_pdf(black, bins);
  CHECK(pdf[0] == doctest::Approx(1.0));
  CHECK(pdf[1] == 0.0);
  CHECK(pdf[3] == 0.0);
  CHECK(region_entropy(pdf) == 0.0);

  std::vector<float> split = {0, 0, 1, 1};
  pdf = region_pdf(split, bins);
  CHECK(pdf[0] == doctest::Approx(0.5));
  CHECK(pdf[3] == doctest::Approx(0.5));
  CHECK(region_entropy(pdf) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  std::vector<double> quarter(4, 0.25);
  CHECK(region_entropy(quarter) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  std::vector<double> neg = {0.5, -0.1};
  CHECK_THROWS_AS(region_entropy(neg), ValueError);
  CHECK_THROWS_AS(region_pdf(split, bin_centers(9)), ShapeError);
  CHECK_THROWS_AS(region_pdf(split, bins, 0.0), ValueError);

  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto region = rand_uniform({16}, rng);
    for (double p : region_pdf(region.data(), bin_centers(16))) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
  }
}

TEST_CASE("entropy map matches the naive oracle") {
  Rng rng(100);
  for (int t = 0; t < 100; ++t) {
    Tensor gray = rand_uniform({32, 32, 1}, rng);
    auto fast = entropy_map(gray, 8);
    auto slow = oracle::naive_entropy_map(gray, 8);
    REQUIRE(fast.values.size() == slow.values.size());
    for (std::size_t i = 0; i < fast.values.size(); ++i) {
      CHECK(std::abs(fast.values[i] - slow.values[i]) <= 1e-6);
    }
  }
}

TEST_CASE("entropy map structure") {
  // Neighbouring bins sit 6.7 sigma away at S = 4, so the tails leave ~5e-9.
  auto flat = entropy_map(Tensor({16, 16, 1}, 1.0f), 4);
  for (double v : flat.values) CHECK(v < 1e-8);
  auto flat2 = entropy_map(Tensor({4, 4, 1}, 0.0f), 2);
  for (double v : flat2.values) CHECK(v < 1e-200);

  Tensor img({16, 16, 1}, 0.4f);
  Rng rng(4);
  for (int y = 4; y < 8; ++y)
    for (int x = 8; x < 12; ++x) img.mutable_data()[y * 16 + x] = static_cast<float>(rng.uniform());
  auto em = entropy_map(img, 4);
  const double textured = em.at(1, 2);
  for (std::int64_t i = 0; i < em.rows * em.cols; ++i) {
    if (i != 1 * 4 + 2) CHECK(em.values[i] < textured);
  }
  CHECK_THROWS_AS(entropy_map(Tensor({10, 16, 1}), 4), ShapeError);

  Tensor g = rand_uniform({16, 16, 1}, rng);
  auto a = entropy_map(g, 4), b = entropy_map(g, 4);
  CHECK(a.values == b.values);
}

TEST_CASE("calibration order statistics") {
  EntropyMap em{1, 4, {1, 2, 3, 4}};
  std::vector<EntropyMap> corpus{em};
  auto th = calibrate_thresholds(corpus, GrainRatios::dual(0.5));
  CHECK(th.t[0] == 2.0);
  auto map = assign_grain_map(em, th);
  CHECK(map.cells == std::vector<int>{2, 2, 1, 1});

  auto all_fine = calibrate_thresholds(corpus, GrainRatios::dual(1.0));
  CHECK(all_fine.t[0] == -std::numeric_limits<double>::infinity());
  CHECK(assign_grain_map(em, all_fine).count_level(1) == 4);
  auto all_coarse = calibrate_thresholds(corpus, GrainRatios::dual(0.0));
  CHECK(all_coarse.t[0] == std::numeric_limits<double>::infinity());
  CHECK(assign_grain_map(em, all_coarse).count_level(2) == 4);

  CHECK_THROWS_AS(calibrate_thresholds(std::vector<EntropyMap>{}, GrainRatios::dual(0.5)),
                  ValueError);
  CHECK_THROWS_AS(GrainRatios({{0.7, 0.7}}).validate(), ValueError);
}

TEST_CASE("calibration realises requested ratios") {
  Rng rng(9);
  for (double rho : {0.1, 0.25, 0.5, 0.73, 0.9}) {
    std::vector<EntropyMap> corpus;
    std::int64_t n = 0;
    for (int m = 0; m < 20; ++m) {
      EntropyMap em{8, 8, {}};
      for (int i = 0; i < 64; ++i) em.values.push_back(rng.uniform() * 3.0);
      n += 64;
      corpus.push_back(em);
    }
    auto th = calibrate_thresholds(corpus, GrainRatios::dual(rho));
    std::int64_t fine = 0;
    for (const auto& em : corpus) fine += assign_grain_map(em, th).count_level(1);
    CHECK(std::abs(static_cast<double>(fine) / n - rho) <= 1.0 / n);
  }
}

TEST_CASE("grain assignment monotone and per-region") {
  Rng rng(12);
  EntropyThresholds th{{1.5, -std::numeric_limits<double>::infinity()}};
  for (int t = 0; t < 50; ++t) {
    EntropyMap em{4, 4, {}};
    for (int i = 0; i < 16; ++i) em.values.push_back(rng.uniform() * 3.0);
    auto base = assign_grain_map(em, th);
    EntropyMap up = em;
    for (auto& v : up.values) v += rng.uniform();
    auto raised = assign_grain_map(up, th);
    for (int i = 0; i < 16; ++i) CHECK(raised.cells[i] <= base.cells[i]);

    EntropyMap rev = em;
    std::reverse(rev.values.begin(), rev.values.end());
    auto rmap = assign_grain_map(rev, th);
    for (int i = 0; i < 16; ++i) CHECK(rmap.cells[i] == base.cells[15 - i]);
  }
  EntropyMap high{2, 2, {5, 6, 7, 8}};
  CHECK(assign_grain_map(high, th).count_level(1) == 4);
}

TEST_CASE("grain map tensor round trip") {
  GrainMap g(2, 3, 2);
  g.at(1, 1) = 1;
  CHECK(GrainMap::from_tensor(g.to_tensor()) == g);
  CHECK_THROWS_AS(GrainMap::from_tensor(Tensor({2, 2}, 0.5f)), ValueError);
}
