#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dyngrain/tensor.hpp"

namespace dyngrain {

/// Non-overlapping S×S pixel tiling of an image.
struct RegionGrid {
  std::int64_t size = 0;
  std::int64_t rows = 0;
  std::int64_t cols = 0;

  static RegionGrid for_image(std::int64_t height, std::int64_t width, std::int64_t size);
  std::int64_t count() const { return rows * cols; }
};

/// Per-region entropies in nats, row-major over the region grid.
struct EntropyMap {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> values;

  double at(std::int64_t r, std::int64_t c) const { return values[r * cols + c]; }
  Tensor to_tensor() const;
  static EntropyMap from_tensor(const Tensor& t);
};

/// Target fraction of regions per granularity, finest first.
struct GrainRatios {
  std::vector<double> r;

  static GrainRatios dual(double fine_fraction) { return {{fine_fraction, 1.0 - fine_fraction}}; }
  std::size_t levels() const { return r.size(); }
  void validate() const;
};

/// Cut points T_1 >= ... >= T_k. A region takes the first level i with
/// entropy strictly above T_i; T_k is always -inf.
struct EntropyThresholds {
  std::vector<double> t;
};

/// Granularity index per region, 1 = finest factor ... k = coarsest.
struct GrainMap {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<int> cells;

  GrainMap() = default;
  GrainMap(std::int64_t r, std::int64_t c, int fill) : rows(r), cols(c), cells(r * c, fill) {}

  int at(std::int64_t r, std::int64_t c) const { return cells[r * cols + c]; }
  int& at(std::int64_t r, std::int64_t c) { return cells[r * cols + c]; }
  std::int64_t count() const { return rows * cols; }
  std::int64_t count_level(int level) const;
  double fine_fraction() const;
  bool operator==(const GrainMap&) const = default;

  Tensor to_tensor() const;
  static GrainMap from_tensor(const Tensor& t);
};

/// Luma Y = 0.299R + 0.587G + 0.114B of an [H, W, 3] image.
Tensor to_grayscale(const Tensor& image);

/// P bin centres evenly spaced on [0, 1], endpoints included.
std::vector<double> bin_centers(std::int64_t count);

/// Unnormalised Gaussian KDE of the region's pixels at each bin centre.
std::vector<double> region_pdf(std::span<const float> region, std::span<const double> bins,
                               double sigma = 0.01);

/// -sum p ln p with 0 ln 0 = 0.
double region_entropy(std::span<const double> pdf);

/// Entropy of every S×S tile of an [H, W, 1] (or [H, W]) grayscale image.
EntropyMap entropy_map(const Tensor& gray, std::int64_t region_size, double sigma = 0.01);

/// Pools every region entropy of the corpus and places thresholds at the
/// lower order statistics realising the requested ratios.
EntropyThresholds calibrate_thresholds(std::span<const EntropyMap> corpus,
                                       const GrainRatios& ratios);

GrainMap assign_grain_map(const EntropyMap& em, const EntropyThresholds& thresholds);

}  // namespace dyngrain
