#include "dyngrain/grained_coding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dyngrain {

namespace {

// Beyond this many sigmas a kernel term is below 1e-30 and cannot move an
// entropy by anything measurable.
constexpr double kKernelCutoff = 11.8;

}  // namespace

RegionGrid RegionGrid::for_image(std::int64_t height, std::int64_t width, std::int64_t size) {
  if (size <= 0 || height % size != 0 || width % size != 0) {
    throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible into regions of size " + std::to_string(size));
  }
  return {size, height / size, width / size};
}

Tensor EntropyMap::to_tensor() const {
  std::vector<float> v(values.begin(), values.end());
  return Tensor({rows, cols}, std::move(v));
}

EntropyMap EntropyMap::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("entropy map must be 2-D, got " + to_string(t.shape()));
  EntropyMap em{t.dim(0), t.dim(1), {}};
  em.values.assign(t.data().begin(), t.data().end());
  return em;
}

void GrainRatios::validate() const {
  if (r.size() < 2) throw ValueError("grain ratios need at least two levels");
  double total = 0.0;
  for (double v : r) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValueError("grain ratio outside [0, 1]");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValueError("grain ratios must sum to 1");
}

std::int64_t GrainMap::count_level(int level) const {
  return std::count(cells.begin(), cells.end(), level);
}

double GrainMap::fine_fraction() const {
  return cells.empty() ? 0.0 : static_cast<double>(count_level(1)) / static_cast<double>(count());
}

Tensor GrainMap::to_tensor() const {
  std::vector<float> v(cells.begin(), cells.end());
  return Tensor({rows, cols}, std::move(v));
}

GrainMap GrainMap::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("grain map must be 2-D, got " + to_string(t.shape()));
  GrainMap g(t.dim(0), t.dim(1), 1);
  for (std::int64_t i = 0; i < g.count(); ++i) {
    const float v = t[i];
    if (v < 1.0f || v != std::floor(v)) throw ValueError("grain map entries must be integers >= 1");
    g.cells[i] = static_cast<int>(v);
  }
  return g;
}

Tensor to_grayscale(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError("grayscale conversion needs an [H, W, 3] image, got " +
                     to_string(image.shape()));
  }
  const std::int64_t h = image.dim(0), w = image.dim(1);
  Tensor out({h, w, 1});
  auto o = out.mutable_data();
  const auto in = image.data();
  for (std::int64_t i = 0; i < h * w; ++i) {
    const double y = 0.299 * in[3 * i] + 0.587 * in[3 * i + 1] + 0.114 * in[3 * i + 2];
    o[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
  return out;
}

std::vector<double> bin_centers(std::int64_t count) {
  if (count < 2) throw ValueError("need at least two bins");
  std::vector<double> b(static_cast<std::size_t>(count));
  for (std::int64_t j = 0; j < count; ++j) b[j] = static_cast<double>(j) / (count - 1);
  return b;
}

std::vector<double> region_pdf(std::span<const float> region, std::span<const double> bins,
                               double sigma) {
  if (region.size() != bins.size()) {
    throw ShapeError("region has " + std::to_string(region.size()) + " pixels but " +
                     std::to_string(bins.size()) + " bins");
  }
  if (!(sigma > 0.0)) throw ValueError("KDE bandwidth must be positive");
  // Sorted pixels let each bin visit only the pixels within the cutoff.
  std::vector<double> px(region.begin(), region.end());
  std::sort(px.begin(), px.end());
  const double reach = kKernelCutoff * sigma;
  const double n = static_cast<double>(px.size());
  std::vector<double> pdf(bins.size(), 0.0);
  auto lo = px.begin();
  for (std::size_t j = 0; j < bins.size(); ++j) {
    const double b = bins[j];
    lo = std::lower_bound(px.begin(), px.end(), b - reach);
    double acc = 0.0;
    for (auto it = lo; it != px.end() && *it <= b + reach; ++it) {
      const double z = (*it - b) / sigma;
      acc += std::exp(-0.5 * z * z);
    }
    pdf[j] = acc / n;
  }
  return pdf;
}

double region_entropy(std::span<const double> pdf) {
  double e = 0.0;
  for (double p : pdf) {
    if (p < 0.0) throw ValueError("density entries must be nonnegative");
    if (p > 0.0) e -= p * std::log(p);
  }
  return e;
}

EntropyMap entropy_map(const Tensor& gray, std::int64_t region_size, double sigma) {
  if (gray.rank() < 2 || (gray.rank() == 3 && gray.dim(2) != 1) || gray.rank() > 3) {
    throw ShapeError("entropy map needs an [H, W, 1] image, got " + to_string(gray.shape()));
  }
  const std::int64_t h = gray.dim(0), w = gray.dim(1);
  const RegionGrid grid = RegionGrid::for_image(h, w, region_size);
  const auto bins = bin_centers(region_size * region_size);
  EntropyMap em{grid.rows, grid.cols, std::vector<double>(grid.count())};
  const auto px = gray.data();
  std::vector<float> tile(static_cast<std::size_t>(region_size * region_size));
  for (std::int64_t r = 0; r < grid.rows; ++r) {
    for (std::int64_t c = 0; c < grid.cols; ++c) {
      for (std::int64_t y = 0; y < region_size; ++y) {
        const float* row = px.data() + (r * region_size + y) * w + c * region_size;
        std::copy(row, row + region_size, tile.begin() + y * region_size);
      }
      em.values[r * grid.cols + c] = region_entropy(region_pdf(tile, bins, sigma));
    }
  }
  return em;
}

EntropyThresholds calibrate_thresholds(std::span<const EntropyMap> corpus,
                                       const GrainRatios& ratios) {
  ratios.validate();
  std::vector<double> pool;
  for (const auto& em : corpus) pool.insert(pool.end(), em.values.begin(), em.values.end());
  if (pool.empty()) throw ValueError("calibration corpus is empty");
  std::sort(pool.begin(), pool.end());
  const auto n = static_cast<std::int64_t>(pool.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();

  EntropyThresholds th;
  double cumulative = 0.0;
  for (std::size_t i = 0; i < ratios.levels(); ++i) {
    cumulative += ratios.r[i];
    if (i + 1 == ratios.levels() || cumulative >= 1.0 - 1e-12) {
      th.t.push_back(-kInf);
    } else if (cumulative <= 1e-12) {
      th.t.push_back(kInf);
    } else {
      // Guard ceil() against products like 700.0000000001.
      const double pos = (1.0 - cumulative) * static_cast<double>(n);
      auto idx = static_cast<std::int64_t>(std::ceil(pos - 1e-9 * static_cast<double>(n))) - 1;
      idx = std::clamp<std::int64_t>(idx, 0, n - 1);
      th.t.push_back(pool[idx]);
    }
  }
  return th;
}

GrainMap assign_grain_map(const EntropyMap& em, const EntropyThresholds& thresholds) {
  if (thresholds.t.empty()) throw ValueError("no thresholds");
  if (static_cast<std::int64_t>(em.values.size()) != em.rows * em.cols) {
    throw ShapeError("entropy map storage does not match its grid");
  }
  const int k = static_cast<int>(thresholds.t.size());
  GrainMap g(em.rows, em.cols, k);
  for (std::size_t i = 0; i < em.values.size(); ++i) {
    const double e = em.values[i];
    int level = k;
    for (int l = 0; l < k; ++l) {
      if (e > thresholds.t[l]) {
        level = l + 1;
        break;
      }
    }
    g.cells[i] = level;
  }
  return g;
}

}  // namespace dyngrain
