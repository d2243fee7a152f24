#include "dyngrain/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dyngrain/rng.hpp"

namespace dyngrain {

namespace {

struct Patch {
  std::int64_t x0, y0, x1, y1;  // half-open pixel box
  double freq, angle, phase;
  float colour[3];
};

struct Layout {
  float base[3];
  double gx, gy, kx, ky, wave_phase;
  std::int64_t label;
  std::vector<Patch> patches;
};

// Every random draw of an image happens here, in a fixed order.
Layout draw_layout(const SyntheticSpec& s, Rng& rng) {
  Layout l{};
  for (float& c : l.base) c = static_cast<float>(0.2 + 0.6 * rng.uniform());
  l.gx = 2.0 * rng.uniform() - 1.0;
  l.gy = 2.0 * rng.uniform() - 1.0;
  l.kx = static_cast<double>(rng.below(2));
  l.ky = 1.0 + static_cast<double>(rng.below(2));
  l.wave_phase = 2.0 * std::numbers::pi * rng.uniform();
  l.label = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.num_classes)));

  const double band = 0.4 / s.num_classes;
  const auto n = s.min_patches +
                 static_cast<int>(rng.below(static_cast<std::uint64_t>(s.max_patches - s.min_patches + 1)));
  const double side = static_cast<double>(s.image_size);
  for (int i = 0; i < n; ++i) {
    Patch p{};
    const double w = side * (s.min_extent + (s.max_extent - s.min_extent) * rng.uniform());
    const double h = side * (s.min_extent + (s.max_extent - s.min_extent) * rng.uniform());
    const double cx = side * (0.5 + s.centre_spread * rng.normal());
    const double cy = side * (0.5 + s.centre_spread * rng.normal());
    auto clampi = [&](double v) {
      return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::lround(v)), 0, s.image_size);
    };
    p.x0 = clampi(cx - w / 2);
    p.x1 = clampi(cx + w / 2);
    p.y0 = clampi(cy - h / 2);
    p.y1 = clampi(cy + h / 2);
    p.freq = 0.05 + band * (static_cast<double>(l.label) + rng.uniform());
    p.angle = std::numbers::pi * rng.uniform();
    p.phase = 2.0 * std::numbers::pi * rng.uniform();
    for (float& c : p.colour) c = static_cast<float>(rng.uniform());
    l.patches.push_back(p);
  }
  return l;
}

Rng image_rng(const SyntheticSpec& s, std::int64_t index) {
  if (index < 0 || index >= s.count) {
    throw ValueError("synthetic index " + std::to_string(index) + " outside [0, " +
                     std::to_string(s.count) + ")");
  }
  return Rng(s.seed, stream_id("synthetic") + static_cast<std::uint64_t>(index));
}

}  // namespace

nlohmann::ordered_json SyntheticSpec::to_json() const {
  return {{"image_size", image_size},         {"count", count},
          {"min_patches", min_patches},       {"max_patches", max_patches},
          {"min_extent", min_extent},         {"max_extent", max_extent},
          {"centre_spread", centre_spread},   {"gradient_strength", gradient_strength},
          {"wave_amplitude", wave_amplitude}, {"num_classes", num_classes},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::ordered_json& j) {
  SyntheticSpec s;
  s.image_size = j.value("image_size", s.image_size);
  s.count = j.value("count", s.count);
  s.min_patches = j.value("min_patches", s.min_patches);
  s.max_patches = j.value("max_patches", s.max_patches);
  s.min_extent = j.value("min_extent", s.min_extent);
  s.max_extent = j.value("max_extent", s.max_extent);
  s.centre_spread = j.value("centre_spread", s.centre_spread);
  s.gradient_strength = j.value("gradient_strength", s.gradient_strength);
  s.wave_amplitude = j.value("wave_amplitude", s.wave_amplitude);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.seed = j.value("seed", s.seed);
  return s;
}

void SyntheticSpec::validate() const {
  if (image_size <= 0 || count < 0) throw ValueError("synthetic spec needs a positive size");
  if (min_patches < 0 || max_patches < min_patches) throw ValueError("bad rectangle count range");
  if (!(min_extent > 0 && min_extent <= max_extent && max_extent <= 1)) {
    throw ValueError("rectangle extents must satisfy 0 < min <= max <= 1");
  }
  if (num_classes < 1) throw ValueError("synthetic data needs at least one class");
}

SyntheticImage generate_synthetic(const SyntheticSpec& s, std::int64_t index) {
  s.validate();
  Rng rng = image_rng(s, index);
  const Layout l = draw_layout(s, rng);
  const std::int64_t n = s.image_size;
  const double two_pi = 2.0 * std::numbers::pi;

  Tensor img({n, n, 3});
  auto px = img.mutable_data();
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x) {
      const double u = static_cast<double>(x) / n, v = static_cast<double>(y) / n;
      const double shade = s.gradient_strength * (l.gx * (u - 0.5) + l.gy * (v - 0.5)) +
                           s.wave_amplitude * std::sin(two_pi * (l.kx * u + l.ky * v) + l.wave_phase);
      for (int c = 0; c < 3; ++c) px[(y * n + x) * 3 + c] = static_cast<float>(l.base[c] + shade);
    }

  // Noise is drawn per rectangle pixel after the layout so the layout stays
  // independent of rectangle sizes.
  for (const Patch& p : l.patches) {
    const double cs = std::cos(p.angle), sn = std::sin(p.angle);
    for (std::int64_t y = p.y0; y < p.y1; ++y)
      for (std::int64_t x = p.x0; x < p.x1; ++x) {
        const double grating = 0.5 + 0.5 * std::sin(two_pi * p.freq * (x * cs + y * sn) + p.phase);
        const double noise = rng.uniform();
        for (int c = 0; c < 3; ++c) {
          float& dst = px[(y * n + x) * 3 + c];
          const double tex = 0.5 * noise + 0.5 * grating * p.colour[c];
          dst = static_cast<float>(0.5 * dst + 0.5 * tex);
        }
      }
  }
  for (float& v : px) v = std::clamp(v, 0.0f, 1.0f);
  return {img, l.label};
}

std::vector<bool> synthetic_texture_mask(const SyntheticSpec& s, std::int64_t index) {
  Rng rng = image_rng(s, index);
  const Layout l = draw_layout(s, rng);
  std::vector<bool> mask(static_cast<std::size_t>(s.image_size * s.image_size), false);
  for (const Patch& p : l.patches)
    for (std::int64_t y = p.y0; y < p.y1; ++y)
      for (std::int64_t x = p.x0; x < p.x1; ++x) mask[y * s.image_size + x] = true;
  return mask;
}

}  // namespace dyngrain
