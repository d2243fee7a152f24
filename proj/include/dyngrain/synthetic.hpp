#pragma once

#include <cstdint>
#include <json.hpp>

#include "dyngrain/tensor.hpp"

namespace dyngrain {

/// Procedural stand-in for a photo corpus: smooth backgrounds with a few
/// noisy textured rectangles clustered around the image centre.
struct SyntheticSpec {
  std::int64_t image_size = 64;
  std::int64_t count = 512;
  int min_patches = 1;
  int max_patches = 4;
  /// Rectangle side range as a fraction of the image side.
  double min_extent = 0.2;
  double max_extent = 0.45;
  /// Standard deviation of rectangle centres around the image centre, as a
  /// fraction of the image side.
  double centre_spread = 0.12;
  double gradient_strength = 0.3;
  double wave_amplitude = 0.08;
  int num_classes = 4;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
  static SyntheticSpec from_json(const nlohmann::ordered_json& j);
  void validate() const;
};

struct SyntheticImage {
  Tensor image;  // [H, W, 3] in [0, 1]
  std::int64_t label = 0;
};

/// Pure function of (spec, index). The label picks the texture frequency band.
SyntheticImage generate_synthetic(const SyntheticSpec& spec, std::int64_t index);

/// Per-pixel mask of the textured rectangles, for tests.
std::vector<bool> synthetic_texture_mask(const SyntheticSpec& spec, std::int64_t index);

}  // namespace dyngrain
