#pragma once

#include <filesystem>
#include <json.hpp>

#include "dyngrain/grained_coding.hpp"

namespace dyngrain {

/// 8-bit PNG from an [H, W, 1] or [H, W, 3] tensor in [0, 1] (values clamped).
void write_png(const std::filesystem::path& path, const Tensor& image);
/// Any 8/16-bit PNG as an [H, W, 3] tensor in [0, 1]; alpha is dropped.
Tensor read_png(const std::filesystem::path& path);

/// Colour-coded grain map scaled to height x width (fine warm, coarse cool).
Tensor render_grain_map(const GrainMap& g, std::int64_t height, std::int64_t width);

/// Places two [H, W, 3] images next to each other with a white gutter.
Tensor side_by_side(const Tensor& left, const Tensor& right, std::int64_t gutter = 2);

nlohmann::ordered_json grain_map_to_json(const GrainMap& g);
GrainMap grain_map_from_json(const nlohmann::ordered_json& j);

nlohmann::ordered_json read_json(const std::filesystem::path& path);
/// Writes `j.dump(2)` plus a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);

}  // namespace dyngrain
