#include "dyngrain/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dyngrain/gft.hpp"

namespace dyngrain {

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw ShapeError("write_png expects [H, W, 1] or [H, W, 3], got " + to_string(image.shape()));
  }
  std::vector<png_byte> bytes(image.data().size());
  std::transform(image.data().begin(), image.data().end(), bytes.begin(), [](float v) {
    return static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  });
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.dim(1));
  png.height = static_cast<png_uint_32>(image.dim(0));
  png.format = image.dim(2) == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("cannot write " + path.string() + ": " + msg);
  }
}

Tensor read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("cannot read " + path.string() + ": " + msg);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("cannot decode " + path.string() + ": " + msg);
  }
  Tensor out({static_cast<std::int64_t>(png.height), static_cast<std::int64_t>(png.width), 3});
  std::transform(bytes.begin(), bytes.end(), out.mutable_data().begin(),
                 [](png_byte b) { return b / 255.0f; });
  return out;
}

Tensor render_grain_map(const GrainMap& g, std::int64_t height, std::int64_t width) {
  if (g.rows <= 0 || height % g.rows != 0 || width % g.cols != 0) {
    throw ShapeError("grain map does not tile a " + std::to_string(height) + "x" + std::to_string(width) +
                     " canvas");
  }
  static constexpr float kFine[3] = {0.96f, 0.55f, 0.12f};
  static constexpr float kCoarse[3] = {0.12f, 0.22f, 0.55f};
  const std::int64_t sy = height / g.rows, sx = width / g.cols;
  Tensor out({height, width, 3});
  auto px = out.mutable_data();
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const int level = g.at(y / sy, x / sx);
      // Levels past the second darken progressively.
      const float fade = level <= 1 ? 1.0f : 1.0f / static_cast<float>(level - 1);
      for (int c = 0; c < 3; ++c) px[(y * width + x) * 3 + c] = level <= 1 ? kFine[c] : kCoarse[c] * fade;
    }
  return out;
}

Tensor side_by_side(const Tensor& left, const Tensor& right, std::int64_t gutter) {
  if (left.rank() != 3 || right.rank() != 3 || left.dim(0) != right.dim(0) || left.dim(2) != 3 ||
      right.dim(2) != 3) {
    throw ShapeError("side_by_side needs two [H, W, 3] images of equal height");
  }
  const std::int64_t h = left.dim(0), wl = left.dim(1), wr = right.dim(1), w = wl + gutter + wr;
  Tensor out({h, w, 3}, 1.0f);
  auto px = out.mutable_data();
  for (std::int64_t y = 0; y < h; ++y) {
    std::copy_n(left.data().begin() + y * wl * 3, wl * 3, px.begin() + y * w * 3);
    std::copy_n(right.data().begin() + y * wr * 3, wr * 3, px.begin() + (y * w + wl + gutter) * 3);
  }
  return out;
}

nlohmann::ordered_json grain_map_to_json(const GrainMap& g) {
  return {{"rows", g.rows}, {"cols", g.cols}, {"cells", g.cells}};
}

GrainMap grain_map_from_json(const nlohmann::ordered_json& j) {
  GrainMap g(j.at("rows").get<std::int64_t>(), j.at("cols").get<std::int64_t>(), 1);
  g.cells = j.at("cells").get<std::vector<int>>();
  if (static_cast<std::int64_t>(g.cells.size()) != g.count()) {
    throw FormatError("grain map lists " + std::to_string(g.cells.size()) + " cells for a " +
                      std::to_string(g.rows) + "x" + std::to_string(g.cols) + " grid");
  }
  for (int c : g.cells) {
    if (c < 1) throw FormatError("grain index " + std::to_string(c) + " is not positive");
  }
  return g;
}

nlohmann::ordered_json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace dyngrain
