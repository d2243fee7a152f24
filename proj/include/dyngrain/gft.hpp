#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "dyngrain/tensor.hpp"

namespace dyngrain {

/// Malformed or truncated GFT1 stream.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// GFT1 layout: "GFT1", u32 rank, rank x u64 extents, f32 payload; all little-endian.
void write_gft(std::ostream& os, const Tensor& t);
Tensor read_gft(std::istream& is);

void save_gft(const std::filesystem::path& path, const Tensor& t);
Tensor load_gft(const std::filesystem::path& path);

/// Several tensors back to back in one file.
void save_gft_list(const std::filesystem::path& path, const std::vector<Tensor>& ts);
std::vector<Tensor> load_gft_list(const std::filesystem::path& path);

}  // namespace dyngrain
