#include "dyngrain/gft.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dyngrain {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError("GFT1: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

constexpr char kMagic[4] = {'G', 'F', 'T', '1'};

}  // namespace

void write_gft(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(e));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  } else {
    for (float v : t.data()) put_le<float>(os, v);
  }
  if (!os) throw FormatError("GFT1: write failed");
}

Tensor read_gft(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("GFT1: truncated stream");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("GFT1: bad magic");
  const auto rank = get_le<std::uint32_t>(is);
  if (rank == 0 || rank > 16) throw FormatError("GFT1: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    const auto v = get_le<std::uint64_t>(is);
    if (v == 0 || v > (1ull << 40)) throw FormatError("GFT1: invalid extent");
    e = static_cast<std::int64_t>(v);
  }
  std::vector<float> data(static_cast<std::size_t>(numel(shape)));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float)))) {
      throw FormatError("GFT1: truncated payload");
    }
  } else {
    for (auto& v : data) v = get_le<float>(is);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_gft(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_gft(os, t);
}

Tensor load_gft(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_gft(is);
}

void save_gft_list(const std::filesystem::path& path, const std::vector<Tensor>& ts) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& t : ts) write_gft(os, t);
}

std::vector<Tensor> load_gft_list(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_gft(is));
  return out;
}

}  // namespace dyngrain
