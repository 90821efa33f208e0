#pragma once

// Binary tensor serialization shared by datasets and checkpoints.
// Layout: magic "BCMD" | u32 version=1 | u32 rank | rank x u64 extents |
// u32 dtype (1 = f32, 2 = u8) | row-major payload, little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "bcmda/errors.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace detail {

inline constexpr char kMagic[4] = {'B', 'C', 'M', 'D'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr Index kMaxRank = 8;

template <typename T>
struct DtypeCode;
template <>
struct DtypeCode<float> {
  static constexpr std::uint32_t value = 1;
};
template <>
struct DtypeCode<std::uint8_t> {
  static constexpr std::uint32_t value = 2;
};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& where) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw FormatError("truncated tensor header in " + where);
  return v;
}

}  // namespace detail

template <typename S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  os.write(detail::kMagic, 4);
  detail::write_pod<std::uint32_t>(os, detail::kVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
  detail::write_pod<std::uint32_t>(os, detail::DtypeCode<S>::value);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(S)));
  if (!os) throw IoError("failed while writing tensor stream");
}

template <typename S>
Tensor<S> read_tensor(std::istream& is, const std::string& where) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kMagic, 4) != 0)
    throw FormatError("bad magic in " + where);
  const auto version = detail::read_pod<std::uint32_t>(is, where);
  if (version != detail::kVersion)
    throw FormatError("unsupported tensor version " + std::to_string(version) + " in " + where);
  const auto rank = detail::read_pod<std::uint32_t>(is, where);
  if (rank == 0 || rank > detail::kMaxRank)
    throw FormatError("implausible rank " + std::to_string(rank) + " in " + where);
  Shape shape(rank);
  Index numel = 1;
  for (auto& e : shape) {
    const auto ext = detail::read_pod<std::uint64_t>(is, where);
    if (ext == 0 || ext > (1ull << 32))
      throw FormatError("implausible extent " + std::to_string(ext) + " in " + where);
    e = static_cast<Index>(ext);
    numel *= e;
    if (numel > (Index{1} << 34)) throw FormatError("tensor too large in " + where);
  }
  const auto dtype = detail::read_pod<std::uint32_t>(is, where);
  if (dtype != detail::DtypeCode<S>::value)
    throw FormatError("dtype code " + std::to_string(dtype) + " in " + where +
                      " does not match the requested scalar type");
  std::vector<S> data(static_cast<std::size_t>(numel));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(S))))
    throw FormatError("truncated tensor payload in " + where);
  return Tensor<S>::from_data(std::move(shape), std::move(data));
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("failed while writing " + path);
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor<S>(is, path);
}

// Dtype code stored in a file, without loading the payload.
inline std::uint32_t peek_dtype(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kMagic, 4) != 0)
    throw FormatError("bad magic in " + path);
  const auto version = detail::read_pod<std::uint32_t>(is, path);
  if (version != detail::kVersion)
    throw FormatError("unsupported tensor version " + std::to_string(version) + " in " + path);
  const auto rank = detail::read_pod<std::uint32_t>(is, path);
  if (rank == 0 || rank > detail::kMaxRank)
    throw FormatError("implausible rank " + std::to_string(rank) + " in " + path);
  is.seekg(static_cast<std::streamoff>(rank * sizeof(std::uint64_t)), std::ios::cur);
  return detail::read_pod<std::uint32_t>(is, path);
}

}  // namespace bcmda
