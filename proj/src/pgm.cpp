#include "bcmda/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "bcmda/errors.hpp"

namespace bcmda {
namespace {

void write_p5(const std::filesystem::path& path, Index h, Index w,
              const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed while writing " + path.string());
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const TensorF& image) {
  Index h = 0, w = 0;
  if (image.rank() == 2) {
    h = image.extent(0);
    w = image.extent(1);
  } else if (image.rank() == 3 && image.extent(0) == 1) {
    h = image.extent(1);
    w = image.extent(2);
  } else {
    throw DimensionError("write_pgm: expected [H, W] or [1, H, W], got " +
                         shape_str(image.shape()));
  }
  const auto& v = image.data();
  float lo = v[0], hi = v[0];
  for (float x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<std::uint8_t> bytes(v.size());
  if (hi > lo) {
    const float scale = 255.0f / (hi - lo);
    for (std::size_t i = 0; i < v.size(); ++i)
      bytes[i] = static_cast<std::uint8_t>(std::lround((v[i] - lo) * scale));
  } else {
    std::fill(bytes.begin(), bytes.end(), std::uint8_t{128});
  }
  write_p5(path, h, w, bytes);
}

void write_pgm_labels(const std::filesystem::path& path, const TensorU8& labels) {
  if (labels.rank() != 2)
    throw DimensionError("write_pgm_labels: expected [H, W], got " + shape_str(labels.shape()));
  const auto& v = labels.data();
  const std::uint8_t top = *std::max_element(v.begin(), v.end());
  std::vector<std::uint8_t> bytes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    bytes[i] = top == 0 ? 0
                        : static_cast<std::uint8_t>((255 * static_cast<int>(v[i])) /
                                                    static_cast<int>(top));
  write_p5(path, labels.extent(0), labels.extent(1), bytes);
}

}  // namespace bcmda
