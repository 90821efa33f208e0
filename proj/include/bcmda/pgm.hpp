#pragma once

#include <filesystem>

#include "bcmda/tensor.hpp"

namespace bcmda {

// Writes a rank-2 tensor (or [1, H, W]) as binary 8-bit PGM (P5), min-max
// normalized to 0..255; a constant image maps to mid-gray.
// Errors: DimensionError on other ranks; IoError on write failure.
void write_pgm(const std::filesystem::path& path, const TensorF& image);

// Label variant: classes are spread evenly over 0..255 (labels themselves,
// not intensities, so class 1 of 2 is visibly distinct from background).
void write_pgm_labels(const std::filesystem::path& path, const TensorU8& labels);

}  // namespace bcmda
