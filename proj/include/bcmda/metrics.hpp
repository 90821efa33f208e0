#pragma once

#include <cstdint>

#include "bcmda/tensor.hpp"

namespace bcmda {

// Region-overlap scores between two binary masks (nonzero = foreground).
// Conventions: both masks empty -> (1, 1); exactly one empty -> (0, 0).
struct OverlapResult {
  double dice = 0.0;
  double jaccard = 0.0;
};

// dice = 2|P∩G| / (|P| + |G|), jaccard = |P∩G| / |P∪G|.
// Errors: DimensionError unless both masks are rank 2 with equal shape.
OverlapResult overlap_metrics(const TensorU8& pred, const TensorU8& gt);

// Boundary-distance scores between two binary masks, in pixel units.
// A boundary pixel is a foreground pixel with at least one 4-neighbor that is
// background or outside the image. Directed distances go from each boundary
// pixel to the nearest boundary pixel of the other mask (exact Euclidean,
// via a two-pass squared distance transform).
struct SurfaceResult {
  double hd95 = 0.0;
  double asd = 0.0;
};

// hd95 convention: per-direction takes the max of the two directed
// nearest-rank 95th percentiles; pooled ranks the merged distance multiset.
enum class Hd95Mode { kPerDirection, kPooled };

// Conventions: both masks empty -> (0, 0); exactly one empty -> the image
// diagonal for both scores (finite, scale-aware penalty). asd always pools
// both directions.
// Errors: DimensionError unless both masks are rank 2 with equal shape.
SurfaceResult surface_metrics(const TensorU8& pred, const TensorU8& gt,
                              Hd95Mode mode = Hd95Mode::kPerDirection);

// 0/1 mask selecting the pixels of `mask` equal to `cls`.
TensorU8 binarize(const TensorU8& mask, std::uint8_t cls);

}  // namespace bcmda
