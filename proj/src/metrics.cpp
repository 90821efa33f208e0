#include "bcmda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bcmda/errors.hpp"

namespace bcmda {
namespace {

void check_pair(const TensorU8& pred, const TensorU8& gt, const char* op) {
  if (pred.rank() != 2 || gt.rank() != 2)
    throw DimensionError(std::string(op) + ": masks must be rank 2, got " +
                         shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
  if (pred.shape() != gt.shape())
    throw DimensionError(std::string(op) + ": mask shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(gt.shape()) + " differ");
}

// Foreground pixels whose 4-neighborhood leaves the foreground (the image
// border counts as outside).
std::vector<std::uint8_t> boundary_map(const TensorU8& mask) {
  const Index h = mask.extent(0);
  const Index w = mask.extent(1);
  const std::uint8_t* m = mask.data().data();
  std::vector<std::uint8_t> b(static_cast<std::size_t>(h * w), 0);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      if (m[i] == 0) continue;
      const bool interior = y > 0 && y < h - 1 && x > 0 && x < w - 1 &&
                            m[i - static_cast<std::size_t>(w)] != 0 &&
                            m[i + static_cast<std::size_t>(w)] != 0 && m[i - 1] != 0 &&
                            m[i + 1] != 0;
      if (!interior) b[i] = 1;
    }
  }
  return b;
}

// One-dimensional squared distance transform (lower envelope of parabolas).
// All inputs are integers stored in doubles, so results are exact.
void dt1d(const std::vector<double>& f, std::vector<double>& d, Index n,
          std::vector<Index>& v, std::vector<double>& z) {
  Index k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (Index q = 1; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == std::numeric_limits<double>::infinity()) continue;
    double s;
    for (;;) {
      const Index p = v[static_cast<std::size_t>(k)];
      if (f[static_cast<std::size_t>(p)] == std::numeric_limits<double>::infinity()) {
        // No finite parabola yet; q becomes the first one.
        s = -std::numeric_limits<double>::infinity();
        break;
      }
      s = (f[static_cast<std::size_t>(q)] + static_cast<double>(q * q) -
           f[static_cast<std::size_t>(p)] - static_cast<double>(p * p)) /
          (2.0 * static_cast<double>(q - p));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (Index q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < static_cast<double>(q)) ++k;
    const Index p = v[static_cast<std::size_t>(k)];
    const double dq = static_cast<double>(q - p);
    d[static_cast<std::size_t>(q)] = dq * dq + f[static_cast<std::size_t>(p)];
  }
}

// Exact squared Euclidean distance from every pixel to the nearest site.
// Sites are the nonzero entries of `site`; with no site, all distances are
// +infinity.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& site, Index h, Index w) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(static_cast<std::size_t>(h * w));
  for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = site[i] ? 0.0 : kInf;

  const Index n = std::max(h, w);
  std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);

  for (Index y = 0; y < h; ++y) {  // rows first
    bool any = false;
    for (Index x = 0; x < w; ++x) {
      f[static_cast<std::size_t>(x)] = dist[static_cast<std::size_t>(y * w + x)];
      any = any || f[static_cast<std::size_t>(x)] == 0.0;
    }
    if (!any) continue;  // row stays all-infinite
    dt1d(f, d, w, v, z);
    for (Index x = 0; x < w; ++x) dist[static_cast<std::size_t>(y * w + x)] = d[static_cast<std::size_t>(x)];
  }
  for (Index x = 0; x < w; ++x) {  // then columns
    bool any = false;
    for (Index y = 0; y < h; ++y) {
      f[static_cast<std::size_t>(y)] = dist[static_cast<std::size_t>(y * w + x)];
      any = any || f[static_cast<std::size_t>(y)] != kInf;
    }
    if (!any) continue;
    dt1d(f, d, h, v, z);
    for (Index y = 0; y < h; ++y) dist[static_cast<std::size_t>(y * w + x)] = d[static_cast<std::size_t>(y)];
  }
  return dist;
}

// Distances from each boundary pixel of `from` to the nearest boundary pixel
// of `to` (ascending order not guaranteed).
std::vector<double> directed_distances(const std::vector<std::uint8_t>& from,
                                       const std::vector<double>& to_sq_edt) {
  std::vector<double> out;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from[i]) out.push_back(std::sqrt(to_sq_edt[i]));
  return out;
}

// Nearest-rank 95th percentile of a non-empty sample.
double percentile95(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.95 * static_cast<double>(xs.size())));
  return xs[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace

OverlapResult overlap_metrics(const TensorU8& pred, const TensorU8& gt) {
  check_pair(pred, gt, "overlap_metrics");
  const std::uint8_t* p = pred.data().data();
  const std::uint8_t* g = gt.data().data();
  Index np = 0, ng = 0, inter = 0;
  for (Index i = 0; i < pred.numel(); ++i) {
    const bool fp = p[static_cast<std::size_t>(i)] != 0;
    const bool fg = g[static_cast<std::size_t>(i)] != 0;
    np += fp;
    ng += fg;
    inter += fp && fg;
  }
  if (np == 0 && ng == 0) return {1.0, 1.0};
  if (np == 0 || ng == 0) return {0.0, 0.0};
  const double uni = static_cast<double>(np + ng - inter);
  return {2.0 * static_cast<double>(inter) / static_cast<double>(np + ng),
          static_cast<double>(inter) / uni};
}

SurfaceResult surface_metrics(const TensorU8& pred, const TensorU8& gt, Hd95Mode mode) {
  check_pair(pred, gt, "surface_metrics");
  const Index h = pred.extent(0);
  const Index w = pred.extent(1);
  const bool pred_empty =
      std::all_of(pred.data().begin(), pred.data().end(), [](std::uint8_t v) { return v == 0; });
  const bool gt_empty =
      std::all_of(gt.data().begin(), gt.data().end(), [](std::uint8_t v) { return v == 0; });
  if (pred_empty && gt_empty) return {0.0, 0.0};
  if (pred_empty || gt_empty) {
    const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
    return {diag, diag};
  }

  const auto bp = boundary_map(pred);
  const auto bg = boundary_map(gt);
  const auto dp = directed_distances(bp, squared_edt(bg, h, w));  // pred -> gt
  const auto dg = directed_distances(bg, squared_edt(bp, h, w));  // gt -> pred

  // Per-direction partial sums first: their final addition commutes, so
  // swapping the arguments gives a bit-identical result.
  double sum_pg = 0.0, sum_gp = 0.0;
  for (double x : dp) sum_pg += x;
  for (double x : dg) sum_gp += x;
  const double asd = (sum_pg + sum_gp) / static_cast<double>(dp.size() + dg.size());

  double hd95;
  if (mode == Hd95Mode::kPerDirection) {
    hd95 = std::max(percentile95(dp), percentile95(dg));
  } else {
    std::vector<double> pooled = dp;
    pooled.insert(pooled.end(), dg.begin(), dg.end());
    hd95 = percentile95(std::move(pooled));
  }
  return {hd95, asd};
}

TensorU8 binarize(const TensorU8& mask, std::uint8_t cls) {
  TensorU8 out = TensorU8::zeros(mask.shape());
  for (Index i = 0; i < mask.numel(); ++i)
    out.data()[static_cast<std::size_t>(i)] =
        mask.data()[static_cast<std::size_t>(i)] == cls ? 1 : 0;
  return out;
}

}  // namespace bcmda
