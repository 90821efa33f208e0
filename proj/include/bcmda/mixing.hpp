#pragma once

// Augmentation and mixing machinery: weak (geometric) and strong
// (photometric) augmentation, FixMix, progressive-dynamic MixUp with its
// gamma schedule, rectangular CutMix masks, and bidirectional CutMix.

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>

#include "bcmda/errors.hpp"
#include "bcmda/rng.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

// ---- schedule -----------------------------------------------------------

struct MixSchedule {
  double lambda_fix = 0.75;
  double alpha = 0.70;
  Index t = 0;
  Index t_max = 1;

  // Upper bound of the dynamic MixUp ratio: min(lambda_fix, t/t_max).
  double gamma() const {
    validate();
    return std::min(lambda_fix, static_cast<double>(t) / static_cast<double>(t_max));
  }

  void validate() const {
    if (lambda_fix < 0.0 || lambda_fix > 1.0)
      throw ParameterError("MixSchedule: lambda_fix must lie in [0,1]");
    if (!(alpha > 0.0)) throw ParameterError("MixSchedule: alpha must be positive");
    if (t_max < 1) throw ParameterError("MixSchedule: t_max must be >= 1");
    if (t < 0) throw ParameterError("MixSchedule: t must be >= 0");
  }
};

// ---- geometric helpers ----------------------------------------------------

namespace detail {

template <typename S>
void spatial_extents(const Tensor<S>& t, const char* op, Index& c, Index& h, Index& w) {
  if (t.rank() == 2) {
    c = 1;
    h = t.extent(0);
    w = t.extent(1);
  } else if (t.rank() == 3) {
    c = t.extent(0);
    h = t.extent(1);
    w = t.extent(2);
  } else {
    throw DimensionError(std::string(op) + ": expects rank 2 or 3, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

template <typename S>
Tensor<S> flip_horizontal(const Tensor<S>& t) {
  Index c, h, w;
  detail::spatial_extents(t, "flip_horizontal", c, h, w);
  Tensor<S> out = Tensor<S>::zeros(t.shape());
  const auto& tv = t.data();
  auto& ov = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        ov[static_cast<std::size_t>((ci * h + y) * w + x)] =
            tv[static_cast<std::size_t>((ci * h + y) * w + (w - 1 - x))];
  return out;
}

template <typename S>
Tensor<S> flip_vertical(const Tensor<S>& t) {
  Index c, h, w;
  detail::spatial_extents(t, "flip_vertical", c, h, w);
  Tensor<S> out = Tensor<S>::zeros(t.shape());
  const auto& tv = t.data();
  auto& ov = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        ov[static_cast<std::size_t>((ci * h + y) * w + x)] =
            tv[static_cast<std::size_t>((ci * h + (h - 1 - y)) * w + x)];
  return out;
}

// Integer translation with constant fill (out-of-frame pixels get `fill`).
template <typename S>
Tensor<S> translate(const Tensor<S>& t, Index dy, Index dx, S fill) {
  Index c, h, w;
  detail::spatial_extents(t, "translate", c, h, w);
  if (dy == 0 && dx == 0) return t;
  Tensor<S> out = Tensor<S>::full(t.shape(), fill);
  const auto& tv = t.data();
  auto& ov = out.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y) {
      const Index sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (Index x = 0; x < w; ++x) {
        const Index sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        ov[static_cast<std::size_t>((ci * h + y) * w + x)] =
            tv[static_cast<std::size_t>((ci * h + sy) * w + sx)];
      }
    }
  return out;
}

// ---- weak / strong augmentation -------------------------------------------

// Geometry applied identically to image and (optional) label: coin-flip
// horizontal/vertical mirror and an integer shift of at most 5% per axis.
// No-op draws return the input bit-exactly.
struct WeakDraw {
  bool flip_h = false;
  bool flip_v = false;
  Index dy = 0;
  Index dx = 0;
};

inline WeakDraw draw_weak(Index h, Index w, Rng& rng) {
  WeakDraw d;
  d.flip_h = rng.uniform() < 0.5;
  d.flip_v = rng.uniform() < 0.5;
  const Index my = h / 20, mx = w / 20;  // 5% of each extent
  d.dy = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(2 * my + 1))) - my;
  d.dx = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(2 * mx + 1))) - mx;
  return d;
}

template <typename S>
Tensor<S> apply_weak(const Tensor<S>& t, const WeakDraw& d, S fill) {
  Tensor<S> out = t;
  if (d.flip_h) out = flip_horizontal(out);
  if (d.flip_v) out = flip_vertical(out);
  return translate(out, d.dy, d.dx, fill);
}

template <typename S>
struct WeakAugmented {
  Tensor<S> image;
  std::optional<Tensor<std::uint8_t>> label;
};

template <typename S>
WeakAugmented<S> weak_augment(const Tensor<S>& image,
                              const std::optional<Tensor<std::uint8_t>>& label, Rng& rng) {
  Index c, h, w;
  detail::spatial_extents(image, "weak_augment", c, h, w);
  if (label) {
    if (label->rank() != 2 || label->extent(0) != h || label->extent(1) != w)
      throw DimensionError("weak_augment: label " + shape_str(label->shape()) +
                           " does not match image " + shape_str(image.shape()));
  }
  const WeakDraw d = draw_weak(h, w, rng);
  WeakAugmented<S> out;
  out.image = apply_weak(image, d, S{});
  if (label) out.label = apply_weak(*label, d, std::uint8_t{0});
  return out;
}

// Photometric jitter parameters; identity is (gamma=1, brightness=0, sigma=0).
struct StrongDraw {
  double gamma = 1.0;
  double brightness = 0.0;
  double sigma = 0.0;
};

inline StrongDraw draw_strong(Rng& rng) {
  StrongDraw d;
  d.gamma = rng.uniform(0.7, 1.3);
  d.brightness = rng.uniform(-0.2, 0.2);
  d.sigma = rng.uniform(0.0, 0.1);
  return d;
}

// Strong augmentation core: gamma curve on the [0,1] rescaling of a [-1,1]
// image, brightness shift, additive Gaussian noise, final clamp to [-1,1].
// Each stage is skipped when its parameter is exactly identity, so an
// identity draw returns the input values bit-for-bit.
template <typename S>
Tensor<S> strong_augment_with(const Tensor<S>& image, const StrongDraw& d, Rng& noise_rng) {
  Tensor<S> out = image.clone();
  auto& v = out.data();
  if (d.gamma != 1.0) {
    for (auto& x : v) {
      double y = (static_cast<double>(x) + 1.0) * 0.5;
      y = std::pow(std::min(std::max(y, 0.0), 1.0), d.gamma);
      x = static_cast<S>(y * 2.0 - 1.0);
    }
  }
  if (d.brightness != 0.0)
    for (auto& x : v) x = static_cast<S>(static_cast<double>(x) + d.brightness);
  if (d.sigma != 0.0)
    for (auto& x : v) x = static_cast<S>(static_cast<double>(x) + noise_rng.normal(0.0, d.sigma));
  if (d.gamma != 1.0 || d.brightness != 0.0 || d.sigma != 0.0)
    for (auto& x : v) x = std::min(std::max(x, static_cast<S>(-1)), static_cast<S>(1));
  return out;
}

template <typename S>
Tensor<S> strong_augment(const Tensor<S>& image, Rng& rng) {
  const StrongDraw d = draw_strong(rng);
  return strong_augment_with(image, d, rng);
}

// ---- FixMix / PDMix -------------------------------------------------------

// (1 - lambda) * real + lambda * synth; both endpoints are exact.
template <typename S>
Tensor<S> fixmix(const Tensor<S>& real, const Tensor<S>& synth, double lambda_fix) {
  if (real.shape() != synth.shape())
    throw DimensionError("fixmix: shapes " + shape_str(real.shape()) + " vs " +
                         shape_str(synth.shape()));
  if (lambda_fix < 0.0 || lambda_fix > 1.0)
    throw ParameterError("fixmix: lambda_fix must lie in [0,1]");
  Tensor<S> out = Tensor<S>::zeros(real.shape());
  const auto& rv = real.data();
  const auto& sv = synth.data();
  auto& ov = out.data();
  const S l = static_cast<S>(lambda_fix);
  const S one_minus = static_cast<S>(1.0 - lambda_fix);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = one_minus * rv[i] + l * sv[i];
  return out;
}

// Draws lambda' ~ Beta(alpha, alpha), scales by gamma(t) and mixes. Returns
// the mixed tensor and the realized lambda_dyn.
template <typename S>
std::pair<Tensor<S>, double> pdmix(const Tensor<S>& real, const Tensor<S>& synth,
                                   const MixSchedule& sched, Rng& rng) {
  sched.validate();
  const double lambda_dyn = sched.gamma() * rng.beta(sched.alpha, sched.alpha);
  return {fixmix(real, synth, lambda_dyn), lambda_dyn};
}

// ---- CutMix masks ----------------------------------------------------------

struct CutMask {
  Tensor<std::uint8_t> values;  // [H,W], entries in {0,1}
  Index top = 0, left = 0, height = 0, width = 0;
};

// Single axis-aligned rectangle covering 25-50% of the frame with aspect
// ratio near [0.5, 2]; position uniform over valid placements. Rounding can
// push a draw outside the bounds, in which case we redraw a few times before
// falling back to a deterministic rectangle with area fraction 3/8.
inline CutMask gen_mask(Index h, Index w, Rng& rng) {
  if (h < 4 || w < 4)
    throw ParameterError("gen_mask: extents must be >= 4, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  const double hw = static_cast<double>(h * w);
  Index rh = 0, rw = 0;
  bool ok = false;
  for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
    const double frac = rng.uniform(0.25, 0.5);
    const double aspect = rng.uniform(0.5, 2.0);
    const double area = frac * hw;
    rh = std::clamp<Index>(static_cast<Index>(std::llround(std::sqrt(area * aspect))), 1, h);
    const Index lo = std::max<Index>(1, static_cast<Index>(std::ceil(0.25 * hw / static_cast<double>(rh))));
    const Index hi = std::min<Index>(w, static_cast<Index>(std::floor(0.5 * hw / static_cast<double>(rh))));
    if (lo > hi) continue;
    rw = std::clamp<Index>(static_cast<Index>(std::llround(std::sqrt(area / aspect))), lo, hi);
    const double got_aspect = static_cast<double>(rh) / static_cast<double>(rw);
    ok = got_aspect >= 0.4 && got_aspect <= 2.5;  // slack for integer rounding
  }
  if (!ok) {
    rh = h / 2;
    rw = std::clamp<Index>(static_cast<Index>(std::llround(0.375 * hw / static_cast<double>(rh))), 1, w);
  }
  CutMask m;
  m.height = rh;
  m.width = rw;
  m.top = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(h - rh + 1)));
  m.left = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(w - rw + 1)));
  m.values = Tensor<std::uint8_t>::zeros({h, w});
  auto& mv = m.values.data();
  for (Index y = m.top; y < m.top + rh; ++y)
    for (Index x = m.left; x < m.left + rw; ++x)
      mv[static_cast<std::size_t>(y * w + x)] = 1;
  return m;
}

// ---- bidirectional CutMix ---------------------------------------------------

// inner = a inside the mask, b outside; outer = the reverse. Because the mask
// is binary this is pure selection, so both reconstruction identities hold
// bit-exactly; it also applies unchanged to integer label maps.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> bcmix(const Tensor<S>& a, const Tensor<S>& b,
                                      const CutMask& mask) {
  if (a.shape() != b.shape())
    throw DimensionError("bcmix: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Index c, h, w;
  detail::spatial_extents(a, "bcmix", c, h, w);
  if (mask.values.extent(0) != h || mask.values.extent(1) != w)
    throw DimensionError("bcmix: mask " + shape_str(mask.values.shape()) +
                         " does not match input " + shape_str(a.shape()));
  Tensor<S> inner = Tensor<S>::zeros(a.shape());
  Tensor<S> outer = Tensor<S>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  const auto& mv = mask.values.data();
  auto& iv = inner.data();
  auto& ov = outer.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index p = 0; p < h * w; ++p) {
      const std::size_t at = static_cast<std::size_t>(ci * h * w + p);
      const bool in = mv[static_cast<std::size_t>(p)] != 0;
      iv[at] = in ? av[at] : bv[at];
      ov[at] = in ? bv[at] : av[at];
    }
  return {std::move(inner), std::move(outer)};
}

}  // namespace bcmda
