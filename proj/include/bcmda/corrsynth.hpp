#pragma once

// Bidirectional correlation maps between a labeled and an unlabeled feature
// map, plus correlation-informed image synthesis. Both run detached from the
// autodiff graph: correlations come from the teacher and synthesis acts as
// data augmentation.

#include <cmath>
#include <vector>

#include "bcmda/errors.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

template <typename S>
struct CorrelationPair {
  Tensor<S> c_xu;  // labeled -> unlabeled, [W'W' x W'W'], column-stochastic
  Tensor<S> c_ux;  // unlabeled -> labeled, transpose-product counterpart
  Index w_prime = 0;
};

namespace detail {

// Column softmax of an N x N logit matrix held in double; writes S.
template <typename S>
Tensor<S> column_softmax(const std::vector<double>& logits, Index n) {
  Tensor<S> out = Tensor<S>::zeros({n, n});
  auto& ov = out.data();
  for (Index j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) mx = std::max(mx, logits[static_cast<std::size_t>(i * n + j)]);
    double z = 0.0;
    for (Index i = 0; i < n; ++i)
      z += std::exp(logits[static_cast<std::size_t>(i * n + j)] - mx);
    for (Index i = 0; i < n; ++i)
      ov[static_cast<std::size_t>(i * n + j)] =
          static_cast<S>(std::exp(logits[static_cast<std::size_t>(i * n + j)] - mx) / z);
  }
  return out;
}

// Downsample a [D,H,W] map to w' x w' and flatten into a double matrix
// [D x w'w'].
template <typename S>
std::vector<double> down_flat(const Tensor<S>& t, Index w_prime) {
  NoGradGuard ng;
  auto d = resize_bilinear(t, w_prime, w_prime);
  std::vector<double> out(d.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(d.data()[i]);
  return out;
}

}  // namespace detail

// Scaled-dot-product correlations between downsampled feature maps:
// logits[i,j] = <x_i, u_j> / sqrt(D'), then per-column softmax. c_ux uses the
// transposed product, so swapping the inputs swaps the two maps bit-exactly.
template <typename S>
CorrelationPair<S> compute_bcm(const Tensor<S>& ft_x, const Tensor<S>& ft_u, Index w_prime) {
  if (ft_x.rank() != 3 || ft_u.rank() != 3)
    throw DimensionError("compute_bcm: feature maps must be [D,H,W], got " +
                         shape_str(ft_x.shape()) + " and " + shape_str(ft_u.shape()));
  if (ft_x.shape() != ft_u.shape())
    throw DimensionError("compute_bcm: feature shapes " + shape_str(ft_x.shape()) + " vs " +
                         shape_str(ft_u.shape()));
  if (w_prime < 1 || w_prime > ft_x.extent(1) || w_prime > ft_x.extent(2))
    throw ParameterError("compute_bcm: w_prime " + std::to_string(w_prime) +
                         " out of range for " + shape_str(ft_x.shape()));
  NoGradGuard ng;
  const Index d = ft_x.extent(0);
  const Index n = w_prime * w_prime;
  const auto xf = detail::down_flat(ft_x, w_prime);
  const auto uf = detail::down_flat(ft_u, w_prime);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  std::vector<double> logits(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      double acc = 0.0;
      for (Index k = 0; k < d; ++k)
        acc += xf[static_cast<std::size_t>(k * n + i)] * uf[static_cast<std::size_t>(k * n + j)];
      logits[static_cast<std::size_t>(i * n + j)] = acc * inv_sqrt_d;
    }
  std::vector<double> logits_t(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      logits_t[static_cast<std::size_t>(i * n + j)] = logits[static_cast<std::size_t>(j * n + i)];

  CorrelationPair<S> pair;
  pair.w_prime = w_prime;
  pair.c_xu = detail::column_softmax<S>(logits, n);
  pair.c_ux = detail::column_softmax<S>(logits_t, n);
  return pair;
}

// Downsample, mix pixels through a column-stochastic correlation map, and
// return the w' x w' result (still at reduced resolution). Every output pixel
// is a convex combination of the source's downsampled pixels.
template <typename S>
Tensor<S> synthesize_down(const Tensor<S>& image, const Tensor<S>& corr) {
  if (image.rank() != 3)
    throw DimensionError("synthesize_down: image must be [D,H,W], got " +
                         shape_str(image.shape()));
  if (corr.rank() != 2 || corr.extent(0) != corr.extent(1))
    throw DimensionError("synthesize_down: correlation map must be square, got " +
                         shape_str(corr.shape()));
  const Index n = corr.extent(0);
  const Index w_prime = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
  if (w_prime * w_prime != n)
    throw DimensionError("synthesize_down: correlation extent " + std::to_string(n) +
                         " is not a perfect square");
  for (S v : image.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw ContractError("synthesize_down: image contains non-finite values");
  const auto& cv = corr.data();
  for (Index j = 0; j < n; ++j) {
    double col = 0.0;
    for (Index i = 0; i < n; ++i) col += static_cast<double>(cv[static_cast<std::size_t>(i * n + j)]);
    if (std::fabs(col - 1.0) > 1e-3)
      throw ContractError("synthesize_down: column " + std::to_string(j) +
                          " sums to " + std::to_string(col) + ", not stochastic");
  }

  NoGradGuard ng;
  const Index d = image.extent(0);
  const auto src = detail::down_flat(image, w_prime);
  Tensor<S> out = Tensor<S>::zeros({d, w_prime, w_prime});
  auto& ov = out.data();
  for (Index k = 0; k < d; ++k)
    for (Index j = 0; j < n; ++j) {
      double acc = 0.0;
      for (Index i = 0; i < n; ++i)
        acc += src[static_cast<std::size_t>(k * n + i)] *
               static_cast<double>(cv[static_cast<std::size_t>(i * n + j)]);
      ov[static_cast<std::size_t>(k * n + j)] = static_cast<S>(acc);
    }
  return out;
}

// Full synthesis: reduced-resolution mixing followed by bilinear upsampling
// back to the requested extent.
template <typename S>
Tensor<S> synthesize(const Tensor<S>& image, const Tensor<S>& corr, Index target_h,
                     Index target_w) {
  NoGradGuard ng;
  auto down = synthesize_down(image, corr);
  return resize_bilinear(down, target_h, target_w);
}

}  // namespace bcmda
