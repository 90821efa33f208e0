#pragma once

// Pseudo-labels, averaged supervision, confidence filtering, and the masked
// CE + Dice segmentation objective with its four-branch composite form.

#include <utility>
#include <vector>

#include "bcmda/errors.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kLogFloor = 1e-7;

// Supervision for one mixed branch: a (mixed) one-hot target, the (mixed)
// per-pixel confidence map it came with, and the binary filter mask derived
// from that confidence.
template <typename S>
struct SupervisionPack {
  Tensor<S> target;      // [C,H,W] one-hot
  Tensor<S> confidence;  // [C,H,W]
  Tensor<S> filter;      // [H,W] in {0,1}
};

// Hard per-pixel argmax as a one-hot map; ties go to the lowest class id.
template <typename S>
Tensor<S> pseudo_label(const Tensor<S>& p) {
  if (p.rank() != 3)
    throw DimensionError("pseudo_label: expects [C,H,W], got " + shape_str(p.shape()));
  return one_hot<S>(argmax0(p), p.extent(0));
}

// Mean of the two corrected teacher maps; when labeled and unlabeled samples
// share a domain there is nothing to average and the real-domain map is
// returned exactly.
template <typename S>
Tensor<S> avg_probability(const Tensor<S>& p_cr_wv, const Tensor<S>& p_cr_w, bool same_domain) {
  if (p_cr_wv.shape() != p_cr_w.shape())
    throw DimensionError("avg_probability: shapes " + shape_str(p_cr_wv.shape()) + " vs " +
                         shape_str(p_cr_w.shape()));
  if (same_domain) return p_cr_w;
  NoGradGuard ng;
  return scale(add(p_cr_wv, p_cr_w), static_cast<S>(0.5));
}

// m_i = 1 iff the per-pixel max over all classes exceeds tau.
template <typename S>
Tensor<S> filter_mask(const Tensor<S>& p_avg, double tau) {
  if (p_avg.rank() != 3)
    throw DimensionError("filter_mask: expects [C,H,W], got " + shape_str(p_avg.shape()));
  if (!(tau > 0.0 && tau < 1.0)) throw ParameterError("filter_mask: tau must lie in (0,1)");
  auto mx = max0(p_avg);
  Tensor<S> m = Tensor<S>::zeros(mx.shape());
  const auto& xv = mx.data();
  auto& mv = m.data();
  for (std::size_t i = 0; i < mv.size(); ++i)
    mv[i] = static_cast<double>(xv[i]) > tau ? S{1} : S{0};
  return m;
}

namespace detail {

template <typename S>
void check_loss_shapes(const char* op, const Tensor<S>& y, const Tensor<S>& p,
                       const Tensor<S>& m) {
  if (y.rank() != 3 || y.shape() != p.shape())
    throw DimensionError(std::string(op) + ": target " + shape_str(y.shape()) +
                         " vs prediction " + shape_str(p.shape()));
  if (m.rank() != 2 || m.extent(0) != y.extent(1) || m.extent(1) != y.extent(2))
    throw DimensionError(std::string(op) + ": mask " + shape_str(m.shape()) +
                         " vs target " + shape_str(y.shape()));
}

// Replicate an [H,W] mask across C channels as an untracked constant.
template <typename S>
Tensor<S> broadcast_mask(const Tensor<S>& m, Index c) {
  Tensor<S> out = Tensor<S>::zeros({c, m.extent(0), m.extent(1)});
  const auto& mv = m.data();
  auto& ov = out.data();
  const std::size_t n = mv.size();
  for (Index ci = 0; ci < c; ++ci)
    std::copy(mv.begin(), mv.end(), ov.begin() + static_cast<std::ptrdiff_t>(ci) * static_cast<std::ptrdiff_t>(n));
  return out;
}

}  // namespace detail

// -(1/HW) sum_i m_i y_i log p_i, probabilities floored at 1e-7 before the
// log. Normalization is by H*W, not by the active-pixel count.
template <typename S>
Tensor<S> masked_ce(const Tensor<S>& y, const Tensor<S>& p, const Tensor<S>& m) {
  detail::check_loss_shapes("masked_ce", y, p, m);
  const Index hw = y.extent(1) * y.extent(2);
  auto m3 = detail::broadcast_mask(m, y.extent(0));
  auto ll = log_elem(clamp(p, static_cast<S>(kLogFloor), static_cast<S>(1)));
  auto picked = mul(mul(y, ll), m3);
  return scale(sum(picked), static_cast<S>(-1.0 / static_cast<double>(hw)));
}

// 1 - (2 sum m p y + eps) / (sum m (p^2 + y^2) + eps), flattened over all
// channels. An all-zero mask gives eps/eps and a loss of exactly 0.
template <typename S>
Tensor<S> masked_dice(const Tensor<S>& y, const Tensor<S>& p, const Tensor<S>& m) {
  detail::check_loss_shapes("masked_dice", y, p, m);
  auto m3 = detail::broadcast_mask(m, y.extent(0));
  auto num = add_scalar(scale(sum(mul(mul(p, y), m3)), static_cast<S>(2)),
                        static_cast<S>(kDiceEps));
  auto den = add_scalar(sum(mul(add(mul(p, p), mul(y, y)), m3)), static_cast<S>(kDiceEps));
  return add_scalar(scale(divide(num, den), static_cast<S>(-1)), static_cast<S>(1));
}

// L_seg = L_ce + L_dice under a shared mask.
template <typename S>
Tensor<S> seg_loss(const Tensor<S>& y, const Tensor<S>& p, const Tensor<S>& m) {
  return add(masked_ce(y, p, m), masked_dice(y, p, m));
}

// One mixed branch: average of the Linear-head and CosSim-head seg losses
// against the same pack.
template <typename S>
Tensor<S> branch_loss(const SupervisionPack<S>& pack, const Tensor<S>& pred_linear,
                      const Tensor<S>& pred_cos) {
  auto a = seg_loss(pack.target, pred_linear, pack.filter);
  auto b = seg_loss(pack.target, pred_cos, pack.filter);
  return scale(add(a, b), static_cast<S>(0.5));
}

// Total objective over the four mixed branches (in1, out1, in2, out2), each
// carrying a (linear, cossim) prediction pair:
// total = 1/2 (in1 + out1) + 1/2 (in2 + out2).
template <typename S>
Tensor<S> composite_loss(const std::vector<SupervisionPack<S>>& packs,
                         const std::vector<std::pair<Tensor<S>, Tensor<S>>>& preds) {
  if (packs.size() != 4 || preds.size() != 4)
    throw ContractError("composite_loss: expected 4 branches, got " +
                        std::to_string(packs.size()) + " packs and " +
                        std::to_string(preds.size()) + " prediction pairs");
  std::vector<Tensor<S>> branch(4);
  for (std::size_t i = 0; i < 4; ++i)
    branch[i] = branch_loss(packs[i], preds[i].first, preds[i].second);
  auto stage1 = scale(add(branch[0], branch[1]), static_cast<S>(0.5));
  auto stage2 = scale(add(branch[2], branch[3]), static_cast<S>(0.5));
  return add(stage1, stage2);
}

}  // namespace bcmda
