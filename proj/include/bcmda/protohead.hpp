#pragma once

// Classifier heads on top of the backbone feature map: a linear (1x1 affine)
// head, prototype cosine-similarity heads, bidirectional prototype-weight
// blending on a time schedule, and prototypical pseudo-label correction.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bcmda/errors.hpp"
#include "bcmda/rng.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

template <typename S>
struct ClassifierBank {
  Tensor<S> linear_w;  // [C, D']
  Tensor<S> linear_b;  // [C]
  Tensor<S> proto_w1;  // [C, D'] first prototype set
  Tensor<S> proto_w2;  // [C, D'] second prototype set
  double tau_temp = 0.05;

  Index num_classes() const { return linear_w.extent(0); }
  Index feature_dim() const { return linear_w.extent(1); }

  std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
    return {{"linear_w", &linear_w},
            {"linear_b", &linear_b},
            {"proto_w1", &proto_w1},
            {"proto_w2", &proto_w2}};
  }
};

// Gaussian linear head; prototype rows drawn i.i.d. and normalized to unit
// norm, with separate streams so the two sets start genuinely distinct.
template <typename S>
ClassifierBank<S> make_bank(Index num_classes, Index feature_dim, double tau_temp, Rng rng) {
  if (num_classes < 2) throw ParameterError("make_bank: need at least 2 classes");
  if (feature_dim < 1) throw ParameterError("make_bank: feature_dim must be positive");
  if (!(tau_temp > 0.0)) throw ParameterError("make_bank: tau_temp must be positive");
  ClassifierBank<S> bank;
  bank.tau_temp = tau_temp;
  Rng rl = rng.fork(1), r1 = rng.fork(2), r2 = rng.fork(3);
  bank.linear_w = Tensor<S>::zeros({num_classes, feature_dim});
  const double std_dev = std::sqrt(1.0 / static_cast<double>(feature_dim));
  for (auto& v : bank.linear_w.data()) v = static_cast<S>(rl.normal(0.0, std_dev));
  bank.linear_b = Tensor<S>::zeros({num_classes});
  auto proto_init = [&](Rng& r) {
    Tensor<S> p = Tensor<S>::zeros({num_classes, feature_dim});
    for (Index c = 0; c < num_classes; ++c) {
      double norm2 = 0.0;
      std::vector<double> row(static_cast<std::size_t>(feature_dim));
      for (auto& v : row) {
        v = r.normal();
        norm2 += v * v;
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (Index k = 0; k < feature_dim; ++k)
        p.at({c, k}) = static_cast<S>(row[static_cast<std::size_t>(k)] * inv);
    }
    return p;
  };
  bank.proto_w1 = proto_init(r1);
  bank.proto_w2 = proto_init(r2);
  return bank;
}

template <typename S>
void set_trainable(ClassifierBank<S>& bank, bool on) {
  for (auto& [name, t] : bank.named_params()) t->set_requires_grad(on);
}

template <typename S>
ClassifierBank<S> clone_bank(const ClassifierBank<S>& src) {
  ClassifierBank<S> out;
  out.linear_w = src.linear_w.clone();
  out.linear_b = src.linear_b.clone();
  out.proto_w1 = src.proto_w1.clone();
  out.proto_w2 = src.proto_w2.clone();
  out.tau_temp = src.tau_temp;
  return out;
}

// Same fixed-point-exact EMA form as the backbone update.
template <typename S>
void ema_update_bank(ClassifierBank<S>& teacher, ClassifierBank<S>& student, double decay) {
  if (!(decay >= 0.0 && decay < 1.0))
    throw ParameterError("ema_update_bank: decay must satisfy 0 <= decay < 1");
  auto tp = teacher.named_params();
  auto sp = student.named_params();
  for (std::size_t i = 0; i < tp.size(); ++i) {
    Tensor<S>& t = *tp[i].second;
    const Tensor<S>& s = *sp[i].second;
    if (t.shape() != s.shape())
      throw ContractError("ema_update_bank: shape mismatch for " + tp[i].first + ": " +
                          shape_str(t.shape()) + " vs " + shape_str(s.shape()));
    auto& tv = t.data();
    const auto& sv = s.data();
    if (decay == 0.0) {
      tv = sv;
      continue;
    }
    const S one_minus = static_cast<S>(1.0 - decay);
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] += one_minus * (sv[j] - tv[j]);
  }
}

// ---- forward heads --------------------------------------------------------

// Per-pixel affine map followed by class softmax: [D,H,W] -> [C,H,W].
template <typename S>
Tensor<S> linear_forward(const Tensor<S>& ft, const Tensor<S>& w, const Tensor<S>& b) {
  if (ft.rank() != 3)
    throw DimensionError("linear_forward: features must be [D,H,W], got " +
                         shape_str(ft.shape()));
  if (w.rank() != 2 || w.extent(1) != ft.extent(0))
    throw DimensionError("linear_forward: weight " + shape_str(w.shape()) +
                         " vs features " + shape_str(ft.shape()));
  const Index d = ft.extent(0), h = ft.extent(1), wd = ft.extent(2);
  auto flat = reshape(ft, {d, h * wd});
  auto logits = add_channel_bias(matmul(w, flat), b);
  return softmax(reshape(logits, {w.extent(0), h, wd}), 0);
}

template <typename S>
Tensor<S> linear_forward(const Tensor<S>& ft, const ClassifierBank<S>& bank) {
  return linear_forward(ft, bank.linear_w, bank.linear_b);
}

// Running count of cosine-head forward invocations. Lets callers assert that
// a code path (plain inference, evaluation) never touches the prototype heads.
inline std::atomic<std::uint64_t>& cossim_call_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

// Cosine similarity to each prototype, scaled by 1/tau_temp, class softmax.
// Zero-norm features or prototypes contribute similarity 0.
template <typename S>
Tensor<S> cossim_forward(const Tensor<S>& ft, const Tensor<S>& proto, double tau_temp) {
  if (!(tau_temp > 0.0)) throw ParameterError("cossim_forward: tau_temp must be positive");
  cossim_call_count().fetch_add(1, std::memory_order_relaxed);
  auto sims = cosine_logits(ft, proto);
  return softmax(scale(sims, static_cast<S>(1.0 / tau_temp)), 0);
}

// ---- prototype blending -----------------------------------------------------

template <typename S>
struct BlendedWeights {
  Tensor<S> w_v;     // virtual-domain prototypes
  Tensor<S> w_r;     // real-domain prototypes
  Tensor<S> w_avg;   // plain average
  double lambda_sim = 0.0;
};

inline double lambda_sim_at(Index t, Index t_max) {
  if (t_max < 1) throw ParameterError("lambda_sim_at: t_max must be >= 1");
  if (t < 0 || t > t_max)
    throw ParameterError("lambda_sim_at: t must lie in [0, t_max], got " + std::to_string(t));
  return std::exp(-5.0 * (1.0 - static_cast<double>(t) / static_cast<double>(t_max)));
}

// w_v = (2W1 + (1+l)W2)/(3+l), w_r = (2W2 + (1+l)W1)/(3+l) with
// l = e^{-5(1-t/t_max)}; w_avg = (W1+W2)/2. The two formulas average to
// w_avg identically, and at t=t_max they coincide bit-exactly. Built from
// differentiable ops so both prototype sets receive gradient through either
// blend.
template <typename S>
BlendedWeights<S> blend_weights(const ClassifierBank<S>& bank, Index t, Index t_max) {
  if (bank.proto_w1.shape() != bank.proto_w2.shape())
    throw ContractError("blend_weights: prototype shapes differ");
  const double l = lambda_sim_at(t, t_max);
  BlendedWeights<S> out;
  out.lambda_sim = l;
  const S two = static_cast<S>(2);
  const S one_plus = static_cast<S>(1.0 + l);
  const S inv = static_cast<S>(1.0 / (3.0 + l));
  out.w_v = scale(add(scale(bank.proto_w1, two), scale(bank.proto_w2, one_plus)), inv);
  out.w_r = scale(add(scale(bank.proto_w2, two), scale(bank.proto_w1, one_plus)), inv);
  out.w_avg = scale(add(bank.proto_w1, bank.proto_w2), static_cast<S>(0.5));
  return out;
}

// ---- prototypical pseudo-label correction -----------------------------------

// Per pixel: where the prototype head's best FOREGROUND probability (classes
// >= 1) exceeds tau, take the prototype pixel, else the linear pixel. Selects
// whole class vectors, so the result stays a valid probability map.
template <typename S>
Tensor<S> pplc(const Tensor<S>& p_c, const Tensor<S>& p_l, double tau) {
  if (p_c.rank() != 3 || p_c.shape() != p_l.shape())
    throw DimensionError("pplc: probability maps must be [C,H,W] and match, got " +
                         shape_str(p_c.shape()) + " vs " + shape_str(p_l.shape()));
  if (p_c.extent(0) < 2)
    throw ContractError("pplc: need at least 2 classes for a foreground/background split");
  if (!(tau > 0.0 && tau < 1.0)) throw ParameterError("pplc: tau must lie in (0,1)");
  const Index c = p_c.extent(0);
  const Index n = p_c.numel() / c;
  Tensor<S> out = Tensor<S>::zeros(p_c.shape());
  const auto& cv = p_c.data();
  const auto& lv = p_l.data();
  auto& ov = out.data();
  for (Index p = 0; p < n; ++p) {
    S fg = cv[static_cast<std::size_t>(n + p)];  // class 1
    for (Index ci = 2; ci < c; ++ci)
      fg = std::max(fg, cv[static_cast<std::size_t>(ci * n + p)]);
    const bool corrected = static_cast<double>(fg) > tau;
    for (Index ci = 0; ci < c; ++ci) {
      const std::size_t at = static_cast<std::size_t>(ci * n + p);
      ov[at] = corrected ? cv[at] : lv[at];
    }
  }
  return out;
}

}  // namespace bcmda
