#pragma once

// Dense row-major tensor with reverse-mode autodiff, templated on scalar.
// Handles share storage (shallow copy); ops are free functions that record
// a backward closure when gradient tracking is on. Eigen does the heavy
// lifting for matmul/conv (im2col + GEMM); reductions accumulate in double
// so results are stable regardless of extent.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bcmda/errors.hpp"

namespace bcmda {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// Global gradient-recording switch (the project is single-threaded).
struct GradMode {
  static bool& enabled() {
    static bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
class Tensor;

namespace detail {

template <typename S>
struct OpNode {
  std::vector<Tensor<S>> parents;
  // backprop(out_grad, parent_grads): parent_grads[i] is null when parent i
  // does not need a gradient; otherwise it points at a zero-initialized
  // buffer of the parent's numel to accumulate into.
  std::function<void(const std::vector<S>&, const std::vector<std::vector<S>*>&)> backprop;
};

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // persistent, leaves only; empty until backward touches it
  bool requires_grad = false;
  std::unique_ptr<OpNode<S>> node;
};

}  // namespace detail

// Eigen views over tensor storage. Row-major to match the tensor layout.
template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Impl = detail::TensorImpl<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), S{}); }

  static Tensor full(Shape shape, S value) {
    check_shape(shape);
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(numel_of(t.impl_->shape)), value);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    check_shape(shape);
    if (static_cast<Index>(data.size()) != numel_of(shape))
      throw DimensionError("from_data: " + std::to_string(data.size()) +
                           " values for shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return require().shape; }
  Index rank() const { return static_cast<Index>(require().shape.size()); }
  Index extent(Index axis) const { return require().shape.at(static_cast<std::size_t>(axis)); }
  Index numel() const { return static_cast<Index>(require().data.size()); }

  std::vector<S>& data() { return require().data; }
  const std::vector<S>& data() const { return require().data; }

  S& at(std::initializer_list<Index> idx) { return require().data[offset(idx)]; }
  S value(std::initializer_list<Index> idx) const { return require().data[offset(idx)]; }

  S item() const {
    if (numel() != 1) throw ContractError("item: tensor has shape " + shape_str(shape()));
    return require().data[0];
  }

  // Deep copy of the data; the copy is an untracked leaf.
  Tensor clone() const {
    Tensor t = from_data(shape(), require().data);
    return t;
  }

  bool requires_grad() const { return defined() && impl_->requires_grad; }
  void set_requires_grad(bool on) {
    if (require().node) throw ContractError("set_requires_grad: tensor is not a leaf");
    impl_->requires_grad = on;
  }
  bool tracked() const { return defined() && (impl_->requires_grad || impl_->node != nullptr); }

  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (!has_grad())
      throw ContractError("grad: no gradient accumulated (run backward first)");
    return impl_->grad;
  }
  void zero_grad() {
    if (defined() && !impl_->grad.empty())
      std::fill(impl_->grad.begin(), impl_->grad.end(), S{});
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

  void attach_node(std::vector<Tensor> parents,
                   std::function<void(const std::vector<S>&, const std::vector<std::vector<S>*>&)> fn) {
    require().node = std::make_unique<detail::OpNode<S>>();
    impl_->node->parents = std::move(parents);
    impl_->node->backprop = std::move(fn);
  }

 private:
  static void check_shape(const Shape& shape) {
    for (Index e : shape)
      if (e <= 0) throw DimensionError("extents must be positive, got " + shape_str(shape));
  }

  Impl& require() const {
    if (!impl_) throw ContractError("operation on an undefined tensor");
    return *impl_;
  }

  std::size_t offset(std::initializer_list<Index> idx) const {
    const Shape& s = require().shape;
    if (idx.size() != s.size())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " vs shape " + shape_str(s));
    Index off = 0;
    std::size_t d = 0;
    for (Index i : idx) {
      if (i < 0 || i >= s[d])
        throw DimensionError("index " + std::to_string(i) + " out of range for axis " +
                             std::to_string(d) + " of " + shape_str(s));
      off = off * s[d] + i;
      ++d;
    }
    return static_cast<std::size_t>(off);
  }

  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorU8 = Tensor<std::uint8_t>;

namespace detail {

template <typename S>
bool any_tracked(const std::vector<Tensor<S>>& ts) {
  for (const auto& t : ts)
    if (t.tracked()) return true;
  return false;
}

template <typename S, typename Fn>
Tensor<S> make_op(Shape shape, std::vector<S> data, std::vector<Tensor<S>> parents, Fn&& fn) {
  Tensor<S> out = Tensor<S>::from_data(std::move(shape), std::move(data));
  if (GradMode::enabled() && any_tracked(parents))
    out.attach_node(std::move(parents), std::forward<Fn>(fn));
  return out;
}

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op<S>(
      a.shape(), std::move(out), {a, b},
      [](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        for (int p = 0; p < 2; ++p)
          if (pg[p])
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[p])[i] += g[i];
      });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op<S>(
      a.shape(), std::move(out), {a, b},
      [](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
      });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op<S>(
      a.shape(), std::move(out), {a, b},
      [a, b](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b.data()[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a.data()[i];
      });
}

template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("divide", a, b);
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return detail::make_op<S>(
      a.shape(), std::move(out), {a, b},
      [a, b](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        const auto& av2 = a.data();
        const auto& bv2 = b.data();
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / bv2[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pg[1])[i] -= g[i] * av2[i] / (bv2[i] * bv2[i]);
      });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S k) {
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * k;
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [k](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * k;
      });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S k) {
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + k;
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& a, S slope) {
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= S{} ? av[i] : slope * av[i];
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [a, slope](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        const auto& av2 = a.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          (*pg[0])[i] += av2[i] >= S{} ? g[i] : slope * g[i];
      });
}

// Natural log. Callers clamp away from zero first; log never sees x <= 0 in
// the loss paths.
template <typename S>
Tensor<S> log_elem(const Tensor<S>& a) {
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [a](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        const auto& av2 = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / av2[i];
      });
}

// Clamp with zero gradient outside the open interval (lo, hi).
template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  if (!(lo <= hi)) throw ParameterError("clamp: lo > hi");
  std::vector<S> out(a.data().size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(av[i], lo), hi);
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [a, lo, hi](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        const auto& av2 = a.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (av2[i] > lo && av2[i] < hi) (*pg[0])[i] += g[i];
      });
}

// ---- reductions -------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0.0;
  for (S v : a.data()) acc += static_cast<double>(v);
  return detail::make_op<S>(
      Shape{1}, {static_cast<S>(acc)}, {a},
      [](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        for (auto& v : *pg[0]) v += g[0];
      });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), static_cast<S>(1.0 / static_cast<double>(a.numel())));
}

// ---- linear algebra ---------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const Index m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<S> out(static_cast<std::size_t>(m * n));
  EMap<S>(out.data(), m, n).noalias() =
      ECMap<S>(a.data().data(), m, k) * ECMap<S>(b.data().data(), k, n);
  return detail::make_op<S>(
      Shape{m, n}, std::move(out), {a, b},
      [a, b, m, k, n](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        ECMap<S> gm(g.data(), m, n);
        if (pg[0])
          EMap<S>(pg[0]->data(), m, k).noalias() +=
              gm * ECMap<S>(b.data().data(), k, n).transpose();
        if (pg[1])
          EMap<S>(pg[1]->data(), k, n).noalias() +=
              ECMap<S>(a.data().data(), m, k).transpose() * gm;
      });
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: expects rank 2, got " + shape_str(a.shape()));
  const Index r = a.extent(0), c = a.extent(1);
  std::vector<S> out(static_cast<std::size_t>(r * c));
  EMap<S>(out.data(), c, r) = ECMap<S>(a.data().data(), r, c).transpose();
  return detail::make_op<S>(
      Shape{c, r}, std::move(out), {a},
      [r, c](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          EMap<S>(pg[0]->data(), r, c) += ECMap<S>(g.data(), c, r).transpose();
      });
}

// ---- shape ops --------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<S> out = a.data();
  return detail::make_op<S>(
      std::move(shape), std::move(out), {a},
      [](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

// Concatenate two rank-3 tensors [C,H,W] along the channel axis.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw DimensionError("concat_channels: expects rank 3, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  if (a.extent(1) != b.extent(1) || a.extent(2) != b.extent(2))
    throw DimensionError("concat_channels: spatial mismatch, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t na = a.data().size(), nb = b.data().size();
  std::vector<S> out(na + nb);
  std::copy(a.data().begin(), a.data().end(), out.begin());
  std::copy(b.data().begin(), b.data().end(), out.begin() + static_cast<std::ptrdiff_t>(na));
  return detail::make_op<S>(
      Shape{a.extent(0) + b.extent(0), a.extent(1), a.extent(2)}, std::move(out), {a, b},
      [na, nb](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < na; ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < nb; ++i) (*pg[1])[i] += g[na + i];
      });
}

// ---- softmax ----------------------------------------------------------

// Numerically stable softmax along `axis`; per-lane accumulation runs in
// double so column sums stay tight even in float storage.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, Index axis) {
  if (axis < 0 || axis >= a.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " for shape " +
                         shape_str(a.shape()));
  const Shape& sh = a.shape();
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= sh[static_cast<std::size_t>(d)];
  for (Index d = axis + 1; d < a.rank(); ++d) inner *= sh[static_cast<std::size_t>(d)];
  const Index lane = sh[static_cast<std::size_t>(axis)];
  // The backward needs the forward output; keep a copy in the closure rather
  // than a handle to the result itself (that would make an ownership cycle).
  auto y = std::make_shared<std::vector<S>>(a.data().size());
  const auto& av = a.data();
  for (Index o = 0; o < outer; ++o)
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * lane * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index l = 0; l < lane; ++l)
        mx = std::max(mx, static_cast<double>(av[static_cast<std::size_t>(base + l * inner)]));
      double z = 0.0;
      for (Index l = 0; l < lane; ++l)
        z += std::exp(static_cast<double>(av[static_cast<std::size_t>(base + l * inner)]) - mx);
      for (Index l = 0; l < lane; ++l) {
        const std::size_t at = static_cast<std::size_t>(base + l * inner);
        (*y)[at] = static_cast<S>(std::exp(static_cast<double>(av[at]) - mx) / z);
      }
    }
  std::vector<S> out = *y;
  // dx_l = y_l * (g_l - sum_k g_k y_k), per lane.
  return detail::make_op<S>(
      a.shape(), std::move(out), {a},
      [y, outer, inner, lane](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        const auto& yv = *y;
        for (Index o = 0; o < outer; ++o)
          for (Index in = 0; in < inner; ++in) {
            const Index base = o * lane * inner + in;
            double dot = 0.0;
            for (Index l = 0; l < lane; ++l) {
              const std::size_t at = static_cast<std::size_t>(base + l * inner);
              dot += static_cast<double>(g[at]) * static_cast<double>(yv[at]);
            }
            for (Index l = 0; l < lane; ++l) {
              const std::size_t at = static_cast<std::size_t>(base + l * inner);
              (*pg[0])[at] += static_cast<S>(static_cast<double>(yv[at]) *
                                             (static_cast<double>(g[at]) - dot));
            }
          }
      });
}

// ---- convolution ------------------------------------------------------

namespace detail {

// im2col for zero-padded stride-s convolution; cols is [Cin*k*k, OH*OW].
template <typename S>
void im2col(const std::vector<S>& x, Index cin, Index h, Index w, Index k, Index stride,
            Index pad, Index oh, Index ow, std::vector<S>& cols) {
  cols.assign(static_cast<std::size_t>(cin * k * k * oh * ow), S{});
  const Index ncols = oh * ow;
  for (Index c = 0; c < cin; ++c)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        const Index row = (c * k + ki) * k + kj;
        S* dst = cols.data() + static_cast<std::size_t>(row * ncols);
        const S* src = x.data() + static_cast<std::size_t>(c * h * w);
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            dst += ow;
            continue;
          }
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride + kj - pad;
            *dst++ = (ix < 0 || ix >= w) ? S{} : src[iy * w + ix];
          }
        }
      }
}

// Scatter-add of column gradients back into the input layout.
template <typename S>
void col2im(const std::vector<S>& cols, Index cin, Index h, Index w, Index k, Index stride,
            Index pad, Index oh, Index ow, std::vector<S>& dx) {
  const Index ncols = oh * ow;
  for (Index c = 0; c < cin; ++c)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        const Index row = (c * k + ki) * k + kj;
        const S* src = cols.data() + static_cast<std::size_t>(row * ncols);
        S* dst = dx.data() + static_cast<std::size_t>(c * h * w);
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            src += ow;
            continue;
          }
          for (Index ox = 0; ox < ow; ++ox) {
            const S v = *src++;
            const Index ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[iy * w + ix] += v;
          }
        }
      }
}

}  // namespace detail

// 2-D convolution, input [Cin,H,W], weight [Cout,Cin,k,k], zero padding k/2
// ("same" at stride 1). Odd kernels only.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, Index stride = 1) {
  if (input.rank() != 3)
    throw DimensionError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4)
    throw DimensionError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
  const Index cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const Index cout = weight.extent(0), k = weight.extent(2);
  if (weight.extent(1) != cin)
    throw DimensionError("conv2d: input channels " + std::to_string(cin) + " vs weight " +
                         shape_str(weight.shape()));
  if (weight.extent(3) != k || k % 2 == 0)
    throw ParameterError("conv2d: kernel must be square and odd, got " + shape_str(weight.shape()));
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  const Index pad = k / 2;
  const Index oh = (h + 2 * pad - k) / stride + 1;
  const Index ow = (w + 2 * pad - k) / stride + 1;

  auto cols = std::make_shared<std::vector<S>>();
  detail::im2col(input.data(), cin, h, w, k, stride, pad, oh, ow, *cols);
  const Index ckk = cin * k * k, ncols = oh * ow;
  std::vector<S> out(static_cast<std::size_t>(cout * ncols));
  EMap<S>(out.data(), cout, ncols).noalias() =
      ECMap<S>(weight.data().data(), cout, ckk) * ECMap<S>(cols->data(), ckk, ncols);

  const bool track = GradMode::enabled() && (input.tracked() || weight.tracked());
  if (!track) return Tensor<S>::from_data(Shape{cout, oh, ow}, std::move(out));

  return detail::make_op<S>(
      Shape{cout, oh, ow}, std::move(out), {input, weight},
      [input, weight, cols, cin, h, w, k, stride, pad, oh, ow, cout, ckk, ncols](
          const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        ECMap<S> gm(g.data(), cout, ncols);
        if (pg[1])
          EMap<S>(pg[1]->data(), cout, ckk).noalias() +=
              gm * ECMap<S>(cols->data(), ckk, ncols).transpose();
        if (pg[0]) {
          std::vector<S> dcols(static_cast<std::size_t>(ckk * ncols));
          EMap<S>(dcols.data(), ckk, ncols).noalias() =
              ECMap<S>(weight.data().data(), cout, ckk).transpose() * gm;
          detail::col2im(dcols, cin, h, w, k, stride, pad, oh, ow, *pg[0]);
        }
      });
}

// Per-channel bias add: t is [C, ...], bias is [C].
template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& t, const Tensor<S>& bias) {
  if (t.rank() < 1 || bias.rank() != 1 || bias.extent(0) != t.extent(0))
    throw DimensionError("add_channel_bias: " + shape_str(t.shape()) + " with bias " +
                         shape_str(bias.shape()));
  const Index c = t.extent(0);
  const Index inner = t.numel() / c;
  std::vector<S> out(t.data().size());
  const auto& tv = t.data();
  const auto& bv = bias.data();
  for (Index ci = 0; ci < c; ++ci) {
    const S b = bv[static_cast<std::size_t>(ci)];
    const std::size_t base = static_cast<std::size_t>(ci * inner);
    for (Index i = 0; i < inner; ++i) out[base + static_cast<std::size_t>(i)] = tv[base + static_cast<std::size_t>(i)] + b;
  }
  return detail::make_op<S>(
      t.shape(), std::move(out), {t, bias},
      [c, inner](const std::vector<S>& g, const std::vector<std::vector<S>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (Index ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            const std::size_t base = static_cast<std::size_t>(ci * inner);
            for (Index i = 0; i < inner; ++i) acc += static_cast<double>(g[base + static_cast<std::size_t>(i)]);
            (*pg[1])[static_cast<std::size_t>(ci)] += static_cast<S>(acc);
          }
      });
}

// ---- bilinear resize ---------------------------------------------------

namespace detail {

struct LerpAxis {
  std::vector<Index> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

// Half-pixel-centre sampling: src = (dst + 0.5) * in/out - 0.5, clamped.
// With in == 2*out this lands exactly between two texels, so downsampling
// by 2 is a 2x2 average.
inline LerpAxis lerp_axis(Index in, Index out) {
  LerpAxis ax;
  ax.i0.resize(static_cast<std::size_t>(out));
  ax.i1.resize(static_cast<std::size_t>(out));
  ax.w1.resize(static_cast<std::size_t>(out));
  const double r = static_cast<double>(in) / static_cast<double>(out);
  for (Index d = 0; d < out; ++d) {
    double s = (static_cast<double>(d) + 0.5) * r - 0.5;
    s = std::min(std::max(s, 0.0), static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(s));
    ax.i0[static_cast<std::size_t>(d)] = lo;
    ax.i1[static_cast<std::size_t>(d)] = std::min(lo + 1, in - 1);
    ax.w1[static_cast<std::size_t>(d)] = s - static_cast<double>(lo);
  }
  return ax;
}

}  // namespace detail

template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& t, Index out_h, Index out_w) {
  if (t.rank() != 3)
    throw DimensionError("resize_bilinear: expects [C,H,W], got " + shape_str(t.shape()));
  if (out_h < 1 || out_w < 1)
    throw DimensionError("resize_bilinear: target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w));
  const Index c = t.extent(0), h = t.extent(1), w = t.extent(2);
  const auto ay = detail::lerp_axis(h, out_h);
  const auto ax = detail::lerp_axis(w, out_w);
  std::vector<S> out(static_cast<std::size_t>(c * out_h * out_w));
  const auto& tv = t.data();
  for (Index ci = 0; ci < c; ++ci) {
    const S* plane = tv.data() + static_cast<std::size_t>(ci * h * w);
    S* dst = out.data() + static_cast<std::size_t>(ci * out_h * out_w);
    for (Index y = 0; y < out_h; ++y) {
      const Index y0 = ay.i0[static_cast<std::size_t>(y)], y1 = ay.i1[static_cast<std::size_t>(y)];
      const double wy = ay.w1[static_cast<std::size_t>(y)];
      for (Index x = 0; x < out_w; ++x) {
        const Index x0 = ax.i0[static_cast<std::size_t>(x)], x1 = ax.i1[static_cast<std::size_t>(x)];
        const double wx = ax.w1[static_cast<std::size_t>(x)];
        const double v = (1.0 - wy) * ((1.0 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1]) +
                         wy * ((1.0 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
        dst[y * out_w + x] = static_cast<S>(v);
      }
    }
  }
  return detail::make_op<S>(
      Shape{c, out_h, out_w}, std::move(out), {t},
      [c, h, w, out_h, out_w, ay, ax](const std::vector<S>& g,
                                      const std::vector<std::vector<S>*>& pg) {
        if (!pg[0]) return;
        for (Index ci = 0; ci < c; ++ci) {
          S* dplane = pg[0]->data() + static_cast<std::size_t>(ci * h * w);
          const S* gp = g.data() + static_cast<std::size_t>(ci * out_h * out_w);
          for (Index y = 0; y < out_h; ++y) {
            const Index y0 = ay.i0[static_cast<std::size_t>(y)],
                        y1 = ay.i1[static_cast<std::size_t>(y)];
            const double wy = ay.w1[static_cast<std::size_t>(y)];
            for (Index x = 0; x < out_w; ++x) {
              const Index x0 = ax.i0[static_cast<std::size_t>(x)],
                          x1 = ax.i1[static_cast<std::size_t>(x)];
              const double wx = ax.w1[static_cast<std::size_t>(x)];
              const double gv = static_cast<double>(gp[y * out_w + x]);
              dplane[y0 * w + x0] += static_cast<S>((1.0 - wy) * (1.0 - wx) * gv);
              dplane[y0 * w + x1] += static_cast<S>((1.0 - wy) * wx * gv);
              dplane[y1 * w + x0] += static_cast<S>(wy * (1.0 - wx) * gv);
              dplane[y1 * w + x1] += static_cast<S>(wy * wx * gv);
            }
          }
        }
      });
}

// ---- cosine-similarity logits ------------------------------------------

// logits[c, p] = <f_p, w_c> / (|f_p| |w_c|) over features ft [D, ...] and
// prototypes [C, D]. Zero-norm vectors get similarity 0 and pass no gradient,
// which keeps the op total (no NaNs from dead features).
template <typename S>
Tensor<S> cosine_logits(const Tensor<S>& ft, const Tensor<S>& protos) {
  if (ft.rank() < 2)
    throw DimensionError("cosine_logits: features must be [D,...], got " + shape_str(ft.shape()));
  if (protos.rank() != 2)
    throw DimensionError("cosine_logits: prototypes must be [C,D], got " + shape_str(protos.shape()));
  const Index d = ft.extent(0);
  if (protos.extent(1) != d)
    throw DimensionError("cosine_logits: feature dim " + std::to_string(d) + " vs prototypes " +
                         shape_str(protos.shape()));
  const Index c = protos.extent(0);
  const Index n = ft.numel() / d;  // spatial positions
  Shape out_shape;
  out_shape.push_back(c);
  for (Index a = 1; a < ft.rank(); ++a) out_shape.push_back(ft.extent(a));

  const auto& fv = ft.data();
  const auto& wv = protos.data();
  auto fnorm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  auto wnorm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  for (Index p = 0; p < n; ++p) {
    double acc = 0.0;
    for (Index k = 0; k < d; ++k) {
      const double v = static_cast<double>(fv[static_cast<std::size_t>(k * n + p)]);
      acc += v * v;
    }
    (*fnorm)[static_cast<std::size_t>(p)] = std::sqrt(acc);
  }
  for (Index ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (Index k = 0; k < d; ++k) {
      const double v = static_cast<double>(wv[static_cast<std::size_t>(ci * d + k)]);
      acc += v * v;
    }
    (*wnorm)[static_cast<std::size_t>(ci)] = std::sqrt(acc);
  }
  auto sim = std::make_shared<std::vector<S>>(static_cast<std::size_t>(c * n), S{});
  for (Index ci = 0; ci < c; ++ci) {
    const double nw = (*wnorm)[static_cast<std::size_t>(ci)];
    if (nw == 0.0) continue;
    for (Index p = 0; p < n; ++p) {
      const double nf = (*fnorm)[static_cast<std::size_t>(p)];
      if (nf == 0.0) continue;
      double dot = 0.0;
      for (Index k = 0; k < d; ++k)
        dot += static_cast<double>(fv[static_cast<std::size_t>(k * n + p)]) *
               static_cast<double>(wv[static_cast<std::size_t>(ci * d + k)]);
      (*sim)[static_cast<std::size_t>(ci * n + p)] = static_cast<S>(dot / (nf * nw));
    }
  }
  std::vector<S> out = *sim;

  return detail::make_op<S>(
      std::move(out_shape), std::move(out), {ft, protos},
      [ft, protos, sim, fnorm, wnorm, c, d, n](const std::vector<S>& g,
                                               const std::vector<std::vector<S>*>& pg) {
        const auto& fv2 = ft.data();
        const auto& wv2 = protos.data();
        const auto& sv = *sim;
        for (Index ci = 0; ci < c; ++ci) {
          const double nw = (*wnorm)[static_cast<std::size_t>(ci)];
          if (nw == 0.0) continue;
          for (Index p = 0; p < n; ++p) {
            const double nf = (*fnorm)[static_cast<std::size_t>(p)];
            if (nf == 0.0) continue;
            const double gv = static_cast<double>(g[static_cast<std::size_t>(ci * n + p)]);
            if (gv == 0.0) continue;
            const double s = static_cast<double>(sv[static_cast<std::size_t>(ci * n + p)]);
            // d sim / d f = w/(|f||w|) - sim * f/|f|^2 ; symmetric for w.
            for (Index k = 0; k < d; ++k) {
              const double fk = static_cast<double>(fv2[static_cast<std::size_t>(k * n + p)]);
              const double wk = static_cast<double>(wv2[static_cast<std::size_t>(ci * d + k)]);
              if (pg[0])
                (*pg[0])[static_cast<std::size_t>(k * n + p)] +=
                    static_cast<S>(gv * (wk / (nf * nw) - s * fk / (nf * nf)));
              if (pg[1])
                (*pg[1])[static_cast<std::size_t>(ci * d + k)] +=
                    static_cast<S>(gv * (fk / (nf * nw) - s * wk / (nw * nw)));
            }
          }
        }
      });
}

// ---- non-differentiable helpers ----------------------------------------

// Argmax over axis 0 of [C, ...]; ties resolve to the lowest class id.
template <typename S>
Tensor<std::uint8_t> argmax0(const Tensor<S>& t) {
  if (t.rank() < 2) throw DimensionError("argmax0: expects [C,...], got " + shape_str(t.shape()));
  const Index c = t.extent(0);
  if (c > 255) throw ContractError("argmax0: more than 255 classes");
  const Index n = t.numel() / c;
  Shape out_shape(t.shape().begin() + 1, t.shape().end());
  Tensor<std::uint8_t> out = Tensor<std::uint8_t>::zeros(out_shape);
  const auto& tv = t.data();
  auto& ov = out.data();
  for (Index p = 0; p < n; ++p) {
    S best = tv[static_cast<std::size_t>(p)];
    Index arg = 0;
    for (Index ci = 1; ci < c; ++ci) {
      const S v = tv[static_cast<std::size_t>(ci * n + p)];
      if (v > best) {
        best = v;
        arg = ci;
      }
    }
    ov[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(arg);
  }
  return out;
}

// Max over axis 0 of [C, ...] (values, untracked).
template <typename S>
Tensor<S> max0(const Tensor<S>& t) {
  if (t.rank() < 2) throw DimensionError("max0: expects [C,...], got " + shape_str(t.shape()));
  const Index c = t.extent(0);
  const Index n = t.numel() / c;
  Shape out_shape(t.shape().begin() + 1, t.shape().end());
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const auto& tv = t.data();
  auto& ov = out.data();
  for (Index p = 0; p < n; ++p) {
    S best = tv[static_cast<std::size_t>(p)];
    for (Index ci = 1; ci < c; ++ci)
      best = std::max(best, tv[static_cast<std::size_t>(ci * n + p)]);
    ov[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

// One-hot encode labels [...] -> [C, ...]; labels must be < num_classes.
template <typename S>
Tensor<S> one_hot(const Tensor<std::uint8_t>& labels, Index num_classes) {
  if (num_classes < 1) throw ParameterError("one_hot: num_classes must be positive");
  Shape out_shape;
  out_shape.push_back(num_classes);
  for (Index a = 0; a < labels.rank(); ++a) out_shape.push_back(labels.extent(a));
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const Index n = labels.numel();
  const auto& lv = labels.data();
  auto& ov = out.data();
  for (Index p = 0; p < n; ++p) {
    const Index cls = static_cast<Index>(lv[static_cast<std::size_t>(p)]);
    if (cls >= num_classes)
      throw ContractError("one_hot: label " + std::to_string(cls) + " with " +
                          std::to_string(num_classes) + " classes");
    ov[static_cast<std::size_t>(cls * n + p)] = S{1};
  }
  return out;
}

// ---- backward engine ----------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients of leaf tensors with
// requires_grad accumulate into their persistent buffers; intermediates use
// per-call scratch, so calling backward twice doubles leaf grads exactly.
template <typename S>
void backward(const Tensor<S>& loss) {
  using Impl = detail::TensorImpl<S>;
  if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));

  // Iterative post-order topo sort over the op graph.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  if (loss.impl()->node) stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& parents = node->node->parents;
    bool descended = false;
    while (next < parents.size()) {
      Impl* p = parents[next++].impl().get();
      if (p->node && visited.insert(p).second) {
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= node->node->parents.size())) {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Impl*, std::vector<S>> scratch;
  scratch[loss.impl().get()] = {S{1}};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* n = *it;
    auto found = scratch.find(n);
    if (found == scratch.end()) continue;  // unreachable from the seed
    std::vector<S>& out_grad = found->second;  // reference survives rehashing
    const auto& parents = n->node->parents;
    std::vector<std::vector<S>*> pg(parents.size(), nullptr);
    for (std::size_t i = 0; i < parents.size(); ++i) {
      Impl* p = parents[i].impl().get();
      if (p->node) {
        auto& buf = scratch[p];
        if (buf.empty()) buf.assign(p->data.size(), S{});
        pg[i] = &buf;
      } else if (p->requires_grad) {
        if (p->grad.empty()) p->grad.assign(p->data.size(), S{});
        pg[i] = &p->grad;
      }
    }
    n->node->backprop(out_grad, pg);
    out_grad.clear();
    out_grad.shrink_to_fit();
  }

  // Degenerate graph: the loss itself is a requires_grad leaf.
  if (!loss.impl()->node && loss.impl()->requires_grad) {
    if (loss.impl()->grad.empty()) loss.impl()->grad.assign(1, S{});
    loss.impl()->grad[0] += S{1};
  }
}

// ---- operators ----------------------------------------------------------

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return divide(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S k) { return scale(a, k); }
template <typename S>
Tensor<S> operator*(S k, const Tensor<S>& a) { return scale(a, k); }
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, S k) { return add_scalar(a, k); }

}  // namespace bcmda
