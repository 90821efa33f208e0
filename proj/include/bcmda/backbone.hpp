#pragma once

// Tiny encoder-decoder segmentation backbone. Produces a feature map with
// `feature_channels` channels at the input resolution; downsampling uses
// bilinear half-size (a 2x2 average), upsampling bilinear 2x, skip
// connections by channel concatenation. Also hosts the teacher EMA update.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bcmda/errors.hpp"
#include "bcmda/rng.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

struct BackboneDesc {
  Index in_channels = 1;
  Index levels = 3;         // number of 2x downsamplings
  Index base_channels = 8;  // channels at full resolution
  Index feature_channels = 16;
};

template <typename S>
struct Backbone {
  BackboneDesc desc;
  // Ordered so SGD steps, EMA updates and checkpoints traverse identically.
  std::vector<std::pair<std::string, Tensor<S>>> params;

  Tensor<S>& param(const std::string& name) {
    for (auto& [n, t] : params)
      if (n == name) return t;
    throw ContractError("backbone: no parameter named " + name);
  }
  const Tensor<S>& param(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw ContractError("backbone: no parameter named " + name);
  }
};

namespace detail {

// Kaiming-style init for a conv weight [out,in,k,k].
template <typename S>
Tensor<S> conv_init(Index out_c, Index in_c, Index k, Rng& rng) {
  Tensor<S> w = Tensor<S>::zeros({out_c, in_c, k, k});
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
  for (auto& v : w.data()) v = static_cast<S>(rng.normal(0.0, std_dev));
  return w;
}

template <typename S>
void push_conv(Backbone<S>& net, const std::string& name, Index out_c, Index in_c, Rng& rng) {
  net.params.emplace_back(name + "_w", conv_init<S>(out_c, in_c, 3, rng));
  net.params.emplace_back(name + "_b", Tensor<S>::zeros({out_c}));
}

// Encoder/decoder channel widths per level: base * 2^level.
inline Index width_at(const BackboneDesc& d, Index level) {
  return d.base_channels << level;
}

}  // namespace detail

template <typename S>
Backbone<S> make_backbone(const BackboneDesc& desc, Rng rng) {
  if (desc.levels < 1 || desc.base_channels < 1 || desc.feature_channels < 1 ||
      desc.in_channels < 1)
    throw ParameterError("make_backbone: descriptor fields must be positive");
  Backbone<S> net;
  net.desc = desc;
  for (Index l = 0; l < desc.levels; ++l) {
    const Index in_c = l == 0 ? desc.in_channels : detail::width_at(desc, l - 1);
    const Index out_c = detail::width_at(desc, l);
    detail::push_conv(net, "enc" + std::to_string(l) + "_conv0", out_c, in_c, rng);
    detail::push_conv(net, "enc" + std::to_string(l) + "_conv1", out_c, out_c, rng);
  }
  const Index bott = detail::width_at(desc, desc.levels);
  detail::push_conv(net, "bott_conv0", bott, detail::width_at(desc, desc.levels - 1), rng);
  detail::push_conv(net, "bott_conv1", bott, bott, rng);
  for (Index l = desc.levels - 1; l >= 0; --l) {
    const Index above = detail::width_at(desc, l + 1);
    const Index skip = detail::width_at(desc, l);
    detail::push_conv(net, "dec" + std::to_string(l) + "_conv0", skip, above + skip, rng);
    detail::push_conv(net, "dec" + std::to_string(l) + "_conv1", skip, skip, rng);
  }
  detail::push_conv(net, "feat", desc.feature_channels, desc.base_channels, rng);
  return net;
}

template <typename S>
void set_trainable(Backbone<S>& net, bool on) {
  for (auto& [name, t] : net.params) t.set_requires_grad(on);
}

template <typename S>
Backbone<S> clone_backbone(const Backbone<S>& src) {
  Backbone<S> out;
  out.desc = src.desc;
  out.params.reserve(src.params.size());
  for (const auto& [name, t] : src.params) out.params.emplace_back(name, t.clone());
  return out;
}

namespace detail {

template <typename S>
Tensor<S> conv_block(const Backbone<S>& net, const std::string& name, const Tensor<S>& x,
                     bool activate = true) {
  auto y = add_channel_bias(conv2d(x, net.param(name + "_w")), net.param(name + "_b"));
  return activate ? leaky_relu(y, static_cast<S>(0.01)) : y;
}

}  // namespace detail

// Full-resolution feature map [feature_channels, H, W]. Pure function of
// (params, image).
template <typename S>
Tensor<S> backbone_forward(const Backbone<S>& net, const Tensor<S>& image) {
  if (image.rank() != 3)
    throw DimensionError("backbone_forward: image must be [C,H,W], got " +
                         shape_str(image.shape()));
  if (image.extent(0) != net.desc.in_channels)
    throw DimensionError("backbone_forward: expected " + std::to_string(net.desc.in_channels) +
                         " input channels, got " + shape_str(image.shape()));
  const Index h = image.extent(1), w = image.extent(2);
  const Index multiple = Index{1} << net.desc.levels;
  if (h % multiple != 0 || w % multiple != 0)
    throw DimensionError("backbone_forward: spatial extents " + std::to_string(h) + "x" +
                         std::to_string(w) + " must be divisible by " + std::to_string(multiple));

  std::vector<Tensor<S>> skips;
  Tensor<S> cur = image;
  for (Index l = 0; l < net.desc.levels; ++l) {
    const std::string enc = "enc" + std::to_string(l);
    cur = detail::conv_block(net, enc + "_conv0", cur);
    cur = detail::conv_block(net, enc + "_conv1", cur);
    skips.push_back(cur);
    cur = resize_bilinear(cur, cur.extent(1) / 2, cur.extent(2) / 2);
  }
  cur = detail::conv_block(net, "bott_conv0", cur);
  cur = detail::conv_block(net, "bott_conv1", cur);
  for (Index l = net.desc.levels - 1; l >= 0; --l) {
    const std::string dec = "dec" + std::to_string(l);
    cur = resize_bilinear(cur, cur.extent(1) * 2, cur.extent(2) * 2);
    cur = concat_channels(cur, skips[static_cast<std::size_t>(l)]);
    cur = detail::conv_block(net, dec + "_conv0", cur);
    cur = detail::conv_block(net, dec + "_conv1", cur);
  }
  return detail::conv_block(net, "feat", cur, /*activate=*/false);
}

// teacher <- decay * teacher + (1 - decay) * student, elementwise. Computed
// as teacher + (1-decay)*(student-teacher) so a converged pair (student ==
// teacher) is a bit-exact fixed point; decay == 0 copies exactly.
template <typename S>
void ema_update(Backbone<S>& teacher, const Backbone<S>& student, double decay) {
  if (!(decay >= 0.0 && decay < 1.0))
    throw ParameterError("ema_update: decay must satisfy 0 <= decay < 1");
  if (teacher.params.size() != student.params.size())
    throw ContractError("ema_update: parameter count mismatch (" +
                        std::to_string(teacher.params.size()) + " vs " +
                        std::to_string(student.params.size()) + ")");
  for (std::size_t i = 0; i < teacher.params.size(); ++i) {
    auto& [tn, tt] = teacher.params[i];
    const auto& [sn, st] = student.params[i];
    if (tn != sn) throw ContractError("ema_update: layer name mismatch at " + tn + " vs " + sn);
    if (tt.shape() != st.shape())
      throw ContractError("ema_update: shape mismatch for layer " + tn + ": " +
                          shape_str(tt.shape()) + " vs " + shape_str(st.shape()));
    auto& tv = tt.data();
    const auto& sv = st.data();
    if (decay == 0.0) {
      tv = sv;
      continue;
    }
    const S one_minus = static_cast<S>(1.0 - decay);
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] += one_minus * (sv[j] - tv[j]);
  }
}

}  // namespace bcmda
