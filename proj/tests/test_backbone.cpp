#include <doctest.h>

#include <cmath>

#include "bcmda/backbone.hpp"
#include "bcmda/mixing.hpp"
#include "support/gradcheck.hpp"

using namespace bcmda;

namespace {

template <typename S>
Backbone<S> small_net(unsigned seed, Index levels = 2, Index base = 4, Index feat = 6) {
  BackboneDesc desc;
  desc.in_channels = 1;
  desc.levels = levels;
  desc.base_channels = base;
  desc.feature_channels = feat;
  return make_backbone<S>(desc, Rng(seed));
}

}  // namespace

TEST_CASE("forward shape contract") {
  BackboneDesc desc;  // defaults: 3 levels, base 8, 16 feature channels
  auto net = make_backbone<float>(desc, Rng(7));
  auto img = TensorF::zeros({1, 64, 64});
  auto ft = backbone_forward(net, img);
  CHECK(ft.shape() == Shape{16, 64, 64});
}

TEST_CASE("indivisible extents are rejected with the required multiple") {
  auto net = small_net<float>(1, /*levels=*/3);
  auto img = TensorF::zeros({1, 60, 64});
  try {
    backbone_forward(net, img);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("8") != std::string::npos);
  }
  CHECK_THROWS_AS(backbone_forward(net, TensorF::zeros({2, 64, 64})), DimensionError);
}

TEST_CASE("zero parameters map any image to zero features") {
  auto net = small_net<float>(2);
  for (auto& [name, t] : net.params)
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  auto img = TensorF::full({1, 16, 16}, 0.37f);
  auto ft = backbone_forward(net, img);
  for (float v : ft.data()) CHECK(v == 0.0f);
}

TEST_CASE("forward is pure") {
  auto net = small_net<float>(3);
  auto img = TensorF::zeros({1, 16, 16});
  for (Index i = 0; i < img.numel(); ++i)
    img.data()[static_cast<std::size_t>(i)] = 0.01f * static_cast<float>(i % 17) - 0.08f;
  auto a = backbone_forward(net, img);
  auto b = backbone_forward(net, img);
  CHECK(a.data() == b.data());
}

TEST_CASE("horizontal flip equivariance for mirror-symmetric kernels") {
  auto net = small_net<double>(4);
  // symmetrize every conv kernel about its vertical axis
  for (auto& [name, t] : net.params) {
    if (t.rank() != 4) continue;
    const Index o = t.extent(0), c = t.extent(1), k = t.extent(2);
    for (Index oi = 0; oi < o; ++oi)
      for (Index ci = 0; ci < c; ++ci)
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx) {
            const double a = t.value({oi, ci, ky, kx});
            const double b = t.value({oi, ci, ky, k - 1 - kx});
            const double avg = 0.5 * (a + b);
            t.at({oi, ci, ky, kx}) = avg;
            t.at({oi, ci, ky, k - 1 - kx}) = avg;
          }
  }
  Tensor<double> img = Tensor<double>::zeros({1, 16, 16});
  testsupport::fill_pattern(img, 11);
  auto lhs = backbone_forward(net, flip_horizontal(img));
  auto rhs = flip_horizontal(backbone_forward(net, img));
  REQUIRE(lhs.shape() == rhs.shape());
  for (std::size_t i = 0; i < lhs.data().size(); ++i)
    CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-10));
}

TEST_CASE("ema update") {
  auto student = small_net<double>(5);
  auto teacher = clone_backbone(student);

  SUBCASE("teacher equal to student is a bit-exact fixed point") {
    ema_update(teacher, student, 0.99);
    for (std::size_t i = 0; i < teacher.params.size(); ++i)
      CHECK(teacher.params[i].second.data() == student.params[i].second.data());
  }
  SUBCASE("decay zero copies the student exactly") {
    auto other = small_net<double>(6);
    ema_update(other, student, 0.0);
    for (std::size_t i = 0; i < other.params.size(); ++i)
      CHECK(other.params[i].second.data() == student.params[i].second.data());
  }
  SUBCASE("distance to a constant student shrinks by the decay factor") {
    auto moving = small_net<double>(7);
    const double decay = 0.9;
    auto gap = [&] {
      double g = 0.0;
      for (std::size_t i = 0; i < moving.params.size(); ++i) {
        const auto& mv = moving.params[i].second.data();
        const auto& sv = student.params[i].second.data();
        for (std::size_t j = 0; j < mv.size(); ++j) g = std::max(g, std::fabs(mv[j] - sv[j]));
      }
      return g;
    };
    double prev = gap();
    for (int step = 0; step < 10; ++step) {
      ema_update(moving, student, decay);
      const double cur = gap();
      CHECK(cur == doctest::Approx(prev * decay).epsilon(1e-9));
      prev = cur;
    }
  }
  SUBCASE("structure mismatch names the offending layer") {
    auto other = clone_backbone(student);
    other.params[2].second = Tensor<double>::zeros({1, 1, 3, 3});
    try {
      ema_update(other, student, 0.5);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find(other.params[2].first) != std::string::npos);
    }
    CHECK_THROWS_AS(ema_update(teacher, student, 1.0), ParameterError);
    CHECK_THROWS_AS(ema_update(teacher, student, -0.1), ParameterError);
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  auto a = small_net<float>(42);
  auto b = small_net<float>(42);
  auto c = small_net<float>(43);
  REQUIRE(a.params.size() == b.params.size());
  bool all_equal = true, any_diff_from_c = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    all_equal = all_equal && a.params[i].second.data() == b.params[i].second.data();
    any_diff_from_c = any_diff_from_c || a.params[i].second.data() != c.params[i].second.data();
  }
  CHECK(all_equal);
  CHECK(any_diff_from_c);
}

TEST_CASE("backbone gradients flow to every parameter") {
  auto net = small_net<double>(8, /*levels=*/1, /*base=*/2, /*feat=*/3);
  set_trainable(net, true);
  Tensor<double> img = Tensor<double>::zeros({1, 4, 4});
  testsupport::fill_pattern(img, 12);
  auto loss = sum(mul(backbone_forward(net, img), backbone_forward(net, img)));
  backward(loss);
  for (auto& [name, t] : net.params) {
    INFO(name);
    CHECK(t.has_grad());
  }
  // spot-check two tensors against finite differences
  auto f = [&] {
    auto ft = backbone_forward(net, img);
    return sum(mul(ft, ft));
  };
  CHECK(testsupport::grad_rel_err(net.param("enc0_conv0_w"), f) < 1e-6);
  CHECK(testsupport::grad_rel_err(net.param("feat_b"), f) < 1e-6);
}
