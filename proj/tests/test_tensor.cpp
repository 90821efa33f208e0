#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bcmda/tensor.hpp"
#include "bcmda/tensor_io.hpp"
#include "support/gradcheck.hpp"

using namespace bcmda;
using testsupport::fill_pattern;
using testsupport::grad_rel_err;

TEST_CASE("construction and indexing") {
  auto t = TensorF::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.value({1, 2}) == 6.0f);
  t.at({0, 1}) = 9.0f;
  CHECK(t.value({0, 1}) == 9.0f);

  CHECK_THROWS_AS(TensorF::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(TensorF::zeros({0, 3}), DimensionError);
  CHECK_THROWS_AS(t.value({2, 0}), DimensionError);
  CHECK_THROWS_AS(t.value({0}), DimensionError);
}

TEST_CASE("handles share storage, clone does not") {
  auto a = TensorF::full({2, 2}, 1.0f);
  TensorF alias = a;
  alias.at({0, 0}) = 5.0f;
  CHECK(a.value({0, 0}) == 5.0f);
  TensorF copy = a.clone();
  copy.at({0, 0}) = 7.0f;
  CHECK(a.value({0, 0}) == 5.0f);
}

TEST_CASE("elementwise arithmetic") {
  auto a = TensorF::from_data({2, 2}, {1, 2, 3, 4});
  auto b = TensorF::from_data({2, 2}, {10, 20, 30, 40});
  auto s = add(a, b);
  CHECK(s.data() == std::vector<float>{11, 22, 33, 44});
  CHECK(sub(b, a).data() == std::vector<float>{9, 18, 27, 36});
  CHECK(mul(a, a).data() == std::vector<float>{1, 4, 9, 16});
  CHECK(divide(b, a).data() == std::vector<float>{10, 10, 10, 10});
  CHECK(scale(a, 2.0f).data() == std::vector<float>{2, 4, 6, 8});
  CHECK(add_scalar(a, 1.0f).data() == std::vector<float>{2, 3, 4, 5});

  auto c = TensorF::zeros({3});
  CHECK_THROWS_AS(add(a, c), DimensionError);
}

TEST_CASE("matmul forward matches hand result") {
  auto a = TensorF::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = TensorF::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.value({0, 0}) == doctest::Approx(58));
  CHECK(c.value({0, 1}) == doctest::Approx(64));
  CHECK(c.value({1, 0}) == doctest::Approx(139));
  CHECK(c.value({1, 1}) == doctest::Approx(154));
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("softmax lanes are stochastic and match hand values") {
  auto t = TensorF::from_data({3}, {1, 2, 3});
  auto y = softmax(t, 0);
  CHECK(y.value({0}) == doctest::Approx(0.09003057).epsilon(1e-5));
  CHECK(y.value({1}) == doctest::Approx(0.24472847).epsilon(1e-5));
  CHECK(y.value({2}) == doctest::Approx(0.66524096).epsilon(1e-5));

  // axis=0 over a matrix: every column sums to 1
  auto m = TensorF::from_data({2, 3}, {5, -1, 0.5f, -3, 2, 0.25f});
  auto ym = softmax(m, 0);
  for (Index j = 0; j < 3; ++j)
    CHECK(ym.value({0, j}) + ym.value({1, j}) == doctest::Approx(1.0).epsilon(1e-6));

  // large logits do not overflow
  auto big = TensorF::from_data({2}, {1000.0f, 1001.0f});
  auto yb = softmax(big, 0);
  CHECK(std::isfinite(yb.value({0})));
  CHECK(yb.value({0}) + yb.value({1}) == doctest::Approx(1.0));

  CHECK_THROWS_AS(softmax(t, 1), DimensionError);
}

TEST_CASE("conv2d matches a direct convolution loop") {
  // independent oracle: naive sliding-window convolution
  Tensor<double> x = Tensor<double>::zeros({2, 5, 6});
  Tensor<double> w = Tensor<double>::zeros({3, 2, 3, 3});
  fill_pattern(x, 1);
  fill_pattern(w, 2);
  auto y = conv2d(x, w);
  CHECK(y.shape() == Shape{3, 5, 6});
  for (Index co = 0; co < 3; ++co)
    for (Index oy = 0; oy < 5; ++oy)
      for (Index ox = 0; ox < 6; ++ox) {
        double acc = 0.0;
        for (Index ci = 0; ci < 2; ++ci)
          for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
              const Index iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              acc += x.value({ci, iy, ix}) * w.value({co, ci, ky, kx});
            }
        CHECK(y.value({co, oy, ox}) == doctest::Approx(acc).epsilon(1e-12));
      }

  auto even = Tensor<double>::zeros({3, 2, 2, 2});
  CHECK_THROWS_AS(conv2d(x, even), ParameterError);
  auto badc = Tensor<double>::zeros({3, 4, 3, 3});
  CHECK_THROWS_AS(conv2d(x, badc), DimensionError);
}

TEST_CASE("resize_bilinear halves via 2x2 averages and preserves constants") {
  auto t = TensorF::from_data({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto d = resize_bilinear(t, 1, 2);
  CHECK(d.value({0, 0, 0}) == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
  CHECK(d.value({0, 0, 1}) == doctest::Approx((3 + 4 + 7 + 8) / 4.0));

  auto c = TensorF::full({2, 3, 3}, 0.25f);
  auto up = resize_bilinear(c, 7, 5);
  for (float v : up.data()) CHECK(v == doctest::Approx(0.25f));

  CHECK_THROWS_AS(resize_bilinear(t, 0, 4), DimensionError);
}

TEST_CASE("gradients match finite differences") {
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({2, 3});
  fill_pattern(a, 3);
  fill_pattern(b, 4);
  a.set_requires_grad(true);
  b.set_requires_grad(true);

  SUBCASE("elementwise chain") {
    auto f = [&] {
      auto t = mul(add(a, b), sub(a, scale(b, 0.5)));
      return sum(mul(t, t));
    };
    CHECK(grad_rel_err(a, f) < 1e-7);
    CHECK(grad_rel_err(b, f) < 1e-7);
  }
  SUBCASE("divide") {
    auto f = [&] { return sum(divide(a, add_scalar(mul(b, b), 1.0))); };
    CHECK(grad_rel_err(a, f) < 1e-7);
    CHECK(grad_rel_err(b, f) < 1e-7);
  }
  SUBCASE("leaky_relu") {
    auto f = [&] { return sum(leaky_relu(mul(a, b), 0.01)); };
    CHECK(grad_rel_err(a, f) < 1e-6);
  }
  SUBCASE("log and clamp") {
    auto f = [&] {
      auto p = clamp(add_scalar(mul(a, a), 0.5), 1e-7, 10.0);
      return sum(log_elem(p));
    };
    CHECK(grad_rel_err(a, f) < 1e-6);
  }
  SUBCASE("softmax") {
    auto f = [&] {
      auto y = softmax(a, 0);
      return sum(mul(y, b));
    };
    CHECK(grad_rel_err(a, f) < 1e-6);
  }
  SUBCASE("mean and reshape") {
    auto f = [&] { return mean(mul(reshape(a, {6}), reshape(b, {6}))); };
    CHECK(grad_rel_err(a, f) < 1e-7);
  }
}

TEST_CASE("matmul and transpose gradients") {
  Tensor<double> a = Tensor<double>::zeros({3, 4});
  Tensor<double> b = Tensor<double>::zeros({4, 2});
  fill_pattern(a, 5);
  fill_pattern(b, 6);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto f = [&] {
    auto c = matmul(a, b);
    return sum(mul(c, transpose2d(transpose2d(c))));
  };
  CHECK(grad_rel_err(a, f) < 1e-7);
  CHECK(grad_rel_err(b, f) < 1e-7);
}

TEST_CASE("conv2d, bias and resize gradients") {
  Tensor<double> x = Tensor<double>::zeros({2, 4, 4});
  Tensor<double> w = Tensor<double>::zeros({3, 2, 3, 3});
  Tensor<double> bias = Tensor<double>::zeros({3});
  fill_pattern(x, 7);
  fill_pattern(w, 8);
  fill_pattern(bias, 9);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  bias.set_requires_grad(true);
  auto f = [&] {
    auto y = add_channel_bias(conv2d(x, w), bias);
    auto up = resize_bilinear(y, 8, 8);
    return sum(mul(up, up));
  };
  CHECK(grad_rel_err(x, f) < 1e-6);
  CHECK(grad_rel_err(w, f) < 1e-6);
  CHECK(grad_rel_err(bias, f) < 1e-6);
}

TEST_CASE("concat_channels gradient splits correctly") {
  Tensor<double> a = Tensor<double>::zeros({1, 2, 2});
  Tensor<double> b = Tensor<double>::zeros({2, 2, 2});
  fill_pattern(a, 10);
  fill_pattern(b, 11);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto f = [&] {
    auto c = concat_channels(a, b);
    return sum(mul(c, c));
  };
  CHECK(grad_rel_err(a, f) < 1e-7);
  CHECK(grad_rel_err(b, f) < 1e-7);
}

TEST_CASE("cosine_logits values and gradients") {
  auto ft = Tensor<double>::from_data({2, 1, 1}, {3, 4});
  auto pr = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto sim = cosine_logits(ft, pr);
  CHECK(sim.shape() == Shape{2, 1, 1});
  CHECK(sim.value({0, 0, 0}) == doctest::Approx(0.6));
  CHECK(sim.value({1, 0, 0}) == doctest::Approx(0.8));

  Tensor<double> f2 = Tensor<double>::zeros({3, 2, 2});
  Tensor<double> p2 = Tensor<double>::zeros({4, 3});
  fill_pattern(f2, 12);
  fill_pattern(p2, 13);
  f2.set_requires_grad(true);
  p2.set_requires_grad(true);
  Tensor<double> coeff = Tensor<double>::zeros({4, 2, 2});
  fill_pattern(coeff, 14);
  auto f = [&] { return sum(mul(cosine_logits(f2, p2), coeff)); };
  CHECK(grad_rel_err(f2, f) < 1e-6);
  CHECK(grad_rel_err(p2, f) < 1e-6);

  // zero-norm feature: similarity 0, gradient finite (exactly zero)
  auto fz = Tensor<double>::zeros({2, 1, 1});
  fz.set_requires_grad(true);
  auto sz = cosine_logits(fz, pr);
  CHECK(sz.value({0, 0, 0}) == 0.0);
  backward(sum(sz));
  for (double g : fz.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward semantics") {
  Tensor<double> a = Tensor<double>::from_data({2}, {2, 3});
  a.set_requires_grad(true);

  SUBCASE("leaf grads accumulate across backward calls") {
    auto loss = sum(mul(a, a));
    backward(loss);
    auto g1 = a.grad();
    CHECK(g1[0] == doctest::Approx(4));
    CHECK(g1[1] == doctest::Approx(6));
    backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(8));
    CHECK(a.grad()[1] == doctest::Approx(12));
    a.zero_grad();
    backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(4));
  }
  SUBCASE("non-scalar loss is rejected") {
    auto y = mul(a, a);
    CHECK_THROWS_AS(backward(y), ContractError);
  }
  SUBCASE("diamond graph accumulates both paths") {
    auto b = mul(a, a);            // a^2
    auto loss = sum(add(b, b));    // 2 a^2 -> d/da = 4a
    backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(8));
    CHECK(a.grad()[1] == doctest::Approx(12));
  }
  SUBCASE("no_grad suppresses graph construction") {
    NoGradGuard ng;
    auto y = mul(a, a);
    CHECK_FALSE(y.tracked());
  }
  SUBCASE("set_requires_grad on non-leaf throws") {
    auto y = mul(a, a);
    CHECK_THROWS_AS(y.set_requires_grad(true), ContractError);
  }
}

TEST_CASE("argmax, max and one_hot") {
  auto p = TensorF::from_data({3, 2, 1}, {0.2f, 0.5f, 0.5f, 0.3f, 0.3f, 0.2f});
  auto am = argmax0(p);
  CHECK(am.shape() == Shape{2, 1});
  CHECK(am.value({0, 0}) == 1);  // per-class values 0.2 / 0.5 / 0.3
  CHECK(am.value({1, 0}) == 0);  // per-class values 0.5 / 0.3 / 0.2
  auto mx = max0(p);
  CHECK(mx.value({0, 0}) == doctest::Approx(0.5f));

  auto labels = TensorU8::from_data({2, 2}, {0, 1, 2, 1});
  auto oh = one_hot<float>(labels, 3);
  CHECK(oh.shape() == Shape{3, 2, 2});
  CHECK(oh.value({0, 0, 0}) == 1.0f);
  CHECK(oh.value({1, 0, 1}) == 1.0f);
  CHECK(oh.value({2, 1, 0}) == 1.0f);
  CHECK(oh.value({1, 1, 1}) == 1.0f);
  float total = 0;
  for (float v : oh.data()) total += v;
  CHECK(total == 4.0f);

  auto bad = TensorU8::from_data({1}, {7});
  CHECK_THROWS_AS(one_hot<float>(bad, 3), ContractError);
}

TEST_CASE("argmax ties resolve to the lowest class id") {
  auto p = TensorF::from_data({3, 1}, {0.4f, 0.4f, 0.4f});
  CHECK(argmax0(p).value({0}) == 0);
}

TEST_CASE("tensor file round trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "bcmda_tensor_io_test";
  fs::create_directories(dir);
  const auto path = (dir / "t.bin").string();

  auto t = TensorF::from_data({2, 3, 4}, std::vector<float>(24, 0.0f));
  for (Index i = 0; i < 24; ++i) t.data()[static_cast<std::size_t>(i)] = 0.125f * static_cast<float>(i) - 1.0f;
  save_tensor(path, t);
  auto back = load_tensor<float>(path);
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());
  CHECK(peek_dtype(path) == 1);

  auto u = TensorU8::from_data({3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});
  save_tensor(path, u);
  CHECK(load_tensor<std::uint8_t>(path).data() == u.data());
  CHECK(peek_dtype(path) == 2);

  // wrong dtype requested
  CHECK_THROWS_AS(load_tensor<float>(path), FormatError);

  // corrupt magic
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE garbage";
  }
  CHECK_THROWS_AS(load_tensor<float>(path), FormatError);
  CHECK_THROWS_AS(load_tensor<float>((dir / "missing.bin").string()), IoError);
  fs::remove_all(dir);
}
