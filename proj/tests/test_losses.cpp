#include <doctest.h>

#include <cmath>

#include "bcmda/losses.hpp"
#include "bcmda/protohead.hpp"
#include "support/gradcheck.hpp"

using namespace bcmda;

namespace {

// A valid random C-class probability map built by softmaxing noise.
template <typename S>
Tensor<S> random_prob(Index c, Index h, Index w, Rng& rng) {
  Tensor<S> logits = Tensor<S>::zeros({c, h, w});
  for (auto& v : logits.data()) v = static_cast<S>(rng.uniform(-2.0, 2.0));
  NoGradGuard ng;
  return softmax(logits, 0);
}

template <typename S>
Tensor<S> random_onehot(Index c, Index h, Index w, Rng& rng) {
  Tensor<std::uint8_t> labels = Tensor<std::uint8_t>::zeros({h, w});
  for (auto& v : labels.data()) v = static_cast<std::uint8_t>(rng.uniform_int(static_cast<std::uint64_t>(c)));
  return one_hot<S>(labels, c);
}

}  // namespace

TEST_CASE("pseudo_label basics") {
  auto p = TensorF::from_data({3, 1, 1}, {0.2f, 0.5f, 0.3f});
  auto y = pseudo_label(p);
  CHECK(y.value({1, 0, 0}) == 1.0f);
  CHECK(y.value({0, 0, 0}) == 0.0f);

  // idempotent on one-hot input
  CHECK(pseudo_label(y).data() == y.data());

  // uniform pixel resolves to class 0
  auto u = TensorF::full({4, 1, 1}, 0.25f);
  CHECK(pseudo_label(u).value({0, 0, 0}) == 1.0f);
}

TEST_CASE("avg_probability") {
  Rng rng(1);
  auto a = random_prob<float>(2, 3, 3, rng);
  auto b = random_prob<float>(2, 3, 3, rng);

  auto m = avg_probability(a, b, false);
  for (std::size_t i = 0; i < m.data().size(); ++i)
    CHECK(m.data()[i] == doctest::Approx(0.5f * (a.data()[i] + b.data()[i])));

  auto hot = TensorF::from_data({2, 1, 1}, {1, 0});
  auto cold = TensorF::from_data({2, 1, 1}, {0, 1});
  auto half = avg_probability(hot, cold, false);
  CHECK(half.value({0, 0, 0}) == 0.5f);
  CHECK(half.value({1, 0, 0}) == 0.5f);

  CHECK(avg_probability(a, b, true).data() == b.data());
  CHECK(avg_probability(a, a, false).data() == a.data());

  CHECK_THROWS_AS(avg_probability(a, random_prob<float>(2, 2, 3, rng), false), DimensionError);
}

TEST_CASE("filter_mask thresholds the per-pixel maximum") {
  Rng rng(2);
  auto onehot = random_onehot<float>(3, 4, 4, rng);
  auto all = filter_mask(onehot, 0.95);
  for (float v : all.data()) CHECK(v == 1.0f);

  auto uniform = TensorF::full({2, 4, 4}, 0.5f);
  auto none = filter_mask(uniform, 0.95);
  for (float v : none.data()) CHECK(v == 0.0f);

  auto p = random_prob<float>(3, 5, 5, rng);
  auto m = filter_mask(p, 0.5);
  auto mx = max0(p);
  for (std::size_t i = 0; i < m.data().size(); ++i)
    CHECK(m.data()[i] == (mx.data()[i] > 0.5f ? 1.0f : 0.0f));

  CHECK_THROWS_AS(filter_mask(p, 0.0), ParameterError);
}

TEST_CASE("masked cross-entropy") {
  SUBCASE("perfect prediction with a full mask is (almost) zero") {
    Rng rng(3);
    auto y = random_onehot<double>(2, 4, 4, rng);
    auto m = Tensor<double>::full({4, 4}, 1.0);
    const double v = masked_ce(y, y, m).item();
    CHECK(v >= 0.0);
    CHECK(v <= 1e-6);
  }
  SUBCASE("all-zero mask gives exactly zero") {
    Rng rng(4);
    auto y = random_onehot<double>(3, 4, 4, rng);
    auto p = random_prob<double>(3, 4, 4, rng);
    auto m = Tensor<double>::zeros({4, 4});
    CHECK(masked_ce(y, p, m).item() == 0.0);
  }
  SUBCASE("hand case: single pixel at p=0.5") {
    auto y = Tensor<double>::from_data({2, 1, 1}, {0, 1});
    auto p = Tensor<double>::from_data({2, 1, 1}, {0.5, 0.5});
    auto m = Tensor<double>::full({1, 1}, 1.0);
    CHECK(masked_ce(y, p, m).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SUBCASE("normalized by H*W, not by mask population") {
    auto y = Tensor<double>::from_data({2, 1, 2}, {0, 0, 1, 1});
    auto p = Tensor<double>::from_data({2, 1, 2}, {0.5, 0.5, 0.5, 0.5});
    auto full = Tensor<double>::from_data({1, 2}, {1, 1});
    auto half = Tensor<double>::from_data({1, 2}, {1, 0});
    CHECK(masked_ce(y, p, full).item() == doctest::Approx(std::log(2.0)));
    CHECK(masked_ce(y, p, half).item() == doctest::Approx(0.5 * std::log(2.0)));
  }
  SUBCASE("removing mask pixels never increases the loss") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      auto y = random_onehot<double>(2, 6, 6, rng);
      auto p = random_prob<double>(2, 6, 6, rng);
      auto m = Tensor<double>::full({6, 6}, 1.0);
      double prev = masked_ce(y, p, m).item();
      // drop pixels one at a time
      for (int k = 0; k < 10; ++k) {
        m.data()[rng.uniform_int(36)] = 0.0;
        const double cur = masked_ce(y, p, m).item();
        CHECK(cur <= prev + 1e-12);
        prev = cur;
      }
    }
  }
}

TEST_CASE("masked dice") {
  SUBCASE("perfect one-hot prediction") {
    Rng rng(6);
    auto y = random_onehot<double>(2, 4, 4, rng);
    auto m = Tensor<double>::full({4, 4}, 1.0);
    const double v = masked_dice(y, y, m).item();
    CHECK(std::fabs(v) <= 1e-5);
  }
  SUBCASE("all-zero mask gives exactly zero") {
    Rng rng(7);
    auto y = random_onehot<double>(2, 4, 4, rng);
    auto p = random_prob<double>(2, 4, 4, rng);
    auto m = Tensor<double>::zeros({4, 4});
    CHECK(masked_dice(y, p, m).item() == 0.0);
  }
  SUBCASE("hand case: single pixel at p=0.5") {
    auto y = Tensor<double>::from_data({2, 1, 1}, {0, 1});
    auto p = Tensor<double>::from_data({2, 1, 1}, {0.5, 0.5});
    auto m = Tensor<double>::full({1, 1}, 1.0);
    const double eps = 1e-5;
    const double expect = 1.0 - (2.0 * 0.5 + eps) / (0.25 + 0.25 + 1.0 + eps);
    CHECK(masked_dice(y, p, m).item() == doctest::Approx(expect).epsilon(1e-9));
    CHECK(expect == doctest::Approx(1.0 / 3.0).epsilon(1e-4));
  }
  SUBCASE("non-negative on random inputs") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      auto y = random_onehot<double>(3, 5, 5, rng);
      auto p = random_prob<double>(3, 5, 5, rng);
      auto m = Tensor<double>::zeros({5, 5});
      for (auto& v : m.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      CHECK(masked_dice(y, p, m).item() >= 0.0);
    }
  }
}

TEST_CASE("composite loss") {
  Rng rng(9);
  const Index c = 2, h = 4, w = 4;

  auto make_pack = [&](bool full_mask) {
    SupervisionPack<double> pack;
    pack.target = random_onehot<double>(c, h, w, rng);
    pack.confidence = Tensor<double>::full({c, h, w}, 1.0);
    pack.filter = Tensor<double>::full({h, w}, full_mask ? 1.0 : 0.0);
    return pack;
  };

  SUBCASE("perfect predictions give a near-zero total") {
    std::vector<SupervisionPack<double>> packs;
    std::vector<std::pair<Tensor<double>, Tensor<double>>> preds;
    for (int i = 0; i < 4; ++i) {
      auto pack = make_pack(true);
      preds.emplace_back(pack.target, pack.target);
      packs.push_back(std::move(pack));
    }
    CHECK(composite_loss(packs, preds).item() <= 1e-4);
  }
  SUBCASE("all-zero filters zero the objective") {
    std::vector<SupervisionPack<double>> packs;
    std::vector<std::pair<Tensor<double>, Tensor<double>>> preds;
    for (int i = 0; i < 4; ++i) {
      auto pack = make_pack(false);
      preds.emplace_back(random_prob<double>(c, h, w, rng), random_prob<double>(c, h, w, rng));
      packs.push_back(std::move(pack));
    }
    CHECK(composite_loss(packs, preds).item() == 0.0);
  }
  SUBCASE("equal branch losses sum to twice the branch value") {
    auto pack = make_pack(true);
    auto pl = random_prob<double>(c, h, w, rng);
    auto pc = random_prob<double>(c, h, w, rng);
    const double single = branch_loss(pack, pl, pc).item();
    std::vector<SupervisionPack<double>> packs(4, pack);
    std::vector<std::pair<Tensor<double>, Tensor<double>>> preds(4, {pl, pc});
    CHECK(composite_loss(packs, preds).item() == doctest::Approx(2.0 * single).epsilon(1e-12));
  }
  SUBCASE("branches within a stage commute") {
    std::vector<SupervisionPack<double>> packs;
    std::vector<std::pair<Tensor<double>, Tensor<double>>> preds;
    for (int i = 0; i < 4; ++i) {
      auto pack = make_pack(true);
      preds.emplace_back(random_prob<double>(c, h, w, rng), random_prob<double>(c, h, w, rng));
      packs.push_back(std::move(pack));
    }
    const double base = composite_loss(packs, preds).item();
    std::swap(packs[0], packs[1]);
    std::swap(preds[0], preds[1]);
    CHECK(composite_loss(packs, preds).item() == base);
  }
  SUBCASE("branch count is validated") {
    std::vector<SupervisionPack<double>> packs(3, make_pack(true));
    std::vector<std::pair<Tensor<double>, Tensor<double>>> preds(
        4, {random_prob<double>(c, h, w, rng), random_prob<double>(c, h, w, rng)});
    CHECK_THROWS_AS(composite_loss(packs, preds), ContractError);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(10);
  const Index c = 2, h = 3, w = 3;
  auto y = random_onehot<double>(c, h, w, rng);
  auto m = Tensor<double>::zeros({h, w});
  for (auto& v : m.data()) v = rng.uniform() < 0.7 ? 1.0 : 0.0;
  Tensor<double> logits = Tensor<double>::zeros({c, h, w});
  testsupport::fill_pattern(logits, 77);
  logits.set_requires_grad(true);

  auto f_ce = [&] { return masked_ce(y, softmax(logits, 0), m); };
  auto f_dice = [&] { return masked_dice(y, softmax(logits, 0), m); };
  auto f_seg = [&] { return seg_loss(y, softmax(logits, 0), m); };
  CHECK(testsupport::grad_rel_err(logits, f_ce) < 1e-6);
  CHECK(testsupport::grad_rel_err(logits, f_dice) < 1e-6);
  CHECK(testsupport::grad_rel_err(logits, f_seg) < 1e-6);
}
