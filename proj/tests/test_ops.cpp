#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dectseg/ops.hpp"
#include "oracles.hpp"

using namespace dectseg;

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, bool rg = true) {
  const Index n = shape_numel(shape);
  return T(std::move(shape), oracle::random_values(n, rng), rg);
}

// sum(op(x) * r) with a fixed random r keeps every output coordinate in play.
T probe(const T& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const T r(y.shape(), oracle::random_values(y.numel(), rng), false);
  return sum(mul(y, r));
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("identity kernel reproduces the input") {
  std::mt19937_64 rng(1);
  const T x = random_tensor({1, 1, 3, 4, 5}, rng, false);
  const T w = T::full({1, 1, 1, 1, 1}, 1.0);
  const T b = T::full({1}, 0.0);
  const T y = conv3d(x, w, b);
  CHECK(y.shape() == x.shape());
  CHECK(max_abs_diff(y.data(), std::vector<double>(x.data().begin(), x.data().end())) == 0.0);
}

TEST_CASE("all-ones 2^3 kernel on all-ones input sums to 8") {
  const T x = T::full({1, 1, 2, 2, 2}, 1.0);
  const T w = T::full({1, 1, 2, 2, 2}, 1.0);
  const T y = conv3d(x, w, T{});
  CHECK(y.shape() == Shape{1, 1, 1, 1, 1});
  CHECK(y.item() == 8.0);
}

TEST_CASE("conv3d matches the direct loop oracle") {
  std::mt19937_64 rng(2);
  const T x = random_tensor({1, 2, 4, 4, 4}, rng, false);
  const T w = random_tensor({3, 2, 3, 3, 3}, rng, false);
  const T b = random_tensor({3}, rng, false);
  const T y = conv3d(x, w, b, {1, 1});
  Shape expect_shape;
  const auto ref = oracle::naive_conv3d({x.data().begin(), x.data().end()}, x.shape(),
                                        {w.data().begin(), w.data().end()}, w.shape(),
                                        {b.data().begin(), b.data().end()}, 1, 1, expect_shape);
  CHECK(y.shape() == expect_shape);
  CHECK(max_abs_diff(y.data(), ref) < 1e-12);
}

TEST_CASE("convolutions match the oracles across chunk boundaries") {
  std::mt19937_64 rng(20);
  for (const Shape& xs : {Shape{2, 2, 8, 8, 8}, Shape{1, 3, 5, 20, 70}, Shape{1, 1, 3, 2, 300}}) {
    const T x = random_tensor(xs, rng, false);
    const T w = random_tensor({2, xs[1], 3, 3, 3}, rng, false);
    const T b = random_tensor({2}, rng, false);
    for (Index stride : {1, 2}) {
      const T y = conv3d(x, w, b, {stride, 1});
      Shape ref_shape;
      const auto ref = oracle::naive_conv3d({x.data().begin(), x.data().end()}, xs,
                                            {w.data().begin(), w.data().end()}, w.shape(),
                                            {b.data().begin(), b.data().end()}, stride, 1, ref_shape);
      REQUIRE(y.shape() == ref_shape);
      CHECK(max_abs_diff(y.data(), ref) < 1e-11);
    }
    const T wt = random_tensor({xs[1], 2, 2, 2, 2}, rng, false);
    const T yt = conv_transpose3d(x, wt, b);
    Shape ref_shape;
    const auto ref = oracle::naive_conv_transpose3d({x.data().begin(), x.data().end()}, xs,
                                                    {wt.data().begin(), wt.data().end()}, wt.shape(),
                                                    {b.data().begin(), b.data().end()}, 2, 0, ref_shape);
    REQUIRE(yt.shape() == ref_shape);
    CHECK(max_abs_diff(yt.data(), ref) < 1e-11);
  }
}

TEST_CASE("conv3d rejects mismatched channels and empty outputs") {
  const T x = T::full({1, 2, 4, 4, 4}, 0.0);
  CHECK_THROWS_AS(conv3d(x, T::full({1, 3, 3, 3, 3}, 0.0), T{}), ShapeError);
  CHECK_THROWS_AS(conv3d(x, T::full({1, 2, 5, 5, 5}, 0.0), T{}), ShapeError);
}

TEST_CASE("transposed conv of one voxel through an all-ones kernel") {
  const T x = T::full({1, 1, 1, 1, 1}, 3.5);
  const T w = T::full({1, 1, 2, 2, 2}, 1.0);
  const T y = conv_transpose3d(x, w, T{});
  CHECK(y.shape() == Shape{1, 1, 2, 2, 2});
  for (double v : y.data()) CHECK(v == 3.5);
}

TEST_CASE("transposed conv is the adjoint of strided conv") {
  std::mt19937_64 rng(3);
  const T w = random_tensor({3, 2, 2, 2, 2}, rng, false);  // conv: 2 -> 3 channels
  const T x = random_tensor({2, 2, 6, 4, 8}, rng, false);
  const T cx = conv3d(x, w, T{}, {2, 0});
  const T y = random_tensor(cx.shape(), rng, false);
  const T ty = conv_transpose3d(y, w, T{}, {2, 0});
  REQUIRE(ty.shape() == x.shape());
  const double lhs = std::inner_product(cx.data().begin(), cx.data().end(), y.data().begin(), 0.0);
  const double rhs = std::inner_product(x.data().begin(), x.data().end(), ty.data().begin(), 0.0);
  CHECK(std::abs(lhs - rhs) < 1e-10);

  const T zero = T::full(cx.shape(), 0.0);
  const T tz = conv_transpose3d(zero, w, T{});
  for (double v : tz.data()) CHECK(v == 0.0);
}

TEST_CASE("maxpool picks the window maximum and routes gradient to the first tie") {
  std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8};
  const T x({1, 1, 2, 2, 2}, v, true);
  const T y = maxpool3d(x);
  CHECK(y.item() == 8.0);

  const T c = T::full({1, 1, 4, 4, 4}, 2.0, true);
  const T p = maxpool3d(c);
  CHECK(p.shape() == Shape{1, 1, 2, 2, 2});
  sum(p).backward();
  const auto g = c.grad();
  for (Index z = 0; z < 4; ++z)
    for (Index yy = 0; yy < 4; ++yy)
      for (Index xx = 0; xx < 4; ++xx) {
        const bool first = z % 2 == 0 && yy % 2 == 0 && xx % 2 == 0;
        CHECK(g[static_cast<std::size_t>((z * 4 + yy) * 4 + xx)] == (first ? 1.0 : 0.0));
      }
  CHECK(maxpool3d(T::full({1, 1, 8, 8, 8}, 0.0)).shape() == Shape{1, 1, 4, 4, 4});
}

TEST_CASE("relu and concat") {
  const T x({1, 2, 1, 1, 1}, {-1.0, 2.0});
  const T r = relu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 2.0);

  const T a = T::full({1, 3, 2, 2, 2}, 1.0);
  const T b = T::full({1, 5, 2, 2, 2}, 2.0);
  const T c = concat(a, b);
  CHECK(c.shape() == Shape{1, 8, 2, 2, 2});
  for (Index i = 0; i < c.numel(); ++i) CHECK(c.data()[i] == (i < 3 * 8 ? 1.0 : 2.0));
  CHECK_THROWS_AS(concat(a, T::full({1, 5, 2, 2, 1}, 0.0)), ShapeError);
}

TEST_CASE("batchnorm normalises per channel in training mode") {
  std::mt19937_64 rng(4);
  std::vector<double> v = oracle::random_values(2 * 3 * 27, rng, -5.0, 9.0);
  const T x({2, 3, 3, 3, 3}, v);
  BatchNormState<double> state(3);
  const T y = batchnorm3d(x, T::full({3}, 1.0), T::full({3}, 0.0), state, Mode::training);
  for (Index c = 0; c < 3; ++c) {
    double m = 0, s = 0;
    for (Index b = 0; b < 2; ++b)
      for (Index i = 0; i < 27; ++i) m += y.data()[static_cast<std::size_t>((b * 3 + c) * 27 + i)];
    m /= 54;
    for (Index b = 0; b < 2; ++b)
      for (Index i = 0; i < 27; ++i) s += std::pow(y.data()[static_cast<std::size_t>((b * 3 + c) * 27 + i)] - m, 2);
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(s / 54 - 1.0) < 1e-4);
  }
  // Running stats moved by momentum 0.1 toward the batch statistics.
  CHECK(state.running_mean[0] != 0.0);

  BatchNormState<double> fresh(3);
  const T z = batchnorm3d(x, T::full({3}, 1.0), T::full({3}, 0.0), fresh, Mode::inference);
  for (Index i = 0; i < x.numel(); ++i) CHECK(std::abs(z.data()[i] - x.data()[i]) < 1e-4 * (1 + std::abs(x.data()[i])));

  BatchNormState<double> one(1);
  CHECK_THROWS_AS(batchnorm3d(T::full({1, 1, 1, 1, 1}, 1.0), T::full({1}, 1.0), T::full({1}, 0.0), one,
                              Mode::training),
                  DomainError);
}

TEST_CASE("softmax across channels") {
  const T u = T::full({1, 5, 1, 1, 1}, 0.3);
  const T pu = softmax_channel(u);
  for (double p : pu.data()) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));

  const T two({1, 2, 1, 1, 1}, {std::log(1.0), std::log(3.0)});
  const T p = softmax_channel(two);
  CHECK(p.data()[0] == doctest::Approx(0.25));
  CHECK(p.data()[1] == doctest::Approx(0.75));

  std::mt19937_64 rng(5);
  const T big({2, 4, 2, 2, 2}, oracle::random_values(64, rng, -1e4, 1e4));
  const T q = softmax_channel(big);
  for (Index b = 0; b < 2; ++b)
    for (Index v = 0; v < 8; ++v) {
      double s = 0;
      for (Index c = 0; c < 4; ++c) {
        const double pc = q.data()[static_cast<std::size_t>((b * 4 + c) * 8 + v)];
        CHECK(pc >= 0.0);
        s += pc;
      }
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
}

TEST_CASE("weighted cross entropy contract") {
  const std::vector<std::uint8_t> target{0, 1, 2, 3, 4, 1, 2, 0};
  const std::vector<std::uint8_t> mask(8, 1);
  const std::vector<double> unit(5, 1.0);

  const T uniform = T::full({1, 5, 2, 2, 2}, 0.0);
  CHECK(std::abs(weighted_cross_entropy(uniform, target, unit, mask).item() - std::log(5.0)) < 1e-12);

  std::vector<double> confident(40, -50.0);
  for (std::size_t v = 0; v < 8; ++v) confident[target[v] * 8 + v] = 50.0;
  CHECK(weighted_cross_entropy(T({1, 5, 2, 2, 2}, confident), target, unit, mask).item() <= 1e-6);

  std::mt19937_64 rng(6);
  const T logits({1, 5, 2, 2, 2}, oracle::random_values(40, rng, -3, 3));
  const std::vector<double> w{0.2, 1.5, 3.0, 0.7, 2.0};
  std::vector<double> w2(w);
  for (double& x : w2) x *= 2.0;
  CHECK(weighted_cross_entropy(logits, target, w, mask).item() ==
        doctest::Approx(weighted_cross_entropy(logits, target, w2, mask).item()).epsilon(1e-14));

  CHECK_THROWS_AS(weighted_cross_entropy(logits, target, w, std::vector<std::uint8_t>(8, 0)), DomainError);
}

TEST_CASE("backward of sum of squares") {
  const T x({2}, {1.0, 2.0}, true);
  const T unused({3}, {1.0, 1.0, 1.0}, true);
  sum(square(x)).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  for (double g : unused.grad()) CHECK(g == 0.0);

  // Leaf gradients accumulate across backward calls.
  sum(square(x)).backward();
  CHECK(x.grad()[1] == 8.0);
  CHECK_THROWS_AS(square(x).backward(), ShapeError);
}

TEST_CASE("backward visits each node exactly once") {
  const T x({3}, {1.0, -2.0, 0.5}, true);
  const T y = square(x);
  const T z = add(y, y);  // diamond: y feeds z twice
  const T loss = sum(mul(z, y));
  loss.backward();
  CHECK(y.backward_visits() == 1);
  CHECK(z.backward_visits() == 1);
  CHECK(loss.backward_visits() == 1);
  // d/dx (2 x^4) = 8 x^3
  CHECK(x.grad()[1] == doctest::Approx(-64.0));
}

TEST_CASE("non-finite values trip an error") {
  const T x({1}, std::vector<double>{1e200});
  CHECK_THROWS_AS(square(square(x)), DomainError);
}

TEST_CASE("finite-difference gradients per op") {
  std::mt19937_64 rng(7);
  auto check = [](const oracle::GradCheck& r) {
    CHECK(r.checked > 0);
    CHECK(r.kinked == 0);
    CHECK(r.passed == r.checked);
  };

  SUBCASE("conv3d") {
    const T x = random_tensor({2, 2, 4, 3, 4}, rng);
    const T w = random_tensor({3, 2, 3, 3, 3}, rng);
    const T b = random_tensor({3}, rng);
    check(oracle::grad_check({x, w, b}, [&] { return probe(conv3d(x, w, b, {1, 1}), 11); }, 1));
    check(oracle::grad_check({x, w}, [&] { return probe(conv3d(x, w, T{}, {2, 1}), 12); }, 2));
  }
  SUBCASE("conv_transpose3d") {
    const T x = random_tensor({2, 3, 2, 3, 2}, rng);
    const T w = random_tensor({3, 2, 2, 2, 2}, rng);
    const T b = random_tensor({2}, rng);
    check(oracle::grad_check({x, w, b}, [&] { return probe(conv_transpose3d(x, w, b), 13); }, 3));
  }
  SUBCASE("maxpool3d") {
    // Distinct values with gaps far wider than the step.
    std::vector<double> v(2 * 2 * 4 * 4 * 4);
    std::iota(v.begin(), v.end(), 0.0);
    std::shuffle(v.begin(), v.end(), rng);
    for (double& e : v) e *= 0.01;
    const T x({2, 2, 4, 4, 4}, v, true);
    check(oracle::grad_check({x}, [&] { return probe(maxpool3d(x), 14); }, 4, 64));
  }
  SUBCASE("relu") {
    std::vector<double> v = oracle::random_values(54, rng);
    for (double& e : v) e += e < 0 ? -0.05 : 0.05;
    const T x({2, 3, 3, 3, 1}, v, true);
    check(oracle::grad_check({x}, [&] { return probe(relu(x), 15); }, 5, 54));
  }
  SUBCASE("concat") {
    const T a = random_tensor({2, 1, 2, 2, 2}, rng);
    const T b = random_tensor({2, 2, 2, 2, 2}, rng);
    check(oracle::grad_check({a, b}, [&] { return probe(concat(a, b), 16); }, 6));
  }
  SUBCASE("batchnorm3d") {
    const T x = random_tensor({2, 3, 3, 2, 3}, rng);
    const T g = random_tensor({3}, rng);
    const T b = random_tensor({3}, rng);
    BatchNormState<double> state(3);
    check(oracle::grad_check({x, g, b},
                             [&] { return probe(batchnorm3d(x, g, b, state, Mode::training), 17); }, 7, 40));
    check(oracle::grad_check({x, g, b},
                             [&] { return probe(batchnorm3d(x, g, b, state, Mode::inference), 18); }, 8));
  }
  SUBCASE("softmax_channel") {
    const T x = random_tensor({2, 4, 2, 1, 2}, rng);
    check(oracle::grad_check({x}, [&] { return probe(softmax_channel(x), 19); }, 9, 32));
  }
  SUBCASE("weighted_cross_entropy") {
    const T x = random_tensor({2, 5, 2, 2, 1}, rng);
    const std::vector<std::uint8_t> target{0, 4, 2, 2, 1, 3, 0, 1};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1, 1, 0};
    const std::vector<double> w{0.5, 2.0, 1.0, 3.0, 0.25};
    check(oracle::grad_check({x}, [&] { return weighted_cross_entropy(x, target, w, mask); }, 10, 40));
  }
  SUBCASE("elementwise helpers") {
    const T a = random_tensor({5}, rng);
    const T b = random_tensor({5}, rng);
    check(oracle::grad_check({a, b}, [&] { return sum(mul(add(a, square(b)), a)); }, 11));
  }
}

TEST_CASE("argmax takes the smallest index on ties") {
  const std::vector<float> v{1, 3, 2,   // channel 0 over 3 voxels
                             3, 3, 2,   // channel 1
                             0, 1, 2};  // channel 2
  const auto a = argmax_channel<float>(v, 3, 3);
  CHECK(a == std::vector<std::uint8_t>{1, 0, 0});
}
