#include <cmath>

#include "doctest.h"
#include "upm/error.hpp"
#include "upm/gradcheck.hpp"
#include "upm/ops.hpp"
#include "upm/rng.hpp"

using namespace upm;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = true) {
  Rng rng(seed);
  std::vector<double> d(shape_size(shape));
  for (auto& x : d) x = rng.normal();
  return Tensor(std::move(shape), std::move(d), grad);
}

std::vector<double> triple_loop(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) c[i * n + j] += a.at(i, t) * b.at(t, j);
  return c;
}

}  // namespace

TEST_SUITE("ops") {
  TEST_CASE("matmul small cases") {
    const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
    const Tensor r = matmul(eye, eye);
    CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 0, 0, 1});
    const Tensor p = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{0}, {1}}));
    CHECK(p.shape() == Shape{2, 1});
    CHECK(p.at(0) == 2.0);
    CHECK(p.at(1) == 4.0);
  }

  TEST_CASE("matmul matches a triple-loop oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Tensor a = random_tensor({3, 4}, seed, false), b = random_tensor({4, 2}, seed + 100, false);
      const auto ref = triple_loop(a, b);
      const Tensor c = matmul(a, b);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.at(i) - ref[i]) <= 1e-12);
      const Tensor cn = matmul_nt(a, transpose(b));
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(cn.at(i) - ref[i]) <= 1e-12);
    }
  }

  TEST_CASE("matmul shape mismatch") { CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError); }

  TEST_CASE("softmax hand cases") {
    const Tensor a = softmax(Tensor::vector({0, 0}), 0);
    CHECK(a.at(0) == doctest::Approx(0.5));
    const Tensor b = softmax(Tensor::vector({std::log(1.0), std::log(3.0)}), 0);
    CHECK(b.at(0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(b.at(1) == doctest::Approx(0.75).epsilon(1e-14));
    const Tensor c = softmax(Tensor::vector({1000, 1000}), 0);
    CHECK(c.at(0) == 0.5);
    CHECK(std::isfinite(c.at(1)));
  }

  TEST_CASE("softmax along either axis sums to one") {
    const Tensor x = random_tensor({3, 5}, 11, false);
    const Tensor r = softmax(x, 1), c = softmax(x, 0);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) s += r.at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 3; ++i) s += c.at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
  }

  TEST_CASE("layer_norm hand cases") {
    const Tensor g({2}, 1.0), b({2}, 0.0);
    const Tensor z = layer_norm(Tensor::matrix({{3, 3}}), g, b, 1e-5);
    CHECK(z.at(0) == 0.0);
    CHECK(z.at(1) == 0.0);
    const Tensor y = layer_norm(Tensor::matrix({{1, 3}}), g, b, 1e-15);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("layer_norm gradients match finite differences") {
    const Tensor gamma = random_tensor({6}, 12), beta = random_tensor({6}, 13);
    const Tensor w = random_tensor({4, 6}, 14, false);
    const auto f = [&](const Tensor& x) { return sum(layer_norm(x, gamma, beta, 1e-5) * w); };
    CHECK(finite_diff_check(f, random_tensor({4, 6}, 15)) <= 1e-6);
    const auto fg = [&](const Tensor& g) { return sum(layer_norm(w, g, beta, 1e-5) * w); };
    CHECK(finite_diff_check(fg, random_tensor({6}, 16)) <= 1e-6);
  }

  TEST_CASE("composite of matmul, softmax and layer_norm matches finite differences") {
    const Tensor b = random_tensor({5, 4}, 21), gamma = random_tensor({4}, 22), beta = random_tensor({4}, 23);
    const Tensor w = random_tensor({3, 4}, 24, false);
    const auto f = [&](const Tensor& a) {
      return sum(softmax(layer_norm(matmul(a, b), gamma, beta, 1e-5), 1) * w);
    };
    CHECK(finite_diff_check(f, random_tensor({3, 5}, 25)) <= 1e-5);
    const auto fb = [&](const Tensor& bb) {
      return sum(log_softmax(matmul(w, transpose(bb)), 0) * random_tensor({3, 5}, 26, false));
    };
    CHECK(finite_diff_check(fb, random_tensor({5, 4}, 27)) <= 1e-5);
  }

  TEST_CASE("elementwise and row op gradients") {
    const Tensor w = random_tensor({4, 3}, 30, false);
    const Tensor row = random_tensor({3}, 31);
    CHECK(finite_diff_check([&](const Tensor& x) { return sum(gelu(x) * w); }, random_tensor({4, 3}, 32)) <= 1e-6);
    CHECK(finite_diff_check([&](const Tensor& x) { return sum(exp(x) * w); }, random_tensor({4, 3}, 33)) <= 1e-6);
    CHECK(finite_diff_check([&](const Tensor& x) { return sum(add_row(x, row) * w); }, random_tensor({4, 3}, 34)) <=
          1e-6);
    CHECK(finite_diff_check([&](const Tensor& x) { return sum(l2_normalize_rows(x) * w); }, random_tensor({4, 3}, 35)) <=
          1e-6);
    CHECK(finite_diff_check([&](const Tensor& s) { return sum(div_scalar(w, s)); }, Tensor::scalar(0.7, true)) <= 1e-6);
    const std::vector<std::size_t> groups{1, 3};
    CHECK(finite_diff_check([&](const Tensor& x) { return sum(segment_mean_rows(x, groups) * random_tensor({2, 3}, 36, false)); },
                            random_tensor({4, 3}, 37)) <= 1e-6);
  }

  TEST_CASE("segment_mean_rows shape and values") {
    const Tensor x = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
    const std::vector<std::size_t> g{2, 1};
    const Tensor m = segment_mean_rows(x, g);
    CHECK(m.shape() == Shape{2, 2});
    CHECK(m.at(0, 0) == 2.0);
    CHECK(m.at(1, 1) == 6.0);
  }

  TEST_CASE("attention gradient matches finite differences") {
    const Tensor w = random_tensor({6, 4}, 40, false);
    const auto f = [&](const Tensor& qkv) { return sum(multi_head_attention(qkv, 3, 2) * w); };
    CHECK(finite_diff_check(f, random_tensor({6, 12}, 41)) <= 1e-6);
  }

  TEST_CASE("soft and pair cross-entropy gradients") {
    const std::vector<double> targets{0.0, 0.7, 0.3, 0.2, 0.0, 0.8, 0.5, 0.5, 0.0};
    const std::vector<unsigned char> mask{0, 1, 1, 1, 0, 1, 1, 1, 0};
    CHECK(finite_diff_check([&](const Tensor& x) { return soft_cross_entropy(x, targets, mask); },
                            random_tensor({3, 3}, 50)) <= 1e-6);
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {2, 0}};
    CHECK(finite_diff_check([&](const Tensor& x) { return pair_cross_entropy(x, pairs); }, random_tensor({3, 2}, 51)) <=
          1e-6);
  }

  TEST_CASE("l2_normalize_rows rejects zero rows") {
    CHECK_THROWS_AS(l2_normalize_rows(Tensor({2, 3}, 0.0)), DegenerateInputError);
  }
}
