#include <cmath>
#include <algorithm>
#include <numeric>
#include <set>

#include "doctest.h"
#include "upm/error.hpp"
#include "upm/gradcheck.hpp"
#include "upm/ops.hpp"
#include "upm/rng.hpp"
#include "upm/tensor.hpp"

using namespace upm;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = true) {
  Rng rng(seed);
  std::vector<double> d(shape_size(shape));
  for (auto& x : d) x = rng.normal();
  return Tensor(std::move(shape), std::move(d), grad);
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape invariants") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  }

  TEST_CASE("handles share storage, detach copies") {
    Tensor a({2}, 0.0);
    Tensor b = a;
    b.mutable_data()[0] = 4.0;
    CHECK(a.at(0) == 4.0);
    Tensor c = a.detach();
    c.mutable_data()[0] = 1.0;
    CHECK(a.at(0) == 4.0);
    CHECK_FALSE(c.requires_grad());
  }

  TEST_CASE("sum gives a gradient of ones for any shape") {
    for (const Shape& s : {Shape{1}, Shape{3, 4}, Shape{2, 3, 5}}) {
      Tensor x = random_tensor(s, 1);
      backward(sum(x));
      for (const double g : x.grad()) CHECK(g == 1.0);
      CHECK(x.grad().size() == x.size());
    }
  }

  TEST_CASE("dot(x, x) gives gradient 2x") {
    Tensor x = random_tensor({7}, 2);
    backward(dot(x, x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.at(i)).epsilon(1e-15));
  }

  TEST_CASE("backward visits each node once on a diamond graph") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor y = x * x;          // shared by both branches
    Tensor z = sum(y + y * 2.0);  // 3x²
    const auto order = topological_order(z);
    std::set<detail::Node*> unique(order.begin(), order.end());
    CHECK(unique.size() == order.size());
    backward(z);
    CHECK(x.grad()[0] == doctest::Approx(18.0));
  }

  TEST_CASE("topological order puts operands first") {
    Tensor a = random_tensor({2, 2}, 3), b = random_tensor({2, 2}, 4);
    Tensor out = sum(softmax(matmul(a, b), 1));
    const auto order = topological_order(out);
    for (std::size_t i = 0; i < order.size(); ++i) {
      for (const auto& in : order[i]->inputs) {
        if (!in->node) continue;
        const auto pos = std::find(order.begin(), order.end(), in->node.get()) - order.begin();
        CHECK(static_cast<std::size_t>(pos) < i);
      }
    }
  }

  TEST_CASE("backward requires a single-element root") {
    Tensor x = random_tensor({2, 2}, 5);
    CHECK_THROWS_AS(backward(x * 2.0), ContractError);
  }

  TEST_CASE("gradients accumulate across backward calls and reset with zero_grad") {
    Tensor x = random_tensor({3}, 6);
    backward(sum(x));
    backward(sum(x));
    CHECK(x.grad()[1] == 2.0);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
    CHECK(x.grad().empty());
  }

  TEST_CASE("NoGradGuard stops graph recording") {
    Tensor x = random_tensor({3}, 7);
    {
      NoGradGuard guard;
      CHECK_FALSE(grad_enabled());
      Tensor y = x * 2.0;
      CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
  }

  TEST_CASE("finite_diff_check: sum is exact, squared norm matches 2x") {
    Tensor x = random_tensor({4, 3}, 8);
    CHECK(finite_diff_check([](const Tensor& t) { return sum(t); }, x) <= 1e-10);
    CHECK(finite_diff_check([](const Tensor& t) { return dot(t, t); }, x) <= 1e-7);
  }

  TEST_CASE("finite_diff_check flags a wrong gradient") {
    Tensor x = random_tensor({3}, 9);
    // exp with its value as gradient is right; a scaled copy through detach is not.
    const auto broken = [](const Tensor& t) { return sum(t * t.detach()); };  // true grad 2x, analytic x
    CHECK(finite_diff_check(broken, x) > 1e-3);
  }
}
