#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pcpred/tensor.hpp"

using namespace pcpred;
using namespace pcpred::ad;

TEST_CASE("sum of squares has gradient 2x") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("squared_norm matches x.x and its gradient") {
  Tensor x = Tensor::from_values({3}, {1.0, -2.0, 0.5}, true);
  Tensor y = squared_norm(x);
  CHECK(y.item() == doctest::Approx(5.25));
  backward(y);
  CHECK(x.grad()[1] == -4.0);
}

TEST_CASE("max pool tie sends gradient to the first row only") {
  Tensor a = Tensor::from_values({2, 1}, {3.0, 3.0}, true);
  Tensor m = max_pool_groups(a, 2);
  CHECK(m.item() == 3.0);
  backward(m);
  CHECK(a.grad()[0] == 1.0);
  CHECK(a.grad()[1] == 0.0);
}

TEST_CASE("max pool gradient mass equals the upstream gradient") {
  Rng rng(4);
  Tensor a = oracle::random_tensor(rng, {12, 5});
  Tensor pooled = max_pool_groups(a, 4);
  Tensor up = oracle::random_tensor(rng, {3, 5}, -1, 1, false);
  backward(sum(mul(pooled, up)));
  for (std::size_t g = 0; g < 3; ++g) {
    for (std::size_t c = 0; c < 5; ++c) {
      double mass = 0.0;
      for (std::size_t r = 0; r < 4; ++r) mass += a.grad()[(g * 4 + r) * 5 + c];
      CHECK(mass == doctest::Approx(up.values()[g * 5 + c]).epsilon(1e-15));
    }
  }
}

TEST_CASE("shape mismatch names the op before anything runs") {
  Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.op() == "matmul");
  }
  CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(add_bias(a, Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS(concat_cols({a, Tensor::zeros({3, 1})}), ShapeError);
  CHECK_THROWS_AS(max_pool_groups(a, 4), ShapeError);
  CHECK_THROWS_AS(slice_rows(a, 1, 3), ShapeError);
  const std::size_t bad[] = {2};
  CHECK_THROWS_AS(gather_rows(a, bad), ShapeError);
}

TEST_CASE("non-finite results are rejected") {
  Tensor a = Tensor::from_values({1}, {1e300}, true);
  CHECK_THROWS_AS(mul(a, a), std::domain_error);
}

TEST_CASE("every op passes central finite differences") {
  Rng rng(11);
  Tensor a = oracle::random_tensor(rng, {4, 3});
  Tensor b = oracle::random_tensor(rng, {3, 5});
  Tensor c = oracle::random_tensor(rng, {4, 3});
  Tensor bias = oracle::random_tensor(rng, {3});
  const std::size_t rows[] = {3, 0, 0, 2, 1};

  auto check = [](std::vector<Tensor> leaves, std::function<Tensor()> f) {
    const auto r = oracle::gradcheck(std::move(leaves), f);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error <= 1e-6);
  };
  SUBCASE("matmul") { check({a, b}, [&] { return oracle::probe(matmul(a, b)); }); }
  SUBCASE("add sub mul") { check({a, c}, [&] { return oracle::probe(mul(add(a, c), sub(a, c))); }); }
  SUBCASE("scale") { check({a}, [&] { return oracle::probe(scale(a, -2.5)); }); }
  SUBCASE("add_bias") { check({a, bias}, [&] { return oracle::probe(add_bias(a, bias)); }); }
  SUBCASE("relu") { check({a}, [&] { return oracle::probe(relu(a)); }); }
  SUBCASE("concat") {
    check({a, c}, [&] { return oracle::probe(concat_rows({concat_cols({a, c}), concat_cols({c, a})})); });
  }
  SUBCASE("slice and gather") {
    check({a}, [&] { return oracle::probe(gather_rows(slice_rows(a, 0, 4), rows)); });
  }
  SUBCASE("max pool") { check({a}, [&] { return oracle::probe(max_pool_groups(a, 2)); }); }
  SUBCASE("mean and squared norm") {
    check({a}, [&] { return add(mean(a), squared_norm(a)); });
  }
}

TEST_CASE("three-layer composition passes finite differences at 1e-4") {
  Rng rng(5);
  Tensor x = oracle::random_tensor(rng, {6, 4});
  Tensor w1 = oracle::random_tensor(rng, {4, 8}), b1 = oracle::random_tensor(rng, {8});
  Tensor w2 = oracle::random_tensor(rng, {8, 8}), b2 = oracle::random_tensor(rng, {8});
  Tensor w3 = oracle::random_tensor(rng, {8, 2}), b3 = oracle::random_tensor(rng, {2});
  auto f = [&] {
    Tensor h = relu(add_bias(matmul(x, w1), b1));
    h = relu(add_bias(matmul(h, w2), b2));
    return oracle::probe(add_bias(matmul(h, w3), b3));
  };
  const auto r = oracle::gradcheck({x, w1, b1, w2, b2, w3, b3}, f);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("no-grad guard records nothing and restores the previous mode") {
  Tensor a = Tensor::from_values({2}, {1.0, 2.0}, true);
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    Tensor y = mul(a, a);
    CHECK(y.node()->inputs.empty());
  }
  CHECK(grad_enabled());
}

TEST_CASE("identical inputs give bit-identical gradients") {
  auto run = [] {
    Rng rng(21);
    Tensor x = oracle::random_tensor(rng, {5, 3});
    Tensor w = oracle::random_tensor(rng, {3, 4});
    backward(oracle::probe(relu(matmul(x, w))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}
