#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "reference.hpp"
#include "support.hpp"
#include "uformer/error.hpp"
#include "uformer/gradcheck.hpp"
#include "uformer/ops.hpp"

using namespace uformer;
using testing::random_tensor;

TEST_SUITE("tensor-autograd") {

TEST_CASE("tensor construction checks the element count") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor<double> t({2, 3}, std::vector<double>(6, 1.0));
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Rng rng(1);
    const auto a = random_tensor<double>({3, 4}, rng);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
    CHECK(testing::bitwise_equal(matmul(a, Tensor<double>({4, 4}, eye)), a));
  }
  SUBCASE("2x2 hand example") {
    const Tensor<double> a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8});
    const auto c = testing::copy_data(matmul(a, b));
    CHECK(std::vector<double>(c.begin(), c.end()) == std::vector<double>{19, 22, 43, 50});
  }
  SUBCASE("random shapes against the triple loop") {
    Rng rng(2);
    for (auto [m, k, n] : {std::array<std::int64_t, 3>{1, 1, 1}, {3, 5, 2}, {7, 4, 9}, {16, 16, 16}}) {
      const auto a = random_tensor<double>({m, k}, rng), b = random_tensor<double>({k, n}, rng);
      const auto want = ref::matmul(ref::values(a), ref::values(b), m, k, n);
      CHECK(testing::max_abs_diff(ref::values(matmul(a, b)), want) < 1e-12);
    }
  }
  SUBCASE("batched and shared right-hand side") {
    Rng rng(3);
    const auto a = random_tensor<double>({2, 3, 4}, rng), b = random_tensor<double>({2, 4, 5}, rng);
    const auto shared = random_tensor<double>({4, 5}, rng);
    const auto c = ref::values(matmul(a, b));
    const auto d = ref::values(matmul(a, shared));
    const auto av = ref::values(a), bv = ref::values(b), sv = ref::values(shared);
    for (int i = 0; i < 2; ++i) {
      const ref::Vec ai(av.begin() + i * 12, av.begin() + (i + 1) * 12);
      const ref::Vec bi(bv.begin() + i * 20, bv.begin() + (i + 1) * 20);
      const auto want = ref::matmul(ai, bi, 3, 4, 5);
      const auto want_shared = ref::matmul(ai, sv, 3, 4, 5);
      CHECK(testing::max_abs_diff(ref::Vec(c.begin() + i * 15, c.begin() + (i + 1) * 15), want) < 1e-12);
      CHECK(testing::max_abs_diff(ref::Vec(d.begin() + i * 15, d.begin() + (i + 1) * 15), want_shared) < 1e-12);
    }
  }
  SUBCASE("inner dimension mismatch") {
    CHECK_THROWS_AS(matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4, 2})), DimensionError);
  }
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 unit kernel is the identity") {
    Rng rng(4);
    const auto x = random_tensor<double>({1, 5, 6}, rng);
    CHECK(testing::bitwise_equal(conv2d(x, Tensor<double>({1, 1, 1, 1}, {1.0}), Tensor<double>()), x));
  }
  SUBCASE("3x3 ones kernel on a constant field") {
    const auto x = Tensor<double>::full({1, 6, 6}, 0.25);
    const auto y = conv2d(x, Tensor<double>::full({1, 1, 3, 3}, 1.0), Tensor<double>(), {1, 1, 1});
    for (int r = 1; r < 5; ++r)
      for (int c = 1; c < 5; ++c) CHECK(y.data()[static_cast<std::size_t>(r * 6 + c)] == 9 * 0.25);
  }
  SUBCASE("2-channel 5x5 input matches the loop oracle bitwise") {
    Rng rng(5);
    for (auto [stride, pad, groups] : {std::array<std::int64_t, 3>{1, 0, 1}, {1, 1, 1}, {2, 1, 1}, {1, 1, 2}}) {
      const auto x = random_tensor<double>({2, 5, 5}, rng);
      const std::int64_t cout = 4, k = 3;
      const auto w = random_tensor<double>({cout, 2 / groups, k, k}, rng);
      const auto b = random_tensor<double>({cout}, rng);
      const auto got = conv2d(x, w, b, {stride, pad, groups});
      const auto want = ref::conv2d(ref::to_map(x), ref::values(w), ref::values(b), cout, k, stride, pad, groups);
      CHECK(ref::values(got) == want.v);
    }
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(conv2d(Tensor<double>::zeros({3, 4, 4}), Tensor<double>::zeros({2, 2, 3, 3}), Tensor<double>()),
                    DimensionError);
  }
}

TEST_CASE("conv_transpose2d") {
  Rng rng(6);
  const auto x = random_tensor<double>({3, 4, 4}, rng);
  const auto w = random_tensor<double>({3, 2, 2, 2}, rng);
  const auto y = conv_transpose2d(x, w, Tensor<double>(), 2);
  REQUIRE(y.shape() == Shape{2, 8, 8});

  SUBCASE("matches the scatter loop") {
    const auto b = random_tensor<double>({2}, rng);
    const auto want = ref::conv_transpose2d(ref::to_map(x), ref::values(w), ref::values(b), 2, 2, 2);
    CHECK(testing::max_abs_diff(ref::values(conv_transpose2d(x, w, b, 2)), want.v) < 1e-12);
  }
  SUBCASE("adjoint of the strided convolution with the same kernel") {
    // <T x, y> = <x, C y> where C is the stride-2 correlation sharing w.
    const auto probe = random_tensor<double>({2, 8, 8}, rng);
    const auto cy = conv2d(probe, w, Tensor<double>(), {2, 0, 1});
    const auto lhs = std::inner_product(y.data().begin(), y.data().end(), probe.data().begin(), 0.0);
    const auto rhs = std::inner_product(x.data().begin(), x.data().end(), cy.data().begin(), 0.0);
    CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-12) < 1e-6);
  }
}

TEST_CASE("softmax") {
  Rng rng(7);
  const auto x = random_tensor<double>({4, 6}, rng, 5.0);
  const auto s = testing::copy_data(softmax(x, 1));
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 6; ++c) sum += s[static_cast<std::size_t>(r * 6 + c)];
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
  const auto constant = testing::copy_data(softmax(Tensor<double>::full({1, 5}, 3.0), 1));
  for (auto v : constant) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  const auto shifted = testing::copy_data(softmax(add_scalar(x, 17.5), 1));
  CHECK(testing::max_abs_diff(shifted, s) < 1e-6);
}

TEST_CASE("layer_norm") {
  Rng rng(8);
  const auto x = random_tensor<double>({5, 16}, rng, 3.0);
  const auto y = testing::copy_data(layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>::zeros({16})));
  for (int r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < 16; ++c) mu += y[static_cast<std::size_t>(r * 16 + c)];
    mu /= 16;
    for (int c = 0; c < 16; ++c) var += std::pow(y[static_cast<std::size_t>(r * 16 + c)] - mu, 2);
    var /= 16;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
  const auto beta = random_tensor<double>({4}, rng);
  const auto c = testing::copy_data(layer_norm(Tensor<double>::full({2, 4}, 0.7), random_tensor<double>({4}, rng), beta));
  for (int i = 0; i < 8; ++i) CHECK(c[static_cast<std::size_t>(i)] == beta.data()[static_cast<std::size_t>(i % 4)]);
}

TEST_CASE("activations") {
  CHECK(gelu(Tensor<double>::scalar(0.0)).item() == 0.0);
  CHECK(leaky_relu(Tensor<double>::scalar(0.0)).item() == 0.0);
  CHECK(std::abs(gelu(Tensor<double>::scalar(10.0)).item() - 10.0) < 1e-6);
  CHECK(leaky_relu(Tensor<double>::scalar(-1.0), 0.2).item() == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK(activation(Tensor<double>::scalar(-2.0), Activation::leaky_relu(0.1)).item() == doctest::Approx(-0.2));
}

TEST_CASE("reshape and permute") {
  Rng rng(9);
  const auto x = random_tensor<double>({2, 3, 4}, rng);
  CHECK(testing::bitwise_equal(reshape(reshape(x, {6, 4}), {2, 3, 4}), x));
  CHECK(testing::bitwise_equal(permute(x, {0, 1, 2}), x));
  const auto p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(testing::bitwise_equal(permute(p, {1, 2, 0}), x));
  CHECK(p.data()[static_cast<std::size_t>((3 * 2 + 1) * 3 + 2)] == x.data()[static_cast<std::size_t>((1 * 3 + 2) * 4 + 3)]);
  CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);
}

TEST_CASE("backward") {
  Rng rng(10);
  SUBCASE("sum gives ones") {
    auto x = random_tensor<double>({3, 4}, rng, 1.0, true);
    sum(x).backward();
    for (auto g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares gives 2x") {
    auto x = random_tensor<double>({3, 4}, rng, 1.0, true);
    sum(mul(x, x)).backward();
    for (std::size_t i = 0; i < 12; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-15));
  }
  SUBCASE("gradients accumulate until zeroed") {
    auto x = random_tensor<double>({5}, rng, 1.0, true);
    sum(x).backward();
    sum(x).backward();
    for (auto g : x.grad()) CHECK(g == 2.0);
    x.zero_grad();
    for (auto g : x.grad()) CHECK(g == 0.0);
  }
  SUBCASE("non-scalar root") {
    auto x = random_tensor<double>({2}, rng, 1.0, true);
    CHECK_THROWS_AS(scale(x, 2.0).backward(), UsageError);
  }
  SUBCASE("linearity of the adjoint") {
    auto a = random_tensor<double>({4, 3}, rng, 1.0, true);
    const auto b = random_tensor<double>({3, 5}, rng);
    const auto f = [&] { return sum(gelu(matmul(a, b))); };
    const auto g = [&] { return sum(mul(a, a)); };
    f().backward();
    const auto gf = testing::to_doubles(a.grad());
    a.zero_grad();
    g().backward();
    const auto gg = testing::to_doubles(a.grad());
    a.zero_grad();
    add(scale(f(), 0.3), scale(g(), -1.7)).backward();
    for (std::size_t i = 0; i < gf.size(); ++i) CHECK(std::abs(a.grad()[i] - (0.3 * gf[i] - 1.7 * gg[i])) < 1e-6);
  }
  SUBCASE("no graph under NoGradGuard") {
    auto x = random_tensor<double>({3}, rng, 1.0, true);
    NoGradGuard guard;
    const auto y = sum(mul(x, x));
    CHECK_FALSE(y.needs_grad());
  }
}

TEST_CASE("computation record") {
  Rng rng(11);
  auto x = random_tensor<double>({3, 3}, rng, 1.0, true);
  auto w = random_tensor<double>({3, 3}, rng, 1.0, true);
  const auto h = matmul(x, w);
  const auto loss = sum(add(mul(h, h), h));  // h is reused
  const auto record = ComputationRecord<double>::trace(loss);
  std::set<const detail::Node<double>*> seen;
  for (const auto* node : record.nodes()) {
    for (const auto& in : node->inputs)
      if (in->needs_grad) CHECK(seen.count(in.get()) == 1);  // inputs precede their consumer
    CHECK(seen.insert(node).second);                          // each node once
  }
  CHECK(record.nodes().back() == loss.node().get());
  CHECK(record.size() == 6);  // x, w, matmul, mul, add, sum; the reused h appears once

  loss.backward();
  const auto gx = testing::to_doubles(x.grad());
  // dL/dh = 2h + 1, dL/dx = (2h + 1) w^T
  const auto hv = ref::values(h), wv = ref::values(w);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) {
      double want = 0.0;
      for (int j = 0; j < 3; ++j) want += (2 * hv[static_cast<std::size_t>(i * 3 + j)] + 1) * wv[static_cast<std::size_t>(k * 3 + j)];
      CHECK(gx[static_cast<std::size_t>(i * 3 + k)] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("determinism of a recorded graph") {
  const auto run = [] {
    Rng rng(12);
    auto x = random_tensor<float>({8, 16}, rng, 1.0, true);
    const auto w = random_tensor<float>({16, 16}, rng);
    const auto y = softmax(matmul(gelu(matmul(x, w)), w), 1);
    sum(mul(y, y)).backward();
    return std::pair{testing::to_doubles(y.data()), testing::to_doubles(x.grad())};
  };
  CHECK(run() == run());
}

TEST_CASE("finite-check mode names the operation") {
  set_finite_check(true);
  const auto x = Tensor<double>({2}, {1.0, -1.0});
  CHECK_THROWS_AS(sqrt(x), NumericError);
  try {
    sqrt(x);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("sqrt") != std::string::npos);
  }
  set_finite_check(false);
  CHECK_NOTHROW(sqrt(x));
}

TEST_CASE("gradient checks of every primitive") {
  for (const auto& r : primitive_suite(GradcheckOptions{})) {
    INFO(r.name << " rel_err " << r.rel_error);
    CHECK(r.passed());
    CHECK(r.tolerance == kPrimitiveTolerance);
  }
}

TEST_CASE("gradient check detects a corrupted adjoint") {
  GradcheckOptions o;
  o.inject_fault = 0.01;
  Rng rng(13);
  const auto r = check_gradient(
      "matmul", [](const std::vector<Tensor<double>>& in) { return sum(matmul(in[0], in[1])); },
      {random_tensor<double>({3, 4}, rng, 1.0, true), random_tensor<double>({4, 2}, rng, 1.0, true)},
      kPrimitiveTolerance, o);
  CHECK_FALSE(r.passed());
  CHECK(r.rel_error == doctest::Approx(0.01 / 1.01).epsilon(1e-3));
}

}
