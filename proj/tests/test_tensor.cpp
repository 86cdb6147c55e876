#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "oracles.hpp"
#include "pcdt/adam.hpp"
#include "pcdt/gradcheck.hpp"
#include "pcdt/ops.hpp"
#include "pcdt/tensor.hpp"

using namespace pcdt;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0,
                     bool rg = false) {
  return Tensor::randn(std::move(shape), rng, stddev, rg);
}

}  // namespace

TEST_CASE("matmul identity and projector") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, b);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(out.value_at(i) == b.value_at(i));

  Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor p = matmul(proj, b);
  CHECK(p.value_at(0) == 1.0);
  CHECK(p.value_at(1) == 2.0);
  CHECK(p.value_at(2) == 0.0);
  CHECK(p.value_at(3) == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    const int m = 3, k = 4, n = 2;
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = matmul(a, b);
    auto ref = oracle::matmul_ref(
        std::vector<double>(a.data(), a.data() + a.numel()),
        std::vector<double>(b.data(), b.data() + b.numel()), m, k, n);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(c.value_at(i) == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("matmul shape mismatch raises dimension error") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("softmax analytic examples") {
  Tensor x = Tensor::from_data({2}, {0.0, 0.0});
  Tensor y = softmax_lastdim(x);
  CHECK(y.value_at(0) == Catch::Approx(0.5).margin(1e-15));
  CHECK(y.value_at(1) == Catch::Approx(0.5).margin(1e-15));

  Tensor x2 = Tensor::from_data({2}, {std::log(2.0), 0.0});
  Tensor y2 = softmax_lastdim(x2);
  CHECK(y2.value_at(0) == Catch::Approx(2.0 / 3.0).margin(1e-14));
  CHECK(y2.value_at(1) == Catch::Approx(1.0 / 3.0).margin(1e-14));
}

TEST_CASE("softmax matches extended-precision oracle and sums to one") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> raw(5);
    for (auto& v : raw) v = rng.uniform(-8.0, 8.0);
    Tensor x = Tensor::from_data({5}, raw);
    Tensor y = softmax_lastdim(x);
    auto ref = oracle::softmax_ref(raw);
    double sum = 0.0;
    for (int i = 0; i < 5; ++i) {
      CHECK(y.value_at(i) == Catch::Approx(ref[i]).margin(1e-14));
      CHECK(y.value_at(i) >= 0.0);
      CHECK(y.value_at(i) <= 1.0);
      sum += y.value_at(i);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("layer_norm edge slices") {
  Tensor gain = Tensor::filled({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  Tensor constant = Tensor::from_data({3}, {4.2, 4.2, 4.2});
  Tensor out = layer_norm(constant, gain, bias);
  for (int i = 0; i < 3; ++i)
    CHECK(out.value_at(static_cast<std::size_t>(i)) ==
          Catch::Approx(0.0).margin(1e-12));

  Tensor g2 = Tensor::filled({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor pm = Tensor::from_data({2}, {1.0, -1.0});
  Tensor out2 = layer_norm(pm, g2, b2);
  CHECK(out2.value_at(0) == Catch::Approx(1.0).epsilon(1e-4));
  CHECK(out2.value_at(1) == Catch::Approx(-1.0).epsilon(1e-4));
  CHECK(std::abs(out2.value_at(0)) < 1.0);  // epsilon shrinks slightly
}

TEST_CASE("layer_norm matches scalar-loop oracle") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> raw(6), g(6), b(6);
    for (auto& v : raw) v = rng.uniform(-3.0, 3.0);
    for (auto& v : g) v = rng.uniform(0.5, 1.5);
    for (auto& v : b) v = rng.uniform(-0.5, 0.5);
    Tensor out = layer_norm(Tensor::from_data({6}, raw),
                            Tensor::from_data({6}, g),
                            Tensor::from_data({6}, b));
    auto ref = oracle::layer_norm_ref(raw, g, b, kLayerNormEps);
    for (std::size_t i = 0; i < 6; ++i)
      CHECK(out.value_at(i) == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("adam zero gradient with zero moments is identity") {
  NamedParams params;
  Tensor& w = params.add("w", Tensor::from_data({3}, {1.0, -2.0, 0.5}));
  AdamState state = AdamState::for_params(params, 1e-3);
  w.grad();  // populate zeros
  adam_step(params, state);
  CHECK(w.value_at(0) == 1.0);
  CHECK(w.value_at(1) == -2.0);
  CHECK(w.value_at(2) == 0.5);
  CHECK(state.step_count == 1);
}

TEST_CASE("adam first step moves by about minus lr times sign") {
  for (double g : {3.0, -0.04, 1e-6}) {
    NamedParams params;
    Tensor& w = params.add("w", Tensor::from_data({1}, {0.7}));
    AdamState state = AdamState::for_params(params, 0.01);
    w.grad()[0] = g;
    adam_step(params, state);
    const double update = 0.7 - w.value_at(0);
    CHECK(std::abs(update) >= 0.9 * 0.01);
    CHECK(std::abs(update) <= 0.01 + 1e-12);
    CHECK(update * g > 0.0);  // moved against the gradient
  }
}

TEST_CASE("adam matches hand-stepped two-iteration trace") {
  NamedParams params;
  Tensor& w = params.add("w", Tensor::from_data({1}, {1.5}));
  AdamState state = AdamState::for_params(params, 0.05);
  oracle::AdamTrace trace{1.5};
  const double g = -0.3;
  for (int step = 0; step < 2; ++step) {
    w.grad()[0] = g;
    adam_step(params, state);
    trace.update(g, 0.05, state.beta1, state.beta2, state.epsilon);
    CHECK(w.value_at(0) == Catch::Approx(trace.param).margin(1e-15));
  }
  CHECK(state.step_count == 2);
}

TEST_CASE("adam missing gradient is a contract violation") {
  NamedParams params;
  params.add("w", Tensor::from_data({2}, {1.0, 2.0}));
  AdamState state = AdamState::for_params(params, 1e-3);
  CHECK_THROWS_AS(adam_step(params, state), ContractError);
}

TEST_CASE("gradients accumulate across uses until adam zeroes them") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor loss = sum_all(add(x, x));
  loss.backward();
  CHECK(x.grad()[0] == 2.0);
  Tensor loss2 = sum_all(x);
  loss2.backward();
  CHECK(x.grad()[0] == 3.0);  // accumulated, not reset
}

TEST_CASE("grad_check on linear and quadratic functions") {
  Rng rng(17);
  Tensor x = random_tensor({4}, rng);
  auto res = grad_check([](const Tensor& t) { return sum_all(t); }, x);
  CHECK(res.max_rel_error <= 1e-10);

  Tensor x2 = Tensor::from_data({2}, {1.0, 2.0});
  auto res2 =
      grad_check([](const Tensor& t) { return sum_all(mul(t, t)); }, x2);
  CHECK(res2.ok(1e-8));
}

TEST_CASE("grad_check every primitive op on random inputs") {
  Rng rng(23);
  auto check_many = [&](const char* name, auto make_loss, Shape shape,
                        int trials = 20) {
    for (int trial = 0; trial < trials; ++trial) {
      Tensor x = random_tensor(shape, rng, 0.8);
      auto res = grad_check(make_loss, x);
      INFO(name << " trial " << trial << " err " << res.max_rel_error);
      CHECK(res.ok(1e-4));
    }
  };

  Rng wrng(29);
  Tensor w = random_tensor({3, 5}, wrng, 0.5, true);
  Tensor b = random_tensor({5}, wrng, 0.5, true);
  check_many("linear_x", [&](const Tensor& t) {
    return sum_all(gelu(linear(t, w, b)));
  }, {4, 3});
  check_many("matmul_a", [&](const Tensor& t) {
    return sum_all(matmul(t, w));
  }, {2, 3});
  check_many("softmax", [](const Tensor& t) {
    return sum_all(mul(softmax_lastdim(t), t));
  }, {2, 4});
  Tensor gain = random_tensor({4}, wrng, 0.3, true);
  Tensor bias = random_tensor({4}, wrng, 0.3, true);
  check_many("layer_norm_x", [&](const Tensor& t) {
    return sum_all(mul(layer_norm(t, gain, bias), t));
  }, {3, 4});
  check_many("gelu", [](const Tensor& t) { return sum_all(gelu(t)); }, {6});
  check_many("slice", [](const Tensor& t) {
    return sum_all(gelu(slice_lastdim(t, 1, 2)));
  }, {3, 4});
  check_many("dropout_fixed_mask", [](const Tensor& t) {
    return sum_all(dropout(t, 0.3, true, 99));
  }, {10});
  check_many("mse", [](const Tensor& t) {
    Tensor target = Tensor::zeros(t.shape());
    return masked_mse(t, target, std::vector<std::uint8_t>(t.numel() / 2, 1));
  }, {4, 2});

  // parameters of linear / layer_norm
  Tensor x_fixed = random_tensor({4, 3}, wrng, 0.7);
  auto res_w = grad_check_params(
      [&] { return sum_all(gelu(linear(x_fixed, w, b))); },
      {{"w", w}, {"b", b}});
  CHECK(res_w.ok(1e-4));
  Tensor xg = random_tensor({3, 4}, wrng, 0.7);
  auto res_ln = grad_check_params(
      [&] { return sum_all(mul(layer_norm(xg, gain, bias), xg)); },
      {{"gain", gain}, {"bias", bias}});
  CHECK(res_ln.ok(1e-4));
}

TEST_CASE("gather pack and position ops route gradients exactly") {
  Rng rng(31);
  // gather_rows: pick rows twice so scatter accumulation is exercised
  for (int trial = 0; trial < 20; ++trial) {
    auto res = grad_check(
        [](const Tensor& t) {
          return sum_all(gelu(gather_rows(t, {0, 2, 2, 1})));
        },
        random_tensor({3, 4}, rng));
    CHECK(res.ok(1e-4));
  }
  // pack_rows: broadcast source rows (dummy-token style) accumulate over uses
  for (int trial = 0; trial < 20; ++trial) {
    Tensor shared = random_tensor({2, 3}, rng, 0.5, true);
    Tensor per_row = random_tensor({4, 3}, rng, 0.5, true);
    std::vector<SlotRef> slots = {{0, 0}, {1, 0}, {0, 1}, {1, 1},
                                  {0, 0}, {1, 2}, {-1, 0}, {1, 3}};
    auto res = grad_check_params(
        [&] {
          return sum_all(gelu(pack_rows({shared, per_row}, slots, 3)));
        },
        {{"shared", shared}, {"per_row", per_row}});
    CHECK(res.ok(1e-4));
  }
  // add_position_rows: gradient is the identity on x
  Tensor table = Tensor::from_data({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  auto res = grad_check(
      [&](const Tensor& t) {
        return sum_all(gelu(add_position_rows(t, table, {2, -1, 0, 1})));
      },
      random_tensor({4, 2}, rng));
  CHECK(res.ok(1e-4));
}

TEST_CASE("non-finite op results raise numeric errors") {
  Tensor big = Tensor::filled({2}, 1e308);
  CHECK_THROWS_AS(add(big, big), NumericError);
  CHECK_THROWS_AS(
      Tensor::from_data({1}, {std::numeric_limits<double>::infinity()}),
      NumericError);
}

TEST_CASE("ops are deterministic for identical inputs") {
  Rng rng(41);
  Tensor a = random_tensor({8, 8}, rng);
  Tensor b = random_tensor({8, 8}, rng);
  Tensor c1 = matmul(a, b);
  Tensor c2 = matmul(a, b);
  for (std::size_t i = 0; i < c1.numel(); ++i)
    CHECK(c1.value_at(i) == c2.value_at(i));
  Tensor d1 = dropout(a, 0.5, true, 123);
  Tensor d2 = dropout(a, 0.5, true, 123);
  for (std::size_t i = 0; i < d1.numel(); ++i)
    CHECK(d1.value_at(i) == d2.value_at(i));
}

TEST_CASE("detach blocks gradient flow") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = sum_all(mul(x.detach(), x.detach()));
  CHECK_FALSE(y.requires_grad());
}
