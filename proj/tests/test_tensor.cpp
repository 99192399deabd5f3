// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <random>

#include "support.hpp"
#include "triformer/adam.hpp"
#include "triformer/checkpoint.hpp"
#include "triformer/ops.hpp"
#include "triformer/parameters.hpp"

using namespace triformer;
using triformer::testing::Td;
using triformer::testing::max_grad_error;
using triformer::testing::random_tensor;
using Catch::Approx;

namespace {

constexpr int kSeeds = 10;
constexpr double kOpTolerance = 1e-5;

// Values at least `gap` away from zero, for kinked elementwise ops.
Td away_from_zero(Shape shape, std::mt19937_64& rng, double gap) {
  Td t = random_tensor(std::move(shape), rng);
  for (auto& v : t.mutable_data()) {
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  }
  return t;
}

}  // namespace

TEST_CASE("matmul hand-computed cases", "[tensor][matmul]") {
  auto eye = Td::from({2, 2}, {1, 0, 0, 1});
  auto b = Td::from({2, 2}, {1, 2, 3, 4});
  auto c = matmul(eye, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3, 4});

  auto row = Td::from({1, 2}, {1, 2});
  auto col = Td::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes", "[tensor][matmul]") {
  Td a({2, 3}), b({4, 5});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences", "[tensor][matmul][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(100 + s);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    CHECK(max_grad_error({&a, &b}, [&] { return matmul(a, b); }, s) < kOpTolerance);

    auto ba = random_tensor({2, 3, 4}, rng);
    auto bb = random_tensor({2, 5, 4}, rng);
    CHECK(max_grad_error({&ba, &bb}, [&] { return matmul(ba, bb, true); }, s) < kOpTolerance);

    auto shared = random_tensor({4, 2}, rng);
    CHECK(max_grad_error({&ba, &shared}, [&] { return matmul(ba, shared); }, s) < kOpTolerance);
  }
}

TEST_CASE("conv3d identity and counting kernels", "[tensor][conv3d]") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({1, 3, 3, 3}, rng, 0, 1, false);
  auto k1 = Td({1, 1, 1, 1, 1}, 1.0);
  auto y = conv3d(x, k1, Td(), 1, 0);
  CHECK(testing::bitwise_equal(y.data(), x.data()));

  auto ones = Td({1, 3, 3, 3}, 1.0);
  auto k3 = Td({1, 1, 3, 3, 3}, 1.0);
  auto z = conv3d(ones, k3, Td(), 1, 1);
  CHECK(z.shape() == Shape{1, 3, 3, 3});
  CHECK(z.at({0, 1, 1, 1}) == 27.0);
  CHECK(z.at({0, 0, 0, 0}) == 8.0);
}

TEST_CASE("conv3d rejects a kernel larger than the padded input", "[tensor][conv3d]") {
  Td x({1, 2, 2, 2}), k({1, 1, 5, 5, 5});
  CHECK_THROWS_AS(conv3d(x, k, Td(), 1, 0), DimensionError);
}

TEST_CASE("conv3d gradients match finite differences", "[tensor][conv3d][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(200 + s);
    auto x = random_tensor({2, 4, 4, 4}, rng);
    auto k = random_tensor({3, 2, 3, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    CHECK(max_grad_error({&x, &k, &b}, [&] { return conv3d(x, k, b); }, s) < kOpTolerance);
  }
}

TEST_CASE("avg_pool3d and strided conv gradients", "[tensor][conv3d][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(250 + s);
    auto x = random_tensor({2, 4, 4, 4}, rng);
    CHECK(max_grad_error({&x}, [&] { return avg_pool3d(x, 2); }, s) < kOpTolerance);
    auto k = random_tensor({1, 2, 3, 3, 3}, rng);
    CHECK(max_grad_error({&x, &k}, [&] { return conv3d(x, k, Td(), 2, 1); }, s) < kOpTolerance);
  }
}

TEST_CASE("softmax examples and row sums", "[tensor][softmax]") {
  auto u = softmax(Td::from({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == Approx(1.0 / 3.0).epsilon(1e-15));

  auto big = softmax(Td::from({3}, {1000, 0, 0}), 0);
  CHECK(big.data()[0] == Approx(1.0));
  CHECK(big.data()[1] >= 0.0);
  CHECK(std::isfinite(big.data()[1]));

  std::mt19937_64 rng(3);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto x = random_tensor({3, 4, 5}, rng, -20, 20, false);
    auto y = softmax(x, axis);
    Shape s = y.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
    for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0;
        for (std::size_t k = 0; k < s[axis]; ++k) {
          const double v = y.data()[(o * s[axis] + k) * inner + i];
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("softmax gradients match finite differences", "[tensor][softmax][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(300 + s);
    auto v = random_tensor({5}, rng, -3, 3);
    CHECK(max_grad_error({&v}, [&] { return softmax(v, 0); }, s) < 1e-6);
    auto m = random_tensor({2, 3, 4}, rng, -3, 3);
    CHECK(max_grad_error({&m}, [&] { return softmax(m, 1); }, s) < kOpTolerance);
  }
}

TEST_CASE("layer_norm examples", "[tensor][layer_norm]") {
  auto one = Td({3}, 1.0), zero = Td({3}, 0.0);
  auto y = layer_norm(Td::from({1, 3}, {5, 5, 5}), one, zero, 1e-5);
  for (double v : y.data()) CHECK(v == 0.0);

  auto g2 = Td({2}, 1.0), b2 = Td({2}, 0.0);
  auto z = layer_norm(Td::from({1, 2}, {1, -1}), g2, b2, 1e-5);
  CHECK(z.data()[0] == Approx(1.0).epsilon(1e-5));
  CHECK(z.data()[1] == Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm gradients match finite differences", "[tensor][layer_norm][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(400 + s);
    auto x = random_tensor({8}, rng, -2, 2);
    auto g = random_tensor({8}, rng);
    auto b = random_tensor({8}, rng);
    CHECK(max_grad_error({&x, &g, &b}, [&] { return layer_norm(x, g, b, 1e-5); }, s) < kOpTolerance);
    auto m = random_tensor({3, 8}, rng, -2, 2);
    CHECK(max_grad_error({&m, &g, &b}, [&] { return layer_norm(m, g, b, 1e-5); }, s) < kOpTolerance);
  }
}

TEST_CASE("relu and gelu values", "[tensor][activation]") {
  auto r = relu(Td::from({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{0, 0, 2});
  CHECK(gelu(Td::from({1}, {0})).item() == 0.0);
  CHECK(gelu(Td::from({1}, {1})).item() == Approx(0.8413447460685429));
}

TEST_CASE("relu and gelu gradients away from zero", "[tensor][activation][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(500 + s);
    auto x = away_from_zero({16}, rng, 1e-3);
    CHECK(max_grad_error({&x}, [&] { return relu(x); }, s) < kOpTolerance);
    CHECK(max_grad_error({&x}, [&] { return gelu(x); }, s) < kOpTolerance);
  }
}

TEST_CASE("cross_entropy values and label validation", "[tensor][loss]") {
  std::vector<int> zero{0};
  CHECK(cross_entropy(Td::from({1, 2}, {0, 0}), zero).item() == Approx(std::log(2.0)).epsilon(1e-12));
  auto confident = cross_entropy(Td::from({1, 2}, {100, 0}), zero).item();
  CHECK(std::isfinite(confident));
  CHECK(confident == Approx(0.0).margin(1e-40));
  std::vector<int> bad{2};
  CHECK_THROWS_AS(cross_entropy(Td::from({1, 2}, {0, 0}), bad), ValidationError);
}

TEST_CASE("cross_entropy gradients match finite differences", "[tensor][loss][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(600 + s);
    auto logits = random_tensor({4, 2}, rng, -3, 3);
    std::vector<int> labels{0, 1, 1, 0};
    auto loss = [&] { return cross_entropy(logits, labels); };
    CHECK(max_grad_error({&logits}, loss, s) < kOpTolerance);

    // Closed form: (softmax - onehot) / B.
    logits.zero_grad();
    loss().backward();
    for (std::size_t b = 0; b < 4; ++b) {
      auto p = softmax_values<double>(logits.data().subspan(2 * b, 2));
      for (int c = 0; c < 2; ++c) {
        const double expect = (p[c] - (labels[b] == c ? 1.0 : 0.0)) / 4.0;
        CHECK(logits.grad()[2 * b + c] == Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("elementwise, reduction and re-indexing ops match finite differences", "[tensor][fd]") {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(700 + s);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 3, 4}, rng);
    auto tail = random_tensor({4}, rng);
    CHECK(max_grad_error({&a, &b}, [&] { return add(a, b); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a, &tail}, [&] { return sub(a, tail); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a, &tail}, [&] { return mul(a, tail); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a, &b}, [&] { return mul(a, b); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return scale(a, 2.5); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return mean(a); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return mean_last(a); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return reshape(a, {6, 4}); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return permute(a, {2, 0, 1}); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return narrow(a, 1, 1, 2); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a, &b}, [&] { return concat<double>({a, b, a}, 2); }, s) < kOpTolerance);
    CHECK(max_grad_error({&a}, [&] { return index_select(a, {1, 0, 1}); }, s) < kOpTolerance);

    auto x = random_tensor({3, 5}, rng);
    auto w = random_tensor({5, 2}, rng);
    auto bias = random_tensor({2}, rng);
    CHECK(max_grad_error({&x, &w, &bias}, [&] { return linear(x, w, bias); }, s) < kOpTolerance);
  }
}

TEST_CASE("backward contract and accumulation", "[tensor][backward]") {
  auto x = Td({3}, 2.0);
  x.set_requires_grad(true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  std::mt19937_64 rng(9);
  auto y = random_tensor({4}, rng);
  auto single = [&] { return sum(mul(y, y)); };
  y.zero_grad();
  single().backward();
  std::vector<double> once(y.grad().begin(), y.grad().end());
  y.zero_grad();
  add(single(), single()).backward();
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(y.grad()[i] == 2 * once[i]);

  CHECK_THROWS_AS(mul(y, y).backward(), ContractError);
}

TEST_CASE("gradient accumulation does not depend on branch creation order", "[tensor][backward]") {
  std::mt19937_64 rng(11);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 4}, rng);
  auto branch_a = [&] { return sum(gelu(matmul(x, w))); };
  auto branch_b = [&] { return sum(mul(softmax(x, 1), x)); };

  x.zero_grad();
  w.zero_grad();
  {
    auto a = branch_a();
    auto b = branch_b();
    add(a, b).backward();
  }
  std::vector<double> gx1(x.grad().begin(), x.grad().end());
  std::vector<double> gw1(w.grad().begin(), w.grad().end());

  x.zero_grad();
  w.zero_grad();
  {
    auto b = branch_b();
    auto a = branch_a();
    add(a, b).backward();
  }
  for (std::size_t i = 0; i < gx1.size(); ++i) CHECK(std::abs(x.grad()[i] - gx1[i]) <= 1e-12);
  for (std::size_t i = 0; i < gw1.size(); ++i) CHECK(std::abs(w.grad()[i] - gw1[i]) <= 1e-12);
}

TEST_CASE("no-grad guard suppresses taping", "[tensor][backward]") {
  std::mt19937_64 rng(12);
  auto x = random_tensor({3}, rng);
  Td y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("Adam closed forms", "[tensor][adam]") {
  SECTION("zero gradient leaves parameters unchanged") {
    ParameterSet<double> params(1);
    auto p = params.create("p", {5}, InitSpec::fan_in(3));
    std::vector<double> before(p.data().begin(), p.data().end());
    Adam<double> adam(params, {});
    for (int i = 0; i < 10; ++i) {
      adam.zero_grad();
      sum(scale(p, 0.0)).backward();
      adam.step();
    }
    CHECK(testing::bitwise_equal(p.data(), before));
  }

  SECTION("first step with unit gradient") {
    ParameterSet<double> params(1);
    auto p = params.create("p", {1}, InitSpec::zeros());
    Adam<double> adam(params, {});
    adam.zero_grad();
    sum(p).backward();
    adam.step();
    CHECK(p.item() == Approx(-1e-4).epsilon(1e-6));
    CHECK(adam.steps() == 1);
  }

  SECTION("(p - 3)^2 follows the scalar recurrence") {
    ParameterSet<double> params(1);
    auto p = params.create("p", {1}, InitSpec::zeros());
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam<double> adam(params, cfg);
    auto three = Td::scalar(3.0);

    double q = 0, m = 0, v = 0;
    for (int t = 1; t <= 100; ++t) {
      adam.zero_grad();
      auto diff = sub(p, three);
      sum(mul(diff, diff)).backward();
      adam.step();

      const double g = 2 * (q - 3);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mhat = m / (1 - std::pow(0.9, t));
      const double vhat = v / (1 - std::pow(0.999, t));
      q -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
      REQUIRE(std::abs(p.item() - q) <= 1e-12);
    }
    CHECK(std::abs(p.item() - 3.0) < 0.05);
  }

  SECTION("missing gradient names the parameter") {
    ParameterSet<double> params(1);
    params.create("alpha", {2}, InitSpec::zeros());
    Adam<double> adam(params, {});
    adam.zero_grad();
    try {
      adam.step();
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("alpha") != std::string::npos);
    }
  }
}

TEST_CASE("checkpoint round trip and error paths", "[tensor][checkpoint]") {
  auto dir = testing::temp_dir("ckpt");
  ParameterSet<float> params(5);
  auto a = params.create("layer.weight", {3, 4}, InitSpec::fan_in(3));
  auto b = params.create("layer.bias", {4}, InitSpec::embedding());
  Adam<float> adam(params, {});
  adam.zero_grad();
  sum(mul(a, a)).backward();
  sum(b).backward();
  adam.step();
  save_checkpoint(dir / "m.ckpt", params, &adam);

  ParameterSet<float> other(99);
  auto a2 = other.create("layer.weight", {3, 4}, InitSpec::fan_in(3));
  auto b2 = other.create("layer.bias", {4}, InitSpec::embedding());
  Adam<float> adam2(other, {});
  load_checkpoint(dir / "m.ckpt", other, &adam2);
  CHECK(testing::bitwise_equal(a2.data(), a.data()));
  CHECK(testing::bitwise_equal(b2.data(), b.data()));
  CHECK(adam2.steps() == 1);
  CHECK(adam2.first_moments() == adam.first_moments());
  CHECK(adam2.second_moments() == adam.second_moments());

  auto records = read_checkpoint_records(dir / "m.ckpt");
  CHECK(records.size() == 2 + 2 * 2 + 1);
  CHECK(records.back().name == "adam.t");

  SECTION("bad magic") {
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOPE0000";
    CHECK_THROWS_AS(read_checkpoint_records(dir / "bad.ckpt"), FormatError);
  }
  SECTION("truncated file") {
    auto size = std::filesystem::file_size(dir / "m.ckpt");
    std::filesystem::copy_file(dir / "m.ckpt", dir / "t.ckpt");
    std::filesystem::resize_file(dir / "t.ckpt", size - 3);
    CHECK_THROWS_AS(read_checkpoint_records(dir / "t.ckpt"), FormatError);
  }
  SECTION("shape mismatch") {
    ParameterSet<float> wrong(1);
    wrong.create("layer.weight", {4, 3}, InitSpec::zeros());
    wrong.create("layer.bias", {4}, InitSpec::zeros());
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", wrong), FormatError);
  }
  SECTION("missing parameter") {
    ParameterSet<float> more(1);
    more.create("layer.weight", {3, 4}, InitSpec::zeros());
    more.create("layer.bias", {4}, InitSpec::zeros());
    more.create("layer.extra", {1}, InitSpec::zeros());
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", more), FormatError);
  }
}

TEST_CASE("parameter initialisation is seed-determined and precision independent", "[tensor][init]") {
  ParameterSet<float> f(42);
  ParameterSet<double> d(42);
  auto wf = f.create("w", {8, 8}, InitSpec::fan_in(8));
  auto wd = d.create("w", {8, 8}, InitSpec::fan_in(8));
  for (std::size_t i = 0; i < wf.numel(); ++i) {
    CHECK(wf.data()[i] == static_cast<float>(wd.data()[i]));
    CHECK(std::abs(wd.data()[i]) <= std::sqrt(1.0 / 8));
  }
  CHECK_THROWS(f.create("w", {1}, InitSpec::zeros()));
}
