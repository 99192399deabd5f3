// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "support.hpp"
#include "triformer/transformer.hpp"

using namespace triformer;
using triformer::testing::Td;
using triformer::testing::random_tensor;

namespace {

EncoderConfig small_config(std::size_t d, std::size_t heads, std::size_t layers) {
  EncoderConfig c;
  c.d_model = d;
  c.n_heads = heads;
  c.n_layers = layers;
  c.mlp_hidden = 4 * d;
  return c;
}

// Applies a token permutation to x [B, T, d].
Td permute_tokens(const Td& x, const std::vector<std::size_t>& perm) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(x.data().begin() + (n * t + perm[i]) * d, d, out.begin() + (n * t + i) * d);
  return Td(x.shape(), std::move(out));
}

}  // namespace

TEST_CASE("encoder config validation", "[transformer]") {
  CHECK_THROWS_AS(small_config(10, 3, 1).validate(), ValidationError);
  CHECK_NOTHROW(small_config(12, 3, 1).validate());
  CHECK_THROWS_AS(AttentionMask(2, {false, true, true, true}), ValidationError);
  AttentionMask m(3);
  CHECK_THROWS_AS(m.set(1, 1, false), ValidationError);
}

TEST_CASE("attention over one token ignores queries and keys", "[transformer][attention]") {
  ParameterSet<double> params(1);
  MultiHeadAttention<double> mha(ParamScope<double>(params, "mha"), 8, 2);
  testing::randomize(params, 2);
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 1, 8}, rng, -1, 1, false);
  auto y = mha(x);
  auto expect = linear(linear(x, mha.wv, mha.bv), mha.wo, mha.bo);
  for (std::size_t i = 0; i < 8; ++i) CHECK(y.data()[i] == Catch::Approx(expect.data()[i]).epsilon(1e-14));
}

TEST_CASE("identical tokens give identical outputs", "[transformer][attention]") {
  ParameterSet<double> params(4);
  MultiHeadAttention<double> mha(ParamScope<double>(params, "mha"), 8, 4);
  std::mt19937_64 rng(5);
  auto row = random_tensor({1, 1, 8}, rng, -1, 1, false);
  auto x = index_select(reshape(row, {1, 8}), {0, 0, 0, 0, 0});
  auto y = mha(reshape(x, {1, 5, 8}));
  for (std::size_t t = 1; t < 5; ++t)
    for (std::size_t i = 0; i < 8; ++i) CHECK(y.data()[t * 8 + i] == y.data()[i]);
}

TEST_CASE("attention rows sum to one and respect masks", "[transformer][attention]") {
  ParameterSet<double> params(6);
  MultiHeadAttention<double> mha(ParamScope<double>(params, "mha"), 8, 2);
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 5, 8}, rng, -3, 3, false);
  AttentionMask mask(5);
  mask.set(0, 4, false);
  mask.set(2, 1, false);
  const AttentionMask* masks[] = {nullptr, &mask};
  for (const AttentionMask* m : masks) {
    Td weights;
    mha(x, m, &weights);
    REQUIRE(weights.shape() == Shape{2, 2, 5, 5});
    for (std::size_t row = 0; row < 2 * 2 * 5; ++row) {
      double total = 0;
      for (std::size_t k = 0; k < 5; ++k) total += weights.data()[row * 5 + k];
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
    if (m) {
      for (std::size_t bh = 0; bh < 4; ++bh) {
        CHECK(weights.data()[bh * 25 + 0 * 5 + 4] == 0.0);
        CHECK(weights.data()[bh * 25 + 2 * 5 + 1] == 0.0);
      }
    }
  }
  AttentionMask wrong(4);
  CHECK_THROWS_AS(mha(x, &wrong), DimensionError);
}

TEST_CASE("attention gradients match finite differences", "[transformer][attention][fd]") {
  for (int s = 0; s < 10; ++s) {
    ParameterSet<double> params(s);
    MultiHeadAttention<double> mha(ParamScope<double>(params, "mha"), 8, 2);
    testing::randomize(params, 100 + s);
    std::mt19937_64 rng(200 + s);
    auto x = random_tensor({1, 3, 8}, rng);
    auto inputs = testing::all_tensors(params);
    inputs.push_back(&x);
    CHECK(testing::max_grad_error(inputs, [&] { return mha(x); }, s) < 1e-5);
  }
}

TEST_CASE("encoder layer with zeroed output projections is the identity", "[transformer][layer]") {
  ParameterSet<double> params(8);
  EncoderLayer<double> layer(ParamScope<double>(params, "layer"), small_config(8, 2, 1));
  testing::randomize(params, 9);
  testing::zero_fill(layer.attn.wo);
  testing::zero_fill(layer.attn.bo);
  testing::zero_fill(layer.fc2.weight);
  testing::zero_fill(layer.fc2.bias);
  std::mt19937_64 rng(10);
  auto x = random_tensor({2, 6, 8}, rng, -1, 1, false);
  auto y = layer(x, {});
  CHECK(testing::bitwise_equal(y.data(), x.data()));
}

TEST_CASE("encoder layer preserves shape and passes a gradient check", "[transformer][layer][fd]") {
  std::mt19937_64 shapes(11);
  for (int s = 0; s < 5; ++s) {
    const std::size_t b = 1 + shapes() % 3, t = 1 + shapes() % 6;
    ParameterSet<double> params(s);
    EncoderLayer<double> layer(ParamScope<double>(params, "layer"), small_config(8, 2, 1));
    std::mt19937_64 rng(300 + s);
    CHECK(layer(random_tensor({b, t, 8}, rng, -1, 1, false), {}).shape() == Shape{b, t, 8});
  }
  for (int s = 0; s < 10; ++s) {
    ParameterSet<double> params(s);
    EncoderLayer<double> layer(ParamScope<double>(params, "layer"), small_config(4, 2, 1));
    testing::randomize(params, 400 + s);
    std::mt19937_64 rng(500 + s);
    auto x = random_tensor({1, 3, 4}, rng);
    auto inputs = testing::all_tensors(params);
    inputs.push_back(&x);
    CHECK(testing::max_grad_error(inputs, [&] { return layer(x, {}); }, s) < 1e-4);
  }
}

TEST_CASE("empty encoder stack is only the final norm", "[transformer][stack]") {
  ParameterSet<double> params(12);
  EncoderStack<double> stack(ParamScope<double>(params, "enc"), small_config(8, 2, 0));
  CHECK(stack.layers.empty());
  CHECK(params.size() == 2);
  std::mt19937_64 rng(13);
  auto x = random_tensor({1, 4, 8}, rng, -1, 1, false);
  CHECK(testing::bitwise_equal(stack(x).data(), stack.norm(x).data()));
}

TEST_CASE("encoder stack parameter names follow the naming scheme", "[transformer][stack]") {
  ParameterSet<double> params(14);
  EncoderStack<double> stack(ParamScope<double>(params, "image.encoder"), small_config(8, 2, 2));
  CHECK(params.find("image.encoder.layer0.attn.wq") != nullptr);
  CHECK(params.find("image.encoder.layer1.mlp.fc2.bias") != nullptr);
  CHECK(params.find("image.encoder.norm.gain") != nullptr);
}

TEST_CASE("encoder stack is permutation equivariant", "[transformer][stack]") {
  for (int s = 0; s < 10; ++s) {
    ParameterSet<double> params(s);
    EncoderStack<double> stack(ParamScope<double>(params, "enc"), small_config(8, 2, 2));
    testing::randomize(params, 600 + s);
    std::mt19937_64 rng(700 + s);
    auto x = random_tensor({2, 7, 8}, rng, -1, 1, false);
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permuted_then_encoded = stack(permute_tokens(x, perm));
    auto encoded_then_permuted = permute_tokens(stack(x), perm);
    double worst = 0;
    for (std::size_t i = 0; i < x.numel(); ++i)
      worst = std::max(worst, std::abs(permuted_then_encoded.data()[i] - encoded_then_permuted.data()[i]));
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("encoder stack is deterministic", "[transformer][stack]") {
  ParameterSet<float> params(15);
  EncoderStack<float> stack(ParamScope<float>(params, "enc"), small_config(16, 4, 2));
  Tensor<float> x(Shape{1, 9, 16});
  std::mt19937_64 rng(16);
  std::normal_distribution<float> n;
  for (auto& v : x.mutable_data()) v = n(rng);
  CHECK(testing::bitwise_equal(stack(x).data(), stack(x).data()));
}
