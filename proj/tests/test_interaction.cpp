#include "doctest.h"
#include "hsia/interaction.hpp"
#include "hsia/rng.hpp"

#include <cmath>

using namespace hsia;

TEST_CASE("gate gamma matches sigmoid(linear(concat)) per token") {
  int t = 7, d = 6;
  auto a = tensor_uniform<double>({t, d}, 1, -2, 2);
  auto b = tensor_uniform<double>({t, d}, 2, -2, 2);
  auto w = tensor_uniform<double>({2 * d, 1}, 3, -1, 1);
  auto bias = tensor_uniform<double>({1}, 4, -1, 1);
  auto g = gate_gamma(a, b, w, bias);
  REQUIRE(g->shape == Shape{t, 1});
  for (int i = 0; i < t; ++i) {
    double z = bias->data[0];
    for (int j = 0; j < d; ++j) z += a->data[i * d + j] * w->data[j];
    for (int j = 0; j < d; ++j) z += b->data[i * d + j] * w->data[d + j];
    double want = 1.0 / (1.0 + std::exp(-z));
    CHECK(g->data[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("gate blend lies between its inputs coordinate-wise") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    int t = 1 + static_cast<int>(rng.below(6)), d = 1 + static_cast<int>(rng.below(8));
    auto a = tensor_uniform<float>({t, d}, 1000 + trial, -3, 3);
    auto b = tensor_uniform<float>({t, d}, 2000 + trial, -3, 3);
    auto g = make_tensor<float>(Shape{t, 1});
    for (auto& v : g->data) v = static_cast<float>(rng.uniform(0, 1));
    auto y = gate_blend(b, a, g);  // vit=b, injected=a
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) {
        float lo = std::min(a->data[i * d + j], b->data[i * d + j]);
        float hi = std::max(a->data[i * d + j], b->data[i * d + j]);
        CHECK(y->data[i * d + j] >= lo);
        CHECK(y->data[i * d + j] <= hi);
      }
  }
}

TEST_CASE("gate blend is exact at the gamma endpoints") {
  auto a = tensor_uniform<float>({5, 4}, 11, -2, 2);
  auto b = tensor_uniform<float>({5, 4}, 12, -2, 2);
  auto g0 = tensor_zeros<float>({5, 1});
  auto g1 = tensor_ones<float>({5, 1});
  CHECK(gate_blend(b, a, g0)->data == b->data);  // gamma 0: keep the vit stream
  CHECK(gate_blend(b, a, g1)->data == a->data);  // gamma 1: take the injected stream
  // mixed per-token endpoints
  auto gm = tensor_from<float>({5, 1}, {0, 1, 0, 1, 0});
  auto y = gate_blend(b, a, gm);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(y->data[i * 4 + j] == ((i % 2) ? a->data[i * 4 + j] : b->data[i * 4 + j]));
}

TEST_CASE("gate gradients match finite differences") {
  int t = 3, d = 4;
  auto a = tensor_uniform<double>({t, d}, 21, -1, 1);
  auto b = tensor_uniform<double>({t, d}, 22, -1, 1);
  auto w = tensor_uniform<double>({2 * d, 1}, 23, -1, 1);
  auto bias = tensor_uniform<double>({1}, 24, -1, 1);
  auto wsum = tensor_uniform<double>({t, d}, 25, -1, 1);
  a->requires_grad = b->requires_grad = w->requires_grad = bias->requires_grad = true;
  auto loss_of = [&]() {
    auto y = gate_blend(b, a, gate_gamma(b, a, w, bias));
    return sum(mul(y, wsum));
  };
  auto loss = loss_of();
  backward(loss);
  for (auto& leaf : {a, b, w, bias}) {
    auto fd = finite_diff_grad([&]() { NoGradGuard ng; return loss_of()->data[0]; }, leaf, 1e-6);
    REQUIRE(leaf->grad.size() == fd.size());
    for (std::size_t i = 0; i < fd.size(); ++i)
      CHECK(leaf->grad[i] == doctest::Approx(fd[i]).epsilon(1e-5));
  }
}

TEST_CASE("zero-initialized injector returns the vit stream bit-for-bit") {
  InteractionConfig cfg;
  cfg.dim = 16;
  cfg.deform_heads = 4;
  cfg.deform_points = 2;
  ModelParamsT<float> params;
  Rng rng(31);
  InteractionBlockT<float> blk(params, "blk", cfg, rng);
  auto spec = LevelSpec::from_levels({{4, 8}, {2, 4}, {1, 2}});
  auto f_spm = tensor_uniform<float>({spec.total(), 16}, 32, -1, 1);
  auto x_vit = tensor_uniform<float>({12, 16}, 33, -1, 1);
  auto refs_v = grid_centers<float>(3, 4);
  NoGradGuard ng;
  auto injected = blk.inject(x_vit, f_spm, spec, refs_v);
  CHECK(injected->data == x_vit->data);  // bitwise
  auto fused = blk.gate(x_vit, injected);
  CHECK(fused->data == x_vit->data);  // bitwise
}

TEST_CASE("zero-initialized extractor and feedback pass the pyramid through") {
  InteractionConfig cfg;
  cfg.dim = 16;
  cfg.deform_heads = 2;
  cfg.deform_points = 2;
  ModelParamsT<float> params;
  Rng rng(41);
  InteractionBlockT<float> blk(params, "blk", cfg, rng);
  auto vit_spec = LevelSpec::from_levels({{3, 4}});
  auto x_patches = tensor_uniform<float>({12, 16}, 42, -1, 1);
  auto f_spm = tensor_uniform<float>({20, 16}, 43, -1, 1);
  auto spm_refs = grid_centers<float>(4, 5);
  NoGradGuard ng;
  auto ext = blk.extract(f_spm, x_patches, vit_spec, spm_refs);
  CHECK(ext->data == f_spm->data);
  auto fb = blk.feedback(ext, x_patches);
  CHECK(fb->data == f_spm->data);
}

TEST_CASE("gate bias initialization keeps early gamma small") {
  InteractionConfig cfg;
  cfg.dim = 8;
  cfg.deform_heads = 2;
  cfg.deform_points = 2;
  ModelParamsT<float> params;
  Rng rng(51);
  InteractionBlockT<float> blk(params, "blk", cfg, rng);
  auto b = params.at("blk.gate.bias");
  CHECK(b->data[0] == doctest::Approx(-2.0f));
  // sigmoid(-2) ~ 0.119 before the tiny weight term moves it
  auto x = tensor_uniform<float>({6, 8}, 52, -1, 1);
  auto g = gate_gamma(x, x, params.at("blk.gate.weight"), b);
  for (float v : g->data) CHECK(v == doctest::Approx(0.119).epsilon(0.2));
}

TEST_CASE("output assembler shapes and residual upsampling") {
  ModelParamsT<float> params;
  Rng rng(61);
  OutputAssemblerT<float> asmbl(params, "asm", 16, rng);
  auto c1 = tensor_uniform<float>({16, 8, 12}, 62, -1, 1);
  auto spec = LevelSpec::from_levels({{4, 6}, {2, 3}, {1, 2}});
  auto f_spm = tensor_uniform<float>({spec.total(), 16}, 63, -1, 1);
  NoGradGuard ng;
  auto pyr = asmbl.forward(f_spm, c1, spec);
  CHECK(pyr[0]->shape == Shape{16, 8, 12});
  CHECK(pyr[1]->shape == Shape{16, 4, 6});
  CHECK(pyr[2]->shape == Shape{16, 2, 3});
  CHECK(pyr[3]->shape == Shape{16, 1, 2});
}
