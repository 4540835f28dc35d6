#include "doctest.h"
#include "hsia/prior.hpp"
#include "hsia/vit.hpp"

#include <cmath>

using namespace hsia;

TEST_CASE("band_embed writes v*w + b + band_embedding per token") {
  int n = 4, h = 2, w = 3, d = 5;
  auto cube = tensor_uniform<float>({n, h, w}, 1, -1, 1);
  auto pw = tensor_uniform<float>({d}, 2, -1, 1);
  auto pb = tensor_uniform<float>({d}, 3, -1, 1);
  auto be = tensor_uniform<float>({n, d}, 4, -1, 1);
  auto tok = band_embed(cube, pw, pb, be);
  REQUIRE(tok->shape == Shape{n * h * w, d});
  for (int pi = 0; pi < h * w; ++pi)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        float v = cube->data[i * h * w + pi];
        float want = v * pw->data[j] + pb->data[j] + be->data[i * d + j];
        CHECK(tok->data[(pi * n + i) * d + j] == doctest::Approx(want).epsilon(1e-6));
      }
}

TEST_CASE("spectral encoding is invariant to the pixel tile size") {
  SpectralConfig cfg;
  cfg.bands = 6;
  cfg.d_s = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  auto run = [&](int tile) {
    cfg.tile_pixels = tile;
    ModelParamsT<float> params;
    Rng rng(33);
    SpectralTransformerT<float> sp(params, "spectral", cfg, rng);
    auto cube = tensor_uniform<float>({6, 5, 7}, 44, 0, 1);
    NoGradGuard ng;
    return sp.transform(cube);
  };
  auto whole = run(0);
  auto tiled = run(4);  // 35 pixels in tiles of 4
  REQUIRE(whole->shape == tiled->shape);
  for (std::size_t i = 0; i < whole->data.size(); ++i)
    CHECK(whole->data[i] == doctest::Approx(tiled->data[i]).epsilon(1e-5));
}

TEST_CASE("per-pixel attention: one pixel's spectrum does not affect another") {
  SpectralConfig cfg;
  cfg.bands = 5;
  cfg.d_s = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  ModelParamsT<float> params;
  Rng rng(7);
  SpectralTransformerT<float> sp(params, "spectral", cfg, rng);
  auto cube = tensor_uniform<float>({5, 2, 2}, 8, 0, 1);
  NoGradGuard ng;
  auto base = sp.transform(cube);
  auto cube2 = tensor_from<float>(cube->shape, cube->data);
  // perturb all bands of the last pixel only
  for (int b = 0; b < 5; ++b) cube2->data[b * 4 + 3] += 0.5f;
  auto mod = sp.transform(cube2);
  for (int c = 0; c < 3; ++c)
    for (int pi = 0; pi < 3; ++pi)
      CHECK(mod->data[c * 4 + pi] == base->data[c * 4 + pi]);
  CHECK(mod->data[3] != base->data[3]);
}

TEST_CASE("positional embedding resampling is identity at the native grid") {
  ViTConfig cfg;
  cfg.dim = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.stages = {{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  cfg.pretrain_size = 14 * 6;  // native grid 6x6
  ModelParamsT<float> params;
  Rng rng(12);
  ViTBackboneT<float> vit(params, "vit", cfg, rng);
  NoGradGuard ng;
  auto pos = vit.resampled_pos_embed(6, 6);
  auto stored = params.at("vit.pos_embed");
  REQUIRE(pos->shape == stored->shape);
  for (std::size_t i = 0; i < pos->data.size(); ++i)
    CHECK(pos->data[i] == doctest::Approx(stored->data[i]).epsilon(1e-5));
}

TEST_CASE("patch embedding obeys the token count law") {
  ViTConfig cfg;
  cfg.dim = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.stages = {{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  ModelParamsT<float> params;
  Rng rng(13);
  ViTBackboneT<float> vit(params, "vit", cfg, rng);
  NoGradGuard ng;
  for (auto [h, w] : std::vector<std::pair<int, int>>{{28, 56}, {42, 42}, {70, 28}}) {
    auto img = tensor_uniform<float>({3, h, w}, 14, -1, 1);
    auto st = vit.patch_embed(img);
    CHECK(st.grid_h == h / 14);
    CHECK(st.grid_w == w / 14);
    CHECK(st.tokens->shape == Shape{1 + (h / 14) * (w / 14), 16});
  }
  auto bad = tensor_uniform<float>({4, 28, 28}, 15, -1, 1);
  CHECK_THROWS_AS(vit.patch_embed(bad), ContractError);
}

TEST_CASE("vit stage boundaries are validated") {
  ViTConfig cfg;
  cfg.dim = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.stages = {{0, 1}, {2, 2}};  // does not cover [0,4)
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.stages = {{0, 1}, {1, 3}};  // overlap
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.stages = {{0, 1}, {2, 3}};
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("running all vit stages equals running blocks in order") {
  ViTConfig cfg;
  cfg.dim = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.stages = {{0, 1}, {2, 3}};
  ModelParamsT<float> params;
  Rng rng(21);
  ViTBackboneT<float> vit(params, "vit", cfg, rng);
  NoGradGuard ng;
  auto img = tensor_uniform<float>({3, 28, 28}, 22, -1, 1);
  auto st = vit.patch_embed(img);
  auto x = vit.run_stage(st.tokens, 0);
  x = vit.run_stage(x, 1);
  CHECK(x->shape == Shape{1 + 4, 16});
  CHECK_THROWS_AS(vit.run_stage(x, 2), ContractError);
}

TEST_CASE("prior pyramid has strides 4/8/16/32 and a matching level spec") {
  PriorConfig cfg;
  cfg.bands = 6;
  ModelParamsT<float> params;
  BufferRegistryT<float> buffers;
  Rng rng(31);
  SpatialPriorT<float> prior(params, buffers, "prior", cfg, rng);
  auto cube = tensor_uniform<float>({6, 64, 96}, 32, 0, 1);
  NoGradGuard ng;
  auto pyr = prior.forward(cube, false);
  CHECK(pyr.c1->shape[1] == 16);
  CHECK(pyr.c1->shape[2] == 24);
  CHECK(pyr.c2->shape[1] == 8);
  CHECK(pyr.c2->shape[2] == 12);
  CHECK(pyr.c3->shape[1] == 4);
  CHECK(pyr.c3->shape[2] == 6);
  CHECK(pyr.c4->shape[1] == 2);
  CHECK(pyr.c4->shape[2] == 3);
  CHECK(pyr.spec.total() == 8 * 12 + 4 * 6 + 2 * 3);
  // all levels share the interaction width
  CHECK(pyr.c1->shape[0] == pyr.c2->shape[0]);
  CHECK(pyr.c2->shape[0] == pyr.c4->shape[0]);
}
