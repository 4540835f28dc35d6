#include "doctest.h"
#include "deform_oracle.hpp"
#include "hsia/ops.hpp"
#include "hsia/rng.hpp"

#include <cmath>

using namespace hsia;

namespace {

template <class T>
double max_abs_diff_vs_oracle(std::uint64_t seed, int d, int heads, int points,
                              std::vector<std::pair<int, int>> levels, int q_count) {
  Rng rng(seed);
  auto spec = LevelSpec::from_levels(levels);
  auto query = tensor_uniform<T>({q_count, d}, seed + 11, -1, 1);
  auto value = tensor_uniform<T>({spec.total(), d}, seed + 12, -1, 1);
  std::vector<T> refs(static_cast<std::size_t>(q_count) * 2);
  for (auto& r : refs) r = static_cast<T>(rng.uniform(0.05, 0.95));
  auto params = oracle::random_deform_params<T>(d, heads, points, spec.num_levels(), seed + 20);
  auto out = ms_deform_attn(query, value, spec, refs, params);
  auto ref = oracle::ms_deform_naive(query->data, value->data, spec, refs, params, q_count, d);
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(out->data[i]) - ref[i]));
  return worst;
}

}  // namespace

TEST_CASE("ms_deform_attn matches the naive loop on 60 random configs (double)") {
  Rng pick(424242);
  int worst_cfg = -1;
  double worst = 0;
  for (int t = 0; t < 60; ++t) {
    int heads = 1 << pick.below(3);               // 1,2,4
    int d = heads * (2 + static_cast<int>(pick.below(4)));
    int points = 1 + static_cast<int>(pick.below(5));
    int nl = 1 + static_cast<int>(pick.below(3));
    std::vector<std::pair<int, int>> levels;
    for (int l = 0; l < nl; ++l)
      levels.push_back({2 + static_cast<int>(pick.below(7)), 2 + static_cast<int>(pick.below(9))});
    int q = 1 + static_cast<int>(pick.below(12));
    double diff = max_abs_diff_vs_oracle<double>(1000 + t, d, heads, points, levels, q);
    if (diff > worst) {
      worst = diff;
      worst_cfg = t;
    }
  }
  INFO("worst config " << worst_cfg << " diff " << worst);
  CHECK(worst < 1e-5);
}

TEST_CASE("ms_deform_attn matches the naive loop at production geometry") {
  // 8 heads x 4 points over a three-level pyramid, as used by the injector
  double diff = max_abs_diff_vs_oracle<double>(777, 96, 8, 4, {{8, 16}, {4, 8}, {2, 4}}, 32);
  CHECK(diff < 1e-5);
  // float path stays within single-precision noise of the double oracle
  double f32 = max_abs_diff_vs_oracle<float>(778, 32, 8, 4, {{8, 16}, {4, 8}, {2, 4}}, 16);
  CHECK(f32 < 1e-3);
}

TEST_CASE("attention weights normalize jointly across levels and points") {
  // With zero offsets and a value map that is constant 1 within each level,
  // joint softmax over (levels x points) makes the sampled mix exactly 1.
  auto spec = LevelSpec::from_levels({{4, 4}, {2, 2}});
  int d = 8, heads = 2, points = 3;
  MsDeformParams<double> p = oracle::random_deform_params<double>(d, heads, points, 2, 99);
  // identity value projection, zero offsets, zero output mixing except identity
  p.w_value = tensor_zeros<double>({d, d});
  for (int i = 0; i < d; ++i) p.w_value->data[i * d + i] = 1.0;
  p.b_value = tensor_zeros<double>({d});
  p.w_offset = tensor_zeros<double>({d, heads * 2 * points * 2});
  p.b_offset = tensor_zeros<double>({heads * 2 * points * 2});
  p.w_out = tensor_zeros<double>({d, d});
  for (int i = 0; i < d; ++i) p.w_out->data[i * d + i] = 1.0;
  p.b_out = tensor_zeros<double>({d});
  auto query = tensor_uniform<double>({5, d}, 101, -2, 2);
  auto value = tensor_ones<double>({spec.total(), d});
  std::vector<double> refs;
  Rng rng(5);
  for (int i = 0; i < 5; ++i) {
    refs.push_back(rng.uniform(0.3, 0.7));
    refs.push_back(rng.uniform(0.3, 0.7));
  }
  auto out = ms_deform_attn(query, value, spec, refs, p);
  // interior refs, zero offsets: every tap hits value 1, so each output
  // coordinate is the total softmax mass of its head == 1
  for (double v : out->data) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("out-of-range sampling contributes zero") {
  auto spec = LevelSpec::from_levels({{3, 3}});
  int d = 4, heads = 1, points = 1;
  auto p = oracle::random_deform_params<double>(d, heads, points, 1, 55);
  p.w_offset = tensor_zeros<double>({d, 2});
  p.b_offset = tensor_zeros<double>({2});
  p.b_out = tensor_zeros<double>({d});
  p.w_out = tensor_zeros<double>({d, d});
  for (int i = 0; i < d; ++i) p.w_out->data[i * d + i] = 1.0;
  auto query = tensor_uniform<double>({1, d}, 56, -1, 1);
  auto value = tensor_uniform<double>({9, d}, 57, -1, 1);
  std::vector<double> refs{-5.0, -5.0};  // far outside the map
  auto out = ms_deform_attn(query, value, spec, refs, p);
  for (double v : out->data) CHECK(v == 0.0);
}

TEST_CASE("ms_deform_attn validates its contract") {
  auto spec = LevelSpec::from_levels({{4, 4}});
  auto p = oracle::random_deform_params<double>(8, 2, 2, 1, 66);
  auto query = tensor_uniform<double>({3, 8}, 67, -1, 1);
  auto value = tensor_uniform<double>({16, 8}, 68, -1, 1);
  std::vector<double> bad_refs{0.5, 0.5};  // 1 ref for 3 queries
  CHECK_THROWS_AS(ms_deform_attn(query, value, spec, bad_refs, p), ShapeError);
  auto short_value = tensor_uniform<double>({15, 8}, 69, -1, 1);
  std::vector<double> refs{0.5, 0.5, 0.2, 0.2, 0.8, 0.8};
  CHECK_THROWS_AS(ms_deform_attn(query, short_value, spec, refs, p), ShapeError);
}
