#pragma once

#include "hsia/blocks.hpp"

namespace hsia {

struct PriorConfig {
  int bands = 25;
  int c_stem = 64;
  int stage_widths[3] = {128, 256, 256};  // c2..c4 before 1x1 -> D
  int dim = 96;                           // shared embedding dimension D
};

// Multi-scale feature pyramid c1..c4 plus the flattened adapter sequence.
template <class T>
struct PyramidFeaturesT {
  TensorT<T> c1;                // [D, H/4, W/4]
  TensorT<T> c2, c3, c4;        // [D, H/8..H/32]
  TensorT<T> spm_seq;           // flatten(c2) || flatten(c3) || flatten(c4), [sum, D]
  LevelSpec spec;
};

// Spectral-Enhanced Spatial Prior Module: spectral-aware filtering then a
// hierarchical CNN with downsampling chain 4/8/16/32.
template <class T>
class SpatialPriorT {
 public:
  SpatialPriorT(ModelParamsT<T>& params, BufferRegistryT<T>& buffers, const std::string& prefix,
                PriorConfig cfg, Rng& rng)
      : cfg_(cfg) {
    // Depthwise 3x3 over the N bands, then pointwise to C_stem.
    filter_dw_ = ConvBnReluT<T>(params, buffers, prefix + ".filter.dw", cfg.bands, cfg.bands, 3, 1,
                                1, rng, cfg.bands);
    filter_pw_ =
        ConvBnReluT<T>(params, buffers, prefix + ".filter.pw", cfg.bands, cfg.c_stem, 1, 1, 0, rng);
    stem1_ = ConvBnReluT<T>(params, buffers, prefix + ".stem.conv1", cfg.c_stem, cfg.c_stem, 3, 2,
                            1, rng);
    stem2_ = ConvBnReluT<T>(params, buffers, prefix + ".stem.conv2", cfg.c_stem, cfg.c_stem, 3, 1,
                            1, rng);
    stem3_ = ConvBnReluT<T>(params, buffers, prefix + ".stem.conv3", cfg.c_stem, cfg.c_stem, 3, 1,
                            1, rng);
    int w2 = cfg.stage_widths[0], w3 = cfg.stage_widths[1], w4 = cfg.stage_widths[2];
    stage2_ = ConvBnReluT<T>(params, buffers, prefix + ".stage2", cfg.c_stem, w2, 3, 2, 1, rng);
    stage3_ = ConvBnReluT<T>(params, buffers, prefix + ".stage3", w2, w3, 3, 2, 1, rng);
    stage4_ = ConvBnReluT<T>(params, buffers, prefix + ".stage4", w3, w4, 3, 2, 1, rng);
    proj1_ = ConvT<T>(params, prefix + ".proj1", cfg.c_stem, cfg.dim, 1, 1, 0, rng);
    proj2_ = ConvT<T>(params, prefix + ".proj2", w2, cfg.dim, 1, 1, 0, rng);
    proj3_ = ConvT<T>(params, prefix + ".proj3", w3, cfg.dim, 1, 1, 0, rng);
    proj4_ = ConvT<T>(params, prefix + ".proj4", w4, cfg.dim, 1, 1, 0, rng);
  }

  // Depthwise-separable 3x3 across spectral channels + BN + ReLU.
  TensorT<T> spectral_filter(const TensorT<T>& cube, bool training) const {
    return filter_pw_.forward(filter_dw_.forward(cube, training), training);
  }

  // Three stacked 3x3 convs (first stride 2) + 3x3 maxpool -> c1 at 1/4.
  TensorT<T> stem(const TensorT<T>& f, bool training) const {
    auto x = stem1_.forward(f, training);
    x = stem2_.forward(x, training);
    x = stem3_.forward(x, training);
    return maxpool2d(x, 3, 2, 1);
  }

  std::tuple<TensorT<T>, TensorT<T>, TensorT<T>> pyramid_stages(const TensorT<T>& c1_raw,
                                                                bool training) const {
    auto c2 = stage2_.forward(c1_raw, training);
    auto c3 = stage3_.forward(c2, training);
    auto c4 = stage4_.forward(c3, training);
    return {c2, c3, c4};
  }

  PyramidFeaturesT<T> project_and_flatten(const TensorT<T>& c1_raw, const TensorT<T>& c2_raw,
                                          const TensorT<T>& c3_raw,
                                          const TensorT<T>& c4_raw) const {
    PyramidFeaturesT<T> out;
    out.c1 = proj1_.forward(c1_raw);
    out.c2 = proj2_.forward(c2_raw);
    out.c3 = proj3_.forward(c3_raw);
    out.c4 = proj4_.forward(c4_raw);
    out.spec = LevelSpec::from_levels({{out.c2->shape[1], out.c2->shape[2]},
                                       {out.c3->shape[1], out.c3->shape[2]},
                                       {out.c4->shape[1], out.c4->shape[2]}});
    out.spm_seq = concat_rows<T>(
        {chw_to_tokens(out.c2), chw_to_tokens(out.c3), chw_to_tokens(out.c4)});
    return out;
  }

  // Full module; input extents must be multiples of 32 (callers pad).
  PyramidFeaturesT<T> forward(const TensorT<T>& cube, bool training) const {
    if (cube->shape.at(1) % 32 != 0 || cube->shape.at(2) % 32 != 0)
      throw ShapeError("spatial prior input extents must be multiples of 32");
    auto f = spectral_filter(cube, training);
    auto c1_raw = stem(f, training);
    auto [c2_raw, c3_raw, c4_raw] = pyramid_stages(c1_raw, training);
    return project_and_flatten(c1_raw, c2_raw, c3_raw, c4_raw);
  }

  const PriorConfig& config() const { return cfg_; }

 private:
  PriorConfig cfg_;
  ConvBnReluT<T> filter_dw_, filter_pw_, stem1_, stem2_, stem3_, stage2_, stage3_, stage4_;
  ConvT<T> proj1_, proj2_, proj3_, proj4_;
};

using SpatialPrior = SpatialPriorT<float>;

// Un-flatten the adapter sequence back into per-level maps.
template <class T>
std::vector<TensorT<T>> unflatten_levels(const TensorT<T>& seq, const LevelSpec& spec) {
  if (seq->shape.at(0) != spec.total()) throw ShapeError("unflatten_levels: spec mismatch");
  std::vector<TensorT<T>> maps;
  for (int l = 0; l < spec.num_levels(); ++l) {
    auto part = slice_rows(seq, spec.offsets[l], spec.offsets[l + 1]);
    maps.push_back(tokens_to_chw(part, spec.levels[l].first, spec.levels[l].second));
  }
  return maps;
}

}  // namespace hsia
