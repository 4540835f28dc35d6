#pragma once

#include "hsia/spectral.hpp"

namespace hsia {

struct ViTConfig {
  int patch = 14;
  int dim = 96;
  int depth = 12;
  int heads = 4;
  int mlp_ratio = 4;
  int pretrain_size = 518;  // positional embeddings live on this grid
  std::vector<std::pair<int, int>> stages = {{0, 2}, {3, 5}, {6, 8}, {9, 11}};

  int pretrain_grid() const { return pretrain_size / patch; }
  void validate() const {
    if (dim % heads != 0) throw ConfigError("vit dim not divisible by heads");
    int expect = 0;
    for (auto& [s, e] : stages) {
      if (s != expect || e < s) throw ConfigError("vit stage boundaries must cover [0,depth)");
      expect = e + 1;
    }
    if (expect != depth) throw ConfigError("vit stage boundaries must cover [0,depth)");
    if (pretrain_size % patch != 0) throw ConfigError("pretrain_size must be a patch multiple");
  }
};

namespace detail {

// Catmull-Rom cubic kernel (a = -0.5).
inline double cubic_w(double t) {
  t = std::abs(t);
  if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
  if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
  return 0.0;
}

// Bicubic grid resample of [rows = gh*gw, d] tokens from (gh,gw) to
// (oh,ow), align-corners-false with edge clamping, evaluated in double.
// At the native grid this is an exact identity.
template <class T>
std::vector<T> bicubic_resample_grid(const std::vector<T>& src, int gh, int gw, int d, int oh,
                                     int ow) {
  std::vector<T> out(static_cast<size_t>(oh) * ow * d);
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  for (int oy = 0; oy < oh; ++oy) {
    double yf = (oy + 0.5) * static_cast<double>(gh) / oh - 0.5;
    int y1 = static_cast<int>(std::floor(yf));
    double ty = yf - y1;
    double wy[4] = {cubic_w(ty + 1.0), cubic_w(ty), cubic_w(ty - 1.0), cubic_w(ty - 2.0)};
    for (int ox = 0; ox < ow; ++ox) {
      double xf = (ox + 0.5) * static_cast<double>(gw) / ow - 0.5;
      int x1 = static_cast<int>(std::floor(xf));
      double tx = xf - x1;
      double wx[4] = {cubic_w(tx + 1.0), cubic_w(tx), cubic_w(tx - 1.0), cubic_w(tx - 2.0)};
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int iy = 0; iy < 4; ++iy) {
          int sy = clampi(y1 - 1 + iy, 0, gh - 1);
          double row = 0.0;
          for (int ix = 0; ix < 4; ++ix) {
            int sx = clampi(x1 - 1 + ix, 0, gw - 1);
            row += wx[ix] *
                   static_cast<double>(src[(static_cast<std::int64_t>(sy) * gw + sx) * d + j]);
          }
          acc += wy[iy] * row;
        }
        out[(static_cast<std::int64_t>(oy) * ow + ox) * d + j] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

}  // namespace detail

// Patch tokens plus class token at row 0.
template <class T>
struct ViTStateT {
  TensorT<T> tokens;  // [1 + T_v, dim]
  int grid_h = 0, grid_w = 0;
  int patch_tokens() const { return grid_h * grid_w; }
};

// Frozen ViT: patch embedding, positional embeddings, class token, and
// encoder blocks partitioned into stages for interleaved interaction.
template <class T>
class ViTBackboneT {
 public:
  ViTBackboneT(ModelParamsT<T>& params, const std::string& prefix, ViTConfig cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    int g = cfg.pretrain_grid();
    auto tn = [&](Shape s) { return tensor_init_trunc_normal<T>(s, rng, 0.02); };
    patch_w_ = params.add(prefix + ".patch_embed.weight", tn({cfg.dim, 3, cfg.patch, cfg.patch}),
                          true);
    patch_b_ = params.add(prefix + ".patch_embed.bias", tensor_zeros<T>({cfg.dim}), true);
    cls_token_ = params.add(prefix + ".cls_token", tn({1, cfg.dim}), true);
    pos_embed_ = params.add(prefix + ".pos_embed", tn({1 + g * g, cfg.dim}), true);
    for (int i = 0; i < cfg.depth; ++i)
      blocks_.push_back(EncoderLayerParams<T>::init(params, prefix + ".block" + std::to_string(i),
                                                    cfg.dim, cfg.dim * cfg.mlp_ratio, rng, true));
  }

  // img [3,H,W]; pads to patch multiples on bottom/right.
  ViTStateT<T> patch_embed(const TensorT<T>& img) const {
    if (img->shape.size() != 3 || img->shape[0] != 3)
      throw ContractError("patch_embed expects a 3-channel image");
    int p = cfg_.patch;
    int hp = ((img->shape[1] + p - 1) / p) * p;
    int wp = ((img->shape[2] + p - 1) / p) * p;
    auto padded = pad2d_br(img, hp, wp);
    auto fm = conv2d(padded, patch_w_, patch_b_, p, 0);
    ViTStateT<T> st;
    st.grid_h = hp / p;
    st.grid_w = wp / p;
    auto tokens = chw_to_tokens(fm);  // [T_v, dim]
    auto with_cls = concat_rows<T>({cls_token_, tokens});
    auto pos = resampled_pos_embed(st.grid_h, st.grid_w);
    st.tokens = add(with_cls, pos);
    return st;
  }

  // Positional embeddings bicubically resampled from the pretrain grid;
  // constant in the graph (the backbone is frozen).
  TensorT<T> resampled_pos_embed(int gh, int gw) const {
    int g = cfg_.pretrain_grid();
    int d = cfg_.dim;
    auto out = make_tensor<T>(Shape{1 + gh * gw, d});
    std::copy(pos_embed_->data.begin(), pos_embed_->data.begin() + d, out->data.begin());
    std::vector<T> grid_part(pos_embed_->data.begin() + d, pos_embed_->data.end());
    auto res = detail::bicubic_resample_grid<T>(grid_part, g, g, d, gh, gw);
    std::copy(res.begin(), res.end(), out->data.begin() + d);
    return out;
  }

  // Applies the stage's encoder blocks; class token included.
  TensorT<T> run_stage(const TensorT<T>& tokens_with_cls, int stage) const {
    if (stage < 0 || stage >= static_cast<int>(cfg_.stages.size()))
      throw ContractError("run_stage: stage index out of range");
    auto [s, e] = cfg_.stages[stage];
    auto x = tokens_with_cls;
    int t = x->shape.at(0);
    for (int i = s; i <= e; ++i) x = blocks_[i].forward(x, 1, t, cfg_.heads);
    return x;
  }

  int num_stages() const { return static_cast<int>(cfg_.stages.size()); }
  const ViTConfig& config() const { return cfg_; }

 private:
  ViTConfig cfg_;
  TensorT<T> patch_w_, patch_b_, cls_token_, pos_embed_;
  std::vector<EncoderLayerParams<T>> blocks_;
};

using ViTBackbone = ViTBackboneT<float>;

// Lossless split/concat of the class token at row 0.
template <class T>
std::pair<TensorT<T>, TensorT<T>> detach_class_token(const TensorT<T>& tokens_with_cls) {
  int t = tokens_with_cls->shape.at(0);
  return {slice_rows(tokens_with_cls, 1, t), slice_rows(tokens_with_cls, 0, 1)};
}

template <class T>
TensorT<T> reattach_class_token(const TensorT<T>& patch_tokens, const TensorT<T>& cls) {
  return concat_rows<T>({cls, patch_tokens});
}

}  // namespace hsia
