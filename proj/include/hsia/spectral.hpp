#pragma once

#include "hsia/ops.hpp"
#include "hsia/params.hpp"

namespace hsia {

// Per-pixel band tokens: scalar band value through a shared scalar->d_s map
// plus a learned per-band embedding. cube [N,H,W] -> [H*W*N, d_s] with row
// index p*N + band.
template <class T>
TensorT<T> band_embed(const TensorT<T>& cube, const TensorT<T>& w, const TensorT<T>& b,
                      const TensorT<T>& band_emb) {
  if (cube->shape.size() != 3) throw ShapeError("band_embed: cube rank");
  int n = cube->shape[0], h = cube->shape[1], wd = cube->shape[2];
  int d = w->shape.at(0);
  if (band_emb->shape != Shape{n, d}) throw ShapeError("band_embed: band embedding shape");
  int p = h * wd;
  auto out = make_tensor<T>(Shape{p * n, d});
  for (int pi = 0; pi < p; ++pi)
    for (int i = 0; i < n; ++i) {
      T v = cube->data[static_cast<std::int64_t>(i) * p + pi];
      T* orow = out->data.data() + (static_cast<std::int64_t>(pi) * n + i) * d;
      const T* be = band_emb->data.data() + static_cast<std::int64_t>(i) * d;
      for (int j = 0; j < d; ++j) orow[j] = v * w->data[j] + b->data[j] + be[j];
    }
  detail::attach<T>(out, {cube, w, b, band_emb}, [cube, w, b, band_emb, n, p, d](Node<T>& o) {
    if (cube->requires_grad) cube->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    if (band_emb->requires_grad) band_emb->ensure_grad();
    for (int pi = 0; pi < p; ++pi)
      for (int i = 0; i < n; ++i) {
        const T* grow = o.grad.data() + (static_cast<std::int64_t>(pi) * n + i) * d;
        T v = cube->data[static_cast<std::int64_t>(i) * p + pi];
        if (cube->requires_grad) {
          T acc = T(0);
          for (int j = 0; j < d; ++j) acc += grow[j] * w->data[j];
          cube->grad[static_cast<std::int64_t>(i) * p + pi] += acc;
        }
        if (w->requires_grad)
          for (int j = 0; j < d; ++j) w->grad[j] += grow[j] * v;
        if (b->requires_grad)
          for (int j = 0; j < d; ++j) b->grad[j] += grow[j];
        if (band_emb->requires_grad) {
          T* bg = band_emb->grad.data() + static_cast<std::int64_t>(i) * d;
          for (int j = 0; j < d; ++j) bg[j] += grow[j];
        }
      }
  });
  return out;
}

// One pre-norm transformer encoder layer's parameters.
template <class T>
struct EncoderLayerParams {
  TensorT<T> ln1_g, ln1_b, ln2_g, ln2_b;
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  static EncoderLayerParams init(ModelParamsT<T>& params, const std::string& prefix, int dim,
                                 int mlp_hidden, Rng& rng, bool frozen) {
    EncoderLayerParams lp;
    auto tn = [&](Shape s) { return tensor_init_trunc_normal<T>(s, rng, 0.02); };
    lp.ln1_g = params.add(prefix + ".ln1.gamma", tensor_ones<T>({dim}), frozen);
    lp.ln1_b = params.add(prefix + ".ln1.beta", tensor_zeros<T>({dim}), frozen);
    lp.wq = params.add(prefix + ".attn.wq", tn({dim, dim}), frozen);
    lp.bq = params.add(prefix + ".attn.bq", tensor_zeros<T>({dim}), frozen);
    lp.wk = params.add(prefix + ".attn.wk", tn({dim, dim}), frozen);
    lp.bk = params.add(prefix + ".attn.bk", tensor_zeros<T>({dim}), frozen);
    lp.wv = params.add(prefix + ".attn.wv", tn({dim, dim}), frozen);
    lp.bv = params.add(prefix + ".attn.bv", tensor_zeros<T>({dim}), frozen);
    lp.wo = params.add(prefix + ".attn.wo", tn({dim, dim}), frozen);
    lp.bo = params.add(prefix + ".attn.bo", tensor_zeros<T>({dim}), frozen);
    lp.ln2_g = params.add(prefix + ".ln2.gamma", tensor_ones<T>({dim}), frozen);
    lp.ln2_b = params.add(prefix + ".ln2.beta", tensor_zeros<T>({dim}), frozen);
    lp.mlp_w1 = params.add(prefix + ".mlp.w1", tn({dim, mlp_hidden}), frozen);
    lp.mlp_b1 = params.add(prefix + ".mlp.b1", tensor_zeros<T>({mlp_hidden}), frozen);
    lp.mlp_w2 = params.add(prefix + ".mlp.w2", tn({mlp_hidden, dim}), frozen);
    lp.mlp_b2 = params.add(prefix + ".mlp.b2", tensor_zeros<T>({dim}), frozen);
    return lp;
  }

  // x packed as [B*Tq, dim]; self-attention within each sequence.
  TensorT<T> forward(const TensorT<T>& x, int batch, int t, int heads) const {
    auto h1 = layernorm(x, ln1_g, ln1_b);
    auto attn =
        multi_head_attention(h1, h1, batch, t, t, heads, wq, bq, wk, bk, wv, bv, wo, bo);
    auto x1 = add(x, attn);
    auto h2 = layernorm(x1, ln2_g, ln2_b);
    auto m = linear(gelu(linear(h2, mlp_w1, mlp_b1)), mlp_w2, mlp_b2);
    return add(x1, m);
  }
};

struct SpectralConfig {
  int bands = 25;
  int d_s = 32;
  int heads = 4;
  int layers = 2;
  int mlp_ratio = 2;
  int tile_pixels = 4096;  // pixel tiling bound; results are tile-invariant
};

// Models inter-band dependencies per pixel and compresses the spectrum into
// a 3-channel pseudo-image for the frozen ViT.
template <class T>
class SpectralTransformerT {
 public:
  SpectralTransformerT(ModelParamsT<T>& params, const std::string& prefix, SpectralConfig cfg,
                       Rng& rng)
      : cfg_(cfg) {
    if (cfg.d_s % cfg.heads != 0)
      throw ConfigError("spectral d_s not divisible by heads");
    auto tn = [&](Shape s) { return tensor_init_trunc_normal<T>(s, rng, 0.02); };
    proj_w_ = params.add(prefix + ".band_proj.weight", tn({cfg.d_s}), false);
    proj_b_ = params.add(prefix + ".band_proj.bias", tensor_zeros<T>({cfg.d_s}), false);
    band_emb_ = params.add(prefix + ".band_embed", tn({cfg.bands, cfg.d_s}), false);
    for (int l = 0; l < cfg.layers; ++l)
      layers_.push_back(EncoderLayerParams<T>::init(params, prefix + ".layer" + std::to_string(l),
                                                    cfg.d_s, cfg.d_s * cfg.mlp_ratio, rng, false));
    out_w_ = params.add(prefix + ".out_proj.weight", tn({cfg.d_s, 3}), false);
    out_b_ = params.add(prefix + ".out_proj.bias", tensor_zeros<T>({3}), false);
  }

  TensorT<T> embed(const TensorT<T>& cube) const {
    return band_embed(cube, proj_w_, proj_b_, band_emb_);
  }

  // tokens [P*N, d_s] -> encoded tokens, attention within each pixel only.
  TensorT<T> encode(const TensorT<T>& tokens) const {
    int n = cfg_.bands;
    int p = tokens->shape.at(0) / n;
    int tile = cfg_.tile_pixels > 0 ? cfg_.tile_pixels : p;
    if (p <= tile) return encode_block(tokens, p);
    std::vector<TensorT<T>> parts;
    for (int start = 0; start < p; start += tile) {
      int stop = std::min(p, start + tile);
      parts.push_back(encode_block(slice_rows(tokens, start * n, stop * n), stop - start));
    }
    return concat_rows(parts);
  }

  // Mean over the N tokens per pixel, then linear d_s -> 3.
  TensorT<T> pool_project(const TensorT<T>& tokens, int h, int w) const {
    auto pooled = mean_rows_grouped(tokens, cfg_.bands);  // [P, d_s]
    auto rgb = linear(pooled, out_w_, out_b_);            // [P, 3]
    return tokens_to_chw(rgb, h, w);
  }

  // band_embed -> spectral_encode -> pool/project; preserves H,W.
  TensorT<T> transform(const TensorT<T>& cube) const {
    int h = cube->shape.at(1), w = cube->shape.at(2);
    return pool_project(encode(embed(cube)), h, w);
  }

  const SpectralConfig& config() const { return cfg_; }

 private:
  TensorT<T> encode_block(const TensorT<T>& tokens, int pixels) const {
    auto x = tokens;
    for (const auto& lp : layers_) x = lp.forward(x, pixels, cfg_.bands, cfg_.heads);
    return x;
  }

  SpectralConfig cfg_;
  TensorT<T> proj_w_, proj_b_, band_emb_, out_w_, out_b_;
  std::vector<EncoderLayerParams<T>> layers_;
};

using SpectralTransformer = SpectralTransformerT<float>;

}  // namespace hsia
