#pragma once

#include "hsia/prior.hpp"
#include "hsia/vit.hpp"

namespace hsia {

// Per-token gate coefficient: sigmoid of a linear map over the concatenated
// (x_vit, x_injected) pair. w [2D], b scalar; output [T,1], values in (0,1).
template <class T>
TensorT<T> gate_gamma(const TensorT<T>& x_vit, const TensorT<T>& x_injected, const TensorT<T>& w,
                      const TensorT<T>& b) {
  check_same_shape(x_vit, x_injected, "gate_gamma");
  int t = x_vit->shape.at(0), d = x_vit->shape.at(1);
  if (w->size() != 2 * d || b->size() != 1) throw ShapeError("gate_gamma: projection shape");
  auto out = make_tensor<T>(Shape{t, 1});
  for (int i = 0; i < t; ++i) {
    T z = b->data[0];
    const T* a = x_vit->data.data() + static_cast<std::int64_t>(i) * d;
    const T* c = x_injected->data.data() + static_cast<std::int64_t>(i) * d;
    for (int j = 0; j < d; ++j) z += a[j] * w->data[j] + c[j] * w->data[d + j];
    out->data[i] = T(1) / (T(1) + std::exp(-z));
  }
  detail::attach<T>(out, {x_vit, x_injected, w, b}, [x_vit, x_injected, w, b, t, d](Node<T>& o) {
    if (x_vit->requires_grad) x_vit->ensure_grad();
    if (x_injected->requires_grad) x_injected->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int i = 0; i < t; ++i) {
      T s = o.data[i];
      T dz = o.grad[i] * s * (T(1) - s);
      if (dz == T(0)) continue;
      const T* a = x_vit->data.data() + static_cast<std::int64_t>(i) * d;
      const T* c = x_injected->data.data() + static_cast<std::int64_t>(i) * d;
      if (b->requires_grad) b->grad[0] += dz;
      for (int j = 0; j < d; ++j) {
        if (w->requires_grad) {
          w->grad[j] += dz * a[j];
          w->grad[d + j] += dz * c[j];
        }
        if (x_vit->requires_grad)
          x_vit->grad[static_cast<std::int64_t>(i) * d + j] += dz * w->data[j];
        if (x_injected->requires_grad)
          x_injected->grad[static_cast<std::int64_t>(i) * d + j] += dz * w->data[d + j];
      }
    }
  });
  return out;
}

// Convex blend x_out = gamma * x_injected + (1 - gamma) * x_vit per token.
// Computed as x_vit + gamma*(x_injected - x_vit) with exact endpoint handling
// so forced gamma in {0,1} reproduces the inputs bit-exactly, and the result
// is clamped to the coordinate-wise envelope so betweenness holds exactly.
template <class T>
TensorT<T> gate_blend(const TensorT<T>& x_vit, const TensorT<T>& x_injected,
                      const TensorT<T>& gamma) {
  check_same_shape(x_vit, x_injected, "gate_blend");
  int t = x_vit->shape.at(0), d = x_vit->shape.at(1);
  if (gamma->shape != Shape{t, 1}) throw ShapeError("gate_blend: gamma must be [T,1]");
  auto out = make_tensor<T>(Shape{t, d});
  for (int i = 0; i < t; ++i) {
    T g = gamma->data[i];
    const T* b = x_vit->data.data() + static_cast<std::int64_t>(i) * d;
    const T* a = x_injected->data.data() + static_cast<std::int64_t>(i) * d;
    T* y = out->data.data() + static_cast<std::int64_t>(i) * d;
    if (g == T(0)) {
      std::copy(b, b + d, y);
    } else if (g == T(1)) {
      std::copy(a, a + d, y);
    } else {
      for (int j = 0; j < d; ++j) {
        T v = b[j] + g * (a[j] - b[j]);
        T lo = std::min(a[j], b[j]), hi = std::max(a[j], b[j]);
        y[j] = std::min(std::max(v, lo), hi);
      }
    }
  }
  detail::attach<T>(out, {x_vit, x_injected, gamma}, [x_vit, x_injected, gamma, t, d](Node<T>& o) {
    if (x_vit->requires_grad) x_vit->ensure_grad();
    if (x_injected->requires_grad) x_injected->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    for (int i = 0; i < t; ++i) {
      T g = gamma->data[i];
      const T* b = x_vit->data.data() + static_cast<std::int64_t>(i) * d;
      const T* a = x_injected->data.data() + static_cast<std::int64_t>(i) * d;
      const T* gr = o.grad.data() + static_cast<std::int64_t>(i) * d;
      T dg = T(0);
      for (int j = 0; j < d; ++j) {
        dg += gr[j] * (a[j] - b[j]);
        if (x_injected->requires_grad)
          x_injected->grad[static_cast<std::int64_t>(i) * d + j] += g * gr[j];
        if (x_vit->requires_grad)
          x_vit->grad[static_cast<std::int64_t>(i) * d + j] += (T(1) - g) * gr[j];
      }
      if (gamma->requires_grad) gamma->grad[i] += dg;
    }
  });
  return out;
}

struct InteractionConfig {
  int dim = 96;
  int deform_heads = 8;
  int deform_points = 4;
  int feedback_heads = 4;
  int num_extra_extractors = 3;
  double gate_bias_init = -2.0;  // gamma ~ 0.12 at start
};

namespace detail {

template <class T>
MsDeformParams<T> init_deform(ModelParamsT<T>& params, const std::string& prefix, int dim,
                              int levels, int heads, int points, Rng& rng) {
  MsDeformParams<T> p;
  p.heads = heads;
  p.points = points;
  int lp2 = heads * levels * points * 2;
  int lp = heads * levels * points;
  p.w_value = params.add(prefix + ".value.weight", tensor_init_trunc_normal<T>({dim, dim}, rng, 0.02),
                         false);
  p.b_value = params.add(prefix + ".value.bias", tensor_zeros<T>({dim}), false);
  // Offsets start at zero; attention-weight projection starts uniform.
  p.w_offset = params.add(prefix + ".offset.weight", tensor_zeros<T>({dim, lp2}), false);
  p.b_offset = params.add(prefix + ".offset.bias", tensor_zeros<T>({lp2}), false);
  p.w_attn = params.add(prefix + ".attn.weight", tensor_zeros<T>({dim, lp}), false);
  p.b_attn = params.add(prefix + ".attn.bias", tensor_zeros<T>({lp}), false);
  // Zero-initialized output projection: the block is an exact identity at
  // initialization.
  p.w_out = params.add(prefix + ".out.weight", tensor_zeros<T>({dim, dim}), false);
  p.b_out = params.add(prefix + ".out.bias", tensor_zeros<T>({dim}), false);
  return p;
}

}  // namespace detail

// Deformable cross-attention adapter -> ViT. Residual form so the zero-init
// output projection makes x_injected == x_vit; fusion itself is the gate's.
template <class T>
class InjectorT {
 public:
  InjectorT() = default;
  InjectorT(ModelParamsT<T>& params, const std::string& prefix, int dim, int heads, int points,
            Rng& rng) {
    ln_g_ = params.add(prefix + ".query_norm.gamma", tensor_ones<T>({dim}), false);
    ln_b_ = params.add(prefix + ".query_norm.beta", tensor_zeros<T>({dim}), false);
    deform_ = detail::init_deform(params, prefix + ".deform", dim, 3, heads, points, rng);
  }

  TensorT<T> forward(const TensorT<T>& x_vit, const TensorT<T>& f_spm, const LevelSpec& spec,
                     const std::vector<T>& ref_points) const {
    auto q = layernorm(x_vit, ln_g_, ln_b_);
    auto delta = ms_deform_attn(q, f_spm, spec, ref_points, deform_);
    return add(x_vit, delta);
  }

 private:
  TensorT<T> ln_g_, ln_b_;
  MsDeformParams<T> deform_;
};

// Reverse deformable cross-attention ViT -> adapter, residual onto F_spm.
template <class T>
class ExtractorT {
 public:
  ExtractorT() = default;
  ExtractorT(ModelParamsT<T>& params, const std::string& prefix, int dim, int heads, int points,
             Rng& rng) {
    ln_g_ = params.add(prefix + ".query_norm.gamma", tensor_ones<T>({dim}), false);
    ln_b_ = params.add(prefix + ".query_norm.beta", tensor_zeros<T>({dim}), false);
    deform_ = detail::init_deform(params, prefix + ".deform", dim, 1, heads, points, rng);
  }

  TensorT<T> forward(const TensorT<T>& f_spm, const TensorT<T>& x_vit_patches,
                     const LevelSpec& vit_spec, const std::vector<T>& spm_refs) const {
    auto q = layernorm(f_spm, ln_g_, ln_b_);
    auto delta = ms_deform_attn(q, x_vit_patches, vit_spec, spm_refs, deform_);
    return add(f_spm, delta);
  }

 private:
  TensorT<T> ln_g_, ln_b_;
  MsDeformParams<T> deform_;
};

// Dense bottleneck cross-attention feedback: D -> D/2 attention -> D with a
// zero-initialized return projection, then a ratio-0.25 feed-forward.
template <class T>
class FeedbackBlockT {
 public:
  FeedbackBlockT() = default;
  FeedbackBlockT(ModelParamsT<T>& params, const std::string& prefix, int dim, int heads, Rng& rng)
      : heads_(heads) {
    int dp = dim / 2;
    int dff = std::max(1, dim / 4);
    auto tn = [&](Shape s) { return tensor_init_trunc_normal<T>(s, rng, 0.02); };
    ln_g_ = params.add(prefix + ".norm.gamma", tensor_ones<T>({dim}), false);
    ln_b_ = params.add(prefix + ".norm.beta", tensor_zeros<T>({dim}), false);
    wq_ = params.add(prefix + ".attn.wq", tn({dim, dp}), false);
    bq_ = params.add(prefix + ".attn.bq", tensor_zeros<T>({dp}), false);
    wk_ = params.add(prefix + ".attn.wk", tn({dim, dp}), false);
    bk_ = params.add(prefix + ".attn.bk", tensor_zeros<T>({dp}), false);
    wv_ = params.add(prefix + ".attn.wv", tn({dim, dp}), false);
    bv_ = params.add(prefix + ".attn.bv", tensor_zeros<T>({dp}), false);
    wo_ = params.add(prefix + ".attn.wo", tensor_zeros<T>({dp, dim}), false);
    bo_ = params.add(prefix + ".attn.bo", tensor_zeros<T>({dim}), false);
    ffn_ln_g_ = params.add(prefix + ".ffn_norm.gamma", tensor_ones<T>({dim}), false);
    ffn_ln_b_ = params.add(prefix + ".ffn_norm.beta", tensor_zeros<T>({dim}), false);
    ffn_w1_ = params.add(prefix + ".ffn.w1", tn({dim, dff}), false);
    ffn_b1_ = params.add(prefix + ".ffn.b1", tensor_zeros<T>({dff}), false);
    ffn_w2_ = params.add(prefix + ".ffn.w2", tensor_zeros<T>({dff, dim}), false);
    ffn_b2_ = params.add(prefix + ".ffn.b2", tensor_zeros<T>({dim}), false);
  }

  TensorT<T> forward(const TensorT<T>& f_spm, const TensorT<T>& x_vit_patches,
                     AttentionWeights<T>* probe = nullptr) const {
    int tq = f_spm->shape.at(0);
    int tk = x_vit_patches->shape.at(0);
    auto q = layernorm(f_spm, ln_g_, ln_b_);
    auto attn = multi_head_attention(q, x_vit_patches, 1, tq, tk, heads_, wq_, bq_, wk_, bk_, wv_,
                                     bv_, wo_, bo_, probe);
    auto x = add(f_spm, attn);
    auto m = layernorm(x, ffn_ln_g_, ffn_ln_b_);
    auto ff = linear(gelu(linear(m, ffn_w1_, ffn_b1_)), ffn_w2_, ffn_b2_);
    return add(x, ff);
  }

 private:
  int heads_ = 4;
  TensorT<T> ln_g_, ln_b_, wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  TensorT<T> ffn_ln_g_, ffn_ln_b_, ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
};

// One Modality-Aware Interaction Block: injector, per-token gate, frozen
// stage pass, extractor, feedback.
template <class T>
class InteractionBlockT {
 public:
  InteractionBlockT() = default;
  InteractionBlockT(ModelParamsT<T>& params, const std::string& prefix,
                    const InteractionConfig& cfg, Rng& rng) {
    injector_ = InjectorT<T>(params, prefix + ".injector", cfg.dim, cfg.deform_heads,
                             cfg.deform_points, rng);
    gate_w_ = params.add(prefix + ".gate.weight",
                         tensor_init_trunc_normal<T>({2 * cfg.dim}, rng, 0.02), false);
    auto gb = tensor_zeros<T>({1});
    gb->data[0] = static_cast<T>(cfg.gate_bias_init);
    gate_b_ = params.add(prefix + ".gate.bias", gb, false);
    extractor_ = ExtractorT<T>(params, prefix + ".extractor", cfg.dim, cfg.deform_heads,
                               cfg.deform_points, rng);
    feedback_ = FeedbackBlockT<T>(params, prefix + ".feedback", cfg.dim, cfg.feedback_heads, rng);
  }

  TensorT<T> inject(const TensorT<T>& x_vit, const TensorT<T>& f_spm, const LevelSpec& spec,
                    const std::vector<T>& refs) const {
    return injector_.forward(x_vit, f_spm, spec, refs);
  }

  TensorT<T> gate(const TensorT<T>& x_vit, const TensorT<T>& x_injected) const {
    auto g = gate_gamma(x_vit, x_injected, gate_w_, gate_b_);
    return gate_blend(x_vit, x_injected, g);
  }

  TensorT<T> extract(const TensorT<T>& f_spm, const TensorT<T>& x_vit_patches,
                     const LevelSpec& vit_spec, const std::vector<T>& spm_refs) const {
    return extractor_.forward(f_spm, x_vit_patches, vit_spec, spm_refs);
  }

  TensorT<T> feedback(const TensorT<T>& f_spm, const TensorT<T>& x_vit_patches,
                      AttentionWeights<T>* probe = nullptr) const {
    return feedback_.forward(f_spm, x_vit_patches, probe);
  }

 private:
  InjectorT<T> injector_;
  ExtractorT<T> extractor_;
  FeedbackBlockT<T> feedback_;
  TensorT<T> gate_w_, gate_b_;
};

// f1 = conv_transpose(f2) + c1 plus the unflattened f2..f4 maps.
template <class T>
class OutputAssemblerT {
 public:
  OutputAssemblerT() = default;
  OutputAssemblerT(ModelParamsT<T>& params, const std::string& prefix, int dim, Rng& rng) {
    double std_dev = std::sqrt(2.0 / (static_cast<double>(dim) * 4));
    up_w_ = params.add(prefix + ".up.weight",
                       tensor_init_trunc_normal<T>({dim, dim, 2, 2}, rng, std_dev), false);
    up_b_ = params.add(prefix + ".up.bias", tensor_zeros<T>({dim}), false);
  }

  std::array<TensorT<T>, 4> forward(const TensorT<T>& f_spm_final, const TensorT<T>& c1,
                                    const LevelSpec& spec) const {
    auto maps = unflatten_levels(f_spm_final, spec);
    auto f1 = add(conv_transpose2d(maps[0], up_w_, up_b_, 2), c1);
    return {f1, maps[0], maps[1], maps[2]};
  }

 private:
  TensorT<T> up_w_, up_b_;
};

}  // namespace hsia
