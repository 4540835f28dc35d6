#pragma once

#include <cmath>
#include <limits>

#include "hsia/tensor.hpp"

namespace hsia {

// Ordered description of a multi-scale token pyramid.
struct LevelSpec {
  std::vector<std::pair<int, int>> levels;  // (H_l, W_l)
  std::vector<int> offsets;                 // prefix sums, offsets.back() == total

  static LevelSpec from_levels(std::vector<std::pair<int, int>> lv) {
    LevelSpec s;
    s.levels = std::move(lv);
    s.offsets.push_back(0);
    for (auto& [h, w] : s.levels) {
      if (h <= 0 || w <= 0) throw ShapeError("LevelSpec: non-positive extent");
      s.offsets.push_back(s.offsets.back() + h * w);
    }
    return s;
  }
  int total() const { return offsets.back(); }
  int num_levels() const { return static_cast<int>(levels.size()); }
};

// --- linear ------------------------------------------------------------------

// y = x.W + b for x [R,in], W [in,out], b [out].
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  if (x->shape.size() != 2 || w->shape.size() != 2 || x->shape[1] != w->shape[0])
    throw ShapeError("linear: " + shape_str(x->shape) + " x " + shape_str(w->shape));
  int rows = x->shape[0], in = x->shape[1], out_dim = w->shape[1];
  if (b && (b->shape.size() != 1 || b->shape[0] != out_dim)) throw ShapeError("linear: bias shape");
  auto out = make_tensor<T>(Shape{rows, out_dim});
  const T* X = x->data.data();
  const T* W = w->data.data();
  T* Y = out->data.data();
  for (int r = 0; r < rows; ++r) {
    T* yrow = Y + static_cast<std::int64_t>(r) * out_dim;
    if (b)
      for (int j = 0; j < out_dim; ++j) yrow[j] = b->data[j];
    const T* xrow = X + static_cast<std::int64_t>(r) * in;
    for (int k = 0; k < in; ++k) {
      T xv = xrow[k];
      if (xv == T(0)) continue;
      const T* wrow = W + static_cast<std::int64_t>(k) * out_dim;
      for (int j = 0; j < out_dim; ++j) yrow[j] += xv * wrow[j];
    }
  }
  detail::attach<T>(out, {x, w, b}, [x, w, b, rows, in, out_dim](Node<T>& o) {
    const T* G = o.grad.data();
    if (x->requires_grad) {
      x->ensure_grad();
      const T* W = w->data.data();
      for (int r = 0; r < rows; ++r) {
        const T* grow = G + static_cast<std::int64_t>(r) * out_dim;
        T* xg = x->grad.data() + static_cast<std::int64_t>(r) * in;
        for (int k = 0; k < in; ++k) {
          T acc = T(0);
          const T* wrow = W + static_cast<std::int64_t>(k) * out_dim;
          for (int j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
          xg[k] += acc;
        }
      }
    }
    if (w->requires_grad) {
      w->ensure_grad();
      const T* X = x->data.data();
      for (int r = 0; r < rows; ++r) {
        const T* grow = G + static_cast<std::int64_t>(r) * out_dim;
        const T* xrow = X + static_cast<std::int64_t>(r) * in;
        for (int k = 0; k < in; ++k) {
          T xv = xrow[k];
          if (xv == T(0)) continue;
          T* wg = w->grad.data() + static_cast<std::int64_t>(k) * out_dim;
          for (int j = 0; j < out_dim; ++j) wg[j] += xv * grow[j];
        }
      }
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const T* grow = G + static_cast<std::int64_t>(r) * out_dim;
        for (int j = 0; j < out_dim; ++j) b->grad[j] += grow[j];
      }
    }
  });
  return out;
}

// --- activations -------------------------------------------------------------

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  auto out = make_tensor<T>(x->shape);
  for (std::int64_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
  detail::attach<T>(out, {x}, [x](Node<T>& o) {
    x->ensure_grad();
    for (std::int64_t i = 0; i < o.size(); ++i)
      if (x->data[i] > T(0)) x->grad[i] += o.grad[i];
  });
  return out;
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  auto out = make_tensor<T>(x->shape);
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::int64_t i = 0; i < x->size(); ++i) {
    T v = x->data[i];
    out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  detail::attach<T>(out, {x}, [x, inv_sqrt2](Node<T>& o) {
    x->ensure_grad();
    const T inv_sqrt2pi = T(0.39894228040143267794);
    for (std::int64_t i = 0; i < o.size(); ++i) {
      T v = x->data[i];
      T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      x->grad[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
  return out;
}

// --- softmax / layernorm -------------------------------------------------------

// Max-subtracted softmax over the last dimension of a 2D tensor.
template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  if (x->shape.size() != 2) throw ShapeError("softmax_rows expects 2D");
  int rows = x->shape[0], cols = x->shape[1];
  auto out = make_tensor<T>(x->shape);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x->data.data() + static_cast<std::int64_t>(r) * cols;
    T* yr = out->data.data() + static_cast<std::int64_t>(r) * cols;
    T mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T denom = T(0);
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    for (int j = 0; j < cols; ++j) yr[j] /= denom;
  }
  detail::attach<T>(out, {x}, [x, rows, cols](Node<T>& o) {
    x->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const T* yr = o.data.data() + static_cast<std::int64_t>(r) * cols;
      const T* gr = o.grad.data() + static_cast<std::int64_t>(r) * cols;
      T dot = T(0);
      for (int j = 0; j < cols; ++j) dot += yr[j] * gr[j];
      T* xg = x->grad.data() + static_cast<std::int64_t>(r) * cols;
      for (int j = 0; j < cols; ++j) xg[j] += yr[j] * (gr[j] - dot);
    }
  });
  return out;
}

// Per-row normalization over the last dim of a 2D tensor, eps 1e-6.
template <class T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta) {
  if (x->shape.size() != 2) throw ShapeError("layernorm expects 2D");
  int rows = x->shape[0], d = x->shape[1];
  if (gamma->size() != d || beta->size() != d) throw ShapeError("layernorm: affine shape");
  const T eps = T(1e-6);
  auto out = make_tensor<T>(x->shape);
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  auto means = std::make_shared<std::vector<T>>(rows);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x->data.data() + static_cast<std::int64_t>(r) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    (*means)[r] = mu;
    (*inv_std)[r] = is;
    T* yr = out->data.data() + static_cast<std::int64_t>(r) * d;
    for (int j = 0; j < d; ++j) yr[j] = gamma->data[j] * ((xr[j] - mu) * is) + beta->data[j];
  }
  detail::attach<T>(out, {x, gamma, beta}, [x, gamma, beta, rows, d, means, inv_std](Node<T>& o) {
    for (int r = 0; r < rows; ++r) {
      const T* xr = x->data.data() + static_cast<std::int64_t>(r) * d;
      const T* gr = o.grad.data() + static_cast<std::int64_t>(r) * d;
      T mu = (*means)[r], is = (*inv_std)[r];
      if (gamma->requires_grad) {
        gamma->ensure_grad();
        for (int j = 0; j < d; ++j) gamma->grad[j] += gr[j] * ((xr[j] - mu) * is);
      }
      if (beta->requires_grad) {
        beta->ensure_grad();
        for (int j = 0; j < d; ++j) beta->grad[j] += gr[j];
      }
      if (x->requires_grad) {
        x->ensure_grad();
        // dxhat = g*gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        T sum_dxh = T(0), sum_dxh_xh = T(0);
        for (int j = 0; j < d; ++j) {
          T dxh = gr[j] * gamma->data[j];
          T xh = (xr[j] - mu) * is;
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
        T inv_d = T(1) / static_cast<T>(d);
        T* xg = x->grad.data() + static_cast<std::int64_t>(r) * d;
        for (int j = 0; j < d; ++j) {
          T dxh = gr[j] * gamma->data[j];
          T xh = (xr[j] - mu) * is;
          xg[j] += is * (dxh - sum_dxh * inv_d - xh * sum_dxh_xh * inv_d);
        }
      }
    }
  });
  return out;
}

// --- conv2d -------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

// x [Cin,H,W], weight [Cout, Cin/groups, kh, kw], bias [Cout] (optional).
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int padding, int groups = 1) {
  if (x->shape.size() != 3 || w->shape.size() != 4) throw ShapeError("conv2d: rank");
  int cin = x->shape[0], h = x->shape[1], wd = x->shape[2];
  int cout = w->shape[0], cin_g = w->shape[1], kh = w->shape[2], kw = w->shape[3];
  if (cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g)
    throw ShapeError("conv2d: channel/group mismatch");
  int oh = conv_out_extent(h, kh, stride, padding);
  int ow = conv_out_extent(wd, kw, stride, padding);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel does not fit padded input");
  auto out = make_tensor<T>(Shape{cout, oh, ow});
  int cout_g = cout / groups;
  const T* X = x->data.data();
  const T* W = w->data.data();
  T* Y = out->data.data();
  for (int co = 0; co < cout; ++co) {
    int g = co / cout_g;
    T bias_v = b ? b->data[co] : T(0);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T acc = bias_v;
        for (int ci = 0; ci < cin_g; ++ci) {
          int cin_idx = g * cin_g + ci;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += X[(static_cast<std::int64_t>(cin_idx) * h + iy) * wd + ix] *
                     W[((static_cast<std::int64_t>(co) * cin_g + ci) * kh + ky) * kw + kx];
            }
          }
        }
        Y[(static_cast<std::int64_t>(co) * oh + oy) * ow + ox] = acc;
      }
  }
  detail::attach<T>(out, {x, w, b},
                    [x, w, b, stride, padding, groups, cin, h, wd, cout, cin_g, kh, kw, oh,
                     ow](Node<T>& o) {
                      int cout_g = cout / groups;
                      const T* G = o.grad.data();
                      if (b && b->requires_grad) {
                        b->ensure_grad();
                        for (int co = 0; co < cout; ++co) {
                          T acc = T(0);
                          const T* gp = G + static_cast<std::int64_t>(co) * oh * ow;
                          for (int i = 0; i < oh * ow; ++i) acc += gp[i];
                          b->grad[co] += acc;
                        }
                      }
                      if (w->requires_grad) {
                        w->ensure_grad();
                        const T* X = x->data.data();
                        for (int co = 0; co < cout; ++co) {
                          int g = co / cout_g;
                          for (int ci = 0; ci < cin_g; ++ci) {
                            int cin_idx = g * cin_g + ci;
                            for (int ky = 0; ky < kh; ++ky)
                              for (int kx = 0; kx < kw; ++kx) {
                                T acc = T(0);
                                for (int oy = 0; oy < oh; ++oy) {
                                  int iy = oy * stride - padding + ky;
                                  if (iy < 0 || iy >= h) continue;
                                  for (int ox = 0; ox < ow; ++ox) {
                                    int ix = ox * stride - padding + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    acc += G[(static_cast<std::int64_t>(co) * oh + oy) * ow + ox] *
                                           X[(static_cast<std::int64_t>(cin_idx) * h + iy) * wd +
                                             ix];
                                  }
                                }
                                w->grad[((static_cast<std::int64_t>(co) * cin_g + ci) * kh + ky) *
                                            kw +
                                        kx] += acc;
                              }
                          }
                        }
                      }
                      if (x->requires_grad) {
                        x->ensure_grad();
                        const T* W = w->data.data();
                        for (int cin_idx = 0; cin_idx < cin; ++cin_idx) {
                          int g = cin_idx / cin_g;
                          int ci = cin_idx % cin_g;
                          for (int iy = 0; iy < h; ++iy)
                            for (int ix = 0; ix < wd; ++ix) {
                              T acc = T(0);
                              for (int co = g * cout_g; co < (g + 1) * cout_g; ++co)
                                for (int ky = 0; ky < kh; ++ky) {
                                  int oy_num = iy + padding - ky;
                                  if (oy_num < 0 || oy_num % stride != 0) continue;
                                  int oy = oy_num / stride;
                                  if (oy >= oh) continue;
                                  for (int kx = 0; kx < kw; ++kx) {
                                    int ox_num = ix + padding - kx;
                                    if (ox_num < 0 || ox_num % stride != 0) continue;
                                    int ox = ox_num / stride;
                                    if (ox >= ow) continue;
                                    acc +=
                                        G[(static_cast<std::int64_t>(co) * oh + oy) * ow + ox] *
                                        W[((static_cast<std::int64_t>(co) * cin_g + ci) * kh + ky) *
                                              kw +
                                          kx];
                                  }
                                }
                              x->grad[(static_cast<std::int64_t>(cin_idx) * h + iy) * wd + ix] +=
                                  acc;
                            }
                        }
                      }
                    });
  return out;
}

// x [Cin,H,W], weight [Cin, Cout, kh, kw]. Output (H-1)*s + k - 2p.
template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                            int stride, int padding = 0) {
  if (x->shape.size() != 3 || w->shape.size() != 4) throw ShapeError("conv_transpose2d: rank");
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
  int cin = x->shape[0], h = x->shape[1], wd = x->shape[2];
  if (w->shape[0] != cin) throw ShapeError("conv_transpose2d: channel mismatch");
  int cout = w->shape[1], kh = w->shape[2], kw = w->shape[3];
  int oh = (h - 1) * stride + kh - 2 * padding;
  int ow = (wd - 1) * stride + kw - 2 * padding;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
  auto out = make_tensor<T>(Shape{cout, oh, ow});
  const T* X = x->data.data();
  const T* W = w->data.data();
  T* Y = out->data.data();
  // Gather form: fixed accumulation order per output element.
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T acc = b ? b->data[co] : T(0);
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            int iy_num = oy + padding - ky;
            if (iy_num < 0 || iy_num % stride != 0) continue;
            int iy = iy_num / stride;
            if (iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix_num = ox + padding - kx;
              if (ix_num < 0 || ix_num % stride != 0) continue;
              int ix = ix_num / stride;
              if (ix >= wd) continue;
              acc += X[(static_cast<std::int64_t>(ci) * h + iy) * wd + ix] *
                     W[((static_cast<std::int64_t>(ci) * cout + co) * kh + ky) * kw + kx];
            }
          }
        Y[(static_cast<std::int64_t>(co) * oh + oy) * ow + ox] = acc;
      }
  detail::attach<T>(
      out, {x, w, b},
      [x, w, b, stride, padding, cin, h, wd, cout, kh, kw, oh, ow](Node<T>& o) {
        const T* G = o.grad.data();
        if (b && b->requires_grad) {
          b->ensure_grad();
          for (int co = 0; co < cout; ++co) {
            T acc = T(0);
            const T* gp = G + static_cast<std::int64_t>(co) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) acc += gp[i];
            b->grad[co] += acc;
          }
        }
        if (x->requires_grad) {
          x->ensure_grad();
          // dx plays the role of a strided convolution of the output grad.
          const T* W = w->data.data();
          for (int ci = 0; ci < cin; ++ci)
            for (int iy = 0; iy < h; ++iy)
              for (int ix = 0; ix < wd; ++ix) {
                T acc = T(0);
                for (int co = 0; co < cout; ++co)
                  for (int ky = 0; ky < kh; ++ky) {
                    int oy = iy * stride - padding + ky;
                    if (oy < 0 || oy >= oh) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      int ox = ix * stride - padding + kx;
                      if (ox < 0 || ox >= ow) continue;
                      acc += G[(static_cast<std::int64_t>(co) * oh + oy) * ow + ox] *
                             W[((static_cast<std::int64_t>(ci) * cout + co) * kh + ky) * kw + kx];
                    }
                  }
                x->grad[(static_cast<std::int64_t>(ci) * h + iy) * wd + ix] += acc;
              }
        }
        if (w->requires_grad) {
          w->ensure_grad();
          const T* X = x->data.data();
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  T acc = T(0);
                  for (int iy = 0; iy < h; ++iy) {
                    int oy = iy * stride - padding + ky;
                    if (oy < 0 || oy >= oh) continue;
                    for (int ix = 0; ix < wd; ++ix) {
                      int ox = ix * stride - padding + kx;
                      if (ox < 0 || ox >= ow) continue;
                      acc += X[(static_cast<std::int64_t>(ci) * h + iy) * wd + ix] *
                             G[(static_cast<std::int64_t>(co) * oh + oy) * ow + ox];
                    }
                  }
                  w->grad[((static_cast<std::int64_t>(ci) * cout + co) * kh + ky) * kw + kx] += acc;
                }
        }
      });
  return out;
}

// --- pooling ----------------------------------------------------------------

// Gradient routes to the first maximum in row-major window scan.
template <class T>
TensorT<T> maxpool2d(const TensorT<T>& x, int kernel = 3, int stride = 2, int padding = 1) {
  if (x->shape.size() != 3) throw ShapeError("maxpool2d: rank");
  if (kernel < 1) throw ShapeError("maxpool2d: kernel must be >= 1");
  int c = x->shape[0], h = x->shape[1], wd = x->shape[2];
  int oh = conv_out_extent(h, kernel, stride, padding);
  int ow = conv_out_extent(wd, kernel, stride, padding);
  if (oh <= 0 || ow <= 0) throw ShapeError("maxpool2d: empty output");
  auto out = make_tensor<T>(Shape{c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(out->size()), -1);
  const T* X = x->data.data();
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            int ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= wd) continue;
            std::int64_t idx = (static_cast<std::int64_t>(ci) * h + iy) * wd + ix;
            if (X[idx] > best) {
              best = X[idx];
              best_idx = idx;
            }
          }
        }
        std::int64_t oidx = (static_cast<std::int64_t>(ci) * oh + oy) * ow + ox;
        out->data[oidx] = best_idx >= 0 ? best : T(0);
        (*argmax)[oidx] = best_idx;
      }
  detail::attach<T>(out, {x}, [x, argmax](Node<T>& o) {
    x->ensure_grad();
    for (std::int64_t i = 0; i < o.size(); ++i)
      if ((*argmax)[i] >= 0) x->grad[(*argmax)[i]] += o.grad[i];
  });
  return out;
}

// --- batch norm ---------------------------------------------------------------

// Running statistics live outside the graph.
template <class T>
struct BnStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  void init(int c) {
    running_mean.assign(c, T(0));
    running_var.assign(c, T(1));
  }
};

// x [C,H,W]; train mode normalizes by per-channel spatial statistics and
// updates running stats with momentum 0.1; eval mode uses running stats.
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       BnStats<T>& stats, bool training, T momentum = T(0.1)) {
  if (x->shape.size() != 3) throw ShapeError("batchnorm2d: rank");
  int c = x->shape[0], h = x->shape[1], wd = x->shape[2];
  int n = h * wd;
  if (training && n <= 1) throw ContractError("batchnorm2d: train mode needs >1 element/channel");
  const T eps = T(1e-5);
  auto out = make_tensor<T>(x->shape);
  auto mean_v = std::make_shared<std::vector<T>>(c);
  auto inv_std_v = std::make_shared<std::vector<T>>(c);
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x->data.data() + static_cast<std::int64_t>(ci) * n;
    T mu, var;
    if (training) {
      mu = T(0);
      for (int i = 0; i < n; ++i) mu += xc[i];
      mu /= static_cast<T>(n);
      var = T(0);
      for (int i = 0; i < n; ++i) var += (xc[i] - mu) * (xc[i] - mu);
      var /= static_cast<T>(n);
      T unbiased = var * static_cast<T>(n) / static_cast<T>(n - 1);
      stats.running_mean[ci] = (T(1) - momentum) * stats.running_mean[ci] + momentum * mu;
      stats.running_var[ci] = (T(1) - momentum) * stats.running_var[ci] + momentum * unbiased;
    } else {
      mu = stats.running_mean[ci];
      var = stats.running_var[ci];
    }
    T is = T(1) / std::sqrt(var + eps);
    (*mean_v)[ci] = mu;
    (*inv_std_v)[ci] = is;
    T g = gamma->data[ci], bv = beta->data[ci];
    T* yc = out->data.data() + static_cast<std::int64_t>(ci) * n;
    for (int i = 0; i < n; ++i) yc[i] = g * ((xc[i] - mu) * is) + bv;
  }
  detail::attach<T>(
      out, {x, gamma, beta}, [x, gamma, beta, c, n, training, mean_v, inv_std_v](Node<T>& o) {
        for (int ci = 0; ci < c; ++ci) {
          const T* xc = x->data.data() + static_cast<std::int64_t>(ci) * n;
          const T* gc = o.grad.data() + static_cast<std::int64_t>(ci) * n;
          T mu = (*mean_v)[ci], is = (*inv_std_v)[ci];
          T sum_g = T(0), sum_g_xh = T(0);
          for (int i = 0; i < n; ++i) {
            sum_g += gc[i];
            sum_g_xh += gc[i] * ((xc[i] - mu) * is);
          }
          if (gamma->requires_grad) {
            gamma->ensure_grad();
            gamma->grad[ci] += sum_g_xh;
          }
          if (beta->requires_grad) {
            beta->ensure_grad();
            beta->grad[ci] += sum_g;
          }
          if (x->requires_grad) {
            x->ensure_grad();
            T g = gamma->data[ci];
            T* xg = x->grad.data() + static_cast<std::int64_t>(ci) * n;
            if (training) {
              T inv_n = T(1) / static_cast<T>(n);
              for (int i = 0; i < n; ++i) {
                T xh = (xc[i] - mu) * is;
                xg[i] += g * is * (gc[i] - sum_g * inv_n - xh * sum_g_xh * inv_n);
              }
            } else {
              for (int i = 0; i < n; ++i) xg[i] += g * is * gc[i];
            }
          }
        }
      });
  return out;
}

// --- layout transforms ---------------------------------------------------------

// [C,H,W] -> token sequence [H*W, C], row-major over pixels.
template <class T>
TensorT<T> chw_to_tokens(const TensorT<T>& x) {
  if (x->shape.size() != 3) throw ShapeError("chw_to_tokens: rank");
  int c = x->shape[0], h = x->shape[1], wd = x->shape[2];
  int n = h * wd;
  auto out = make_tensor<T>(Shape{n, c});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < n; ++i)
      out->data[static_cast<std::int64_t>(i) * c + ci] =
          x->data[static_cast<std::int64_t>(ci) * n + i];
  detail::attach<T>(out, {x}, [x, c, n](Node<T>& o) {
    x->ensure_grad();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < n; ++i)
        x->grad[static_cast<std::int64_t>(ci) * n + i] +=
            o.grad[static_cast<std::int64_t>(i) * c + ci];
  });
  return out;
}

// [H*W, C] -> [C,H,W].
template <class T>
TensorT<T> tokens_to_chw(const TensorT<T>& x, int h, int wd) {
  if (x->shape.size() != 2 || x->shape[0] != h * wd) throw ShapeError("tokens_to_chw: shape");
  int c = x->shape[1];
  int n = h * wd;
  auto out = make_tensor<T>(Shape{c, h, wd});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci)
      out->data[static_cast<std::int64_t>(ci) * n + i] =
          x->data[static_cast<std::int64_t>(i) * c + ci];
  detail::attach<T>(out, {x}, [x, c, n](Node<T>& o) {
    x->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci)
        x->grad[static_cast<std::int64_t>(i) * c + ci] +=
            o.grad[static_cast<std::int64_t>(ci) * n + i];
  });
  return out;
}

// Zero padding on bottom/right only.
template <class T>
TensorT<T> pad2d_br(const TensorT<T>& x, int out_h, int out_w) {
  if (x->shape.size() != 3) throw ShapeError("pad2d_br: rank");
  int c = x->shape[0], h = x->shape[1], wd = x->shape[2];
  if (out_h < h || out_w < wd) throw ShapeError("pad2d_br: target smaller than input");
  if (out_h == h && out_w == wd) return x;
  auto out = make_tensor<T>(Shape{c, out_h, out_w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      std::copy(x->data.begin() + (static_cast<std::int64_t>(ci) * h + y) * wd,
                x->data.begin() + (static_cast<std::int64_t>(ci) * h + y + 1) * wd,
                out->data.begin() + (static_cast<std::int64_t>(ci) * out_h + y) * out_w);
  detail::attach<T>(out, {x}, [x, c, h, wd, out_h, out_w](Node<T>& o) {
    x->ensure_grad();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wd; ++xx)
          x->grad[(static_cast<std::int64_t>(ci) * h + y) * wd + xx] +=
              o.grad[(static_cast<std::int64_t>(ci) * out_h + y) * out_w + xx];
  });
  return out;
}

// Top-left crop.
template <class T>
TensorT<T> crop2d(const TensorT<T>& x, int out_h, int out_w) {
  if (x->shape.size() != 3) throw ShapeError("crop2d: rank");
  int c = x->shape[0], h = x->shape[1], wd = x->shape[2];
  if (out_h > h || out_w > wd) throw ShapeError("crop2d: target larger than input");
  if (out_h == h && out_w == wd) return x;
  auto out = make_tensor<T>(Shape{c, out_h, out_w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < out_h; ++y)
      std::copy(x->data.begin() + (static_cast<std::int64_t>(ci) * h + y) * wd,
                x->data.begin() + (static_cast<std::int64_t>(ci) * h + y) * wd + out_w,
                out->data.begin() + (static_cast<std::int64_t>(ci) * out_h + y) * out_w);
  detail::attach<T>(out, {x}, [x, c, h, wd, out_h, out_w](Node<T>& o) {
    x->ensure_grad();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx)
          x->grad[(static_cast<std::int64_t>(ci) * h + y) * wd + xx] +=
              o.grad[(static_cast<std::int64_t>(ci) * out_h + y) * out_w + xx];
  });
  return out;
}

// Concatenate [C_i,H,W] maps along channels.
template <class T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty");
  int h = parts[0]->shape.at(1), wd = parts[0]->shape.at(2);
  int ctot = 0;
  for (const auto& p : parts) {
    if (p->shape.size() != 3 || p->shape[1] != h || p->shape[2] != wd)
      throw ShapeError("concat_channels: spatial mismatch");
    ctot += p->shape[0];
  }
  auto out = make_tensor<T>(Shape{ctot, h, wd});
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
    off += p->size();
  }
  bool need = false;
  if (grad_mode())
    for (const auto& p : parts)
      if (p->requires_grad) need = true;
  if (need) {
    out->requires_grad = true;
    out->parents.assign(parts.begin(), parts.end());
    auto copies = parts;
    out->backward_fn = [copies](Node<T>& o) {
      std::int64_t off2 = 0;
      for (const auto& p : copies) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t i = 0; i < p->size(); ++i) p->grad[i] += o.grad[off2 + i];
        }
        off2 += p->size();
      }
    };
  }
  return out;
}

// --- bilinear sampling ----------------------------------------------------------

namespace detail {

// Tap weights for align-corners-false sampling at normalized (x,y).
// Returns pixel base (x0,y0) and fractional weights.
struct BilinearTap {
  int x0, y0;
  double wx, wy;
};

inline BilinearTap bilinear_tap(double x_norm, double y_norm, int w, int h) {
  double xf = x_norm * w - 0.5;
  double yf = y_norm * h - 0.5;
  double x0f = std::floor(xf), y0f = std::floor(yf);
  return BilinearTap{static_cast<int>(x0f), static_cast<int>(y0f), xf - x0f, yf - y0f};
}

}  // namespace detail

// Sample a [C,H,W] map at normalized points [P,2] (x,y), pixel centers at
// ((i+0.5)/W, (j+0.5)/H); taps outside the map contribute zero. Gradients
// flow to both the value map and the point coordinates.
template <class T>
TensorT<T> bilinear_sample(const TensorT<T>& value, const TensorT<T>& points) {
  if (value->shape.size() != 3) throw ShapeError("bilinear_sample: value rank");
  if (points->shape.size() != 2 || points->shape[1] != 2)
    throw ShapeError("bilinear_sample: points must be [P,2]");
  int c = value->shape[0], h = value->shape[1], w = value->shape[2];
  int np = points->shape[0];
  auto out = make_tensor<T>(Shape{np, c});
  auto at = [&](int ci, int y, int x) -> T {
    if (x < 0 || x >= w || y < 0 || y >= h) return T(0);
    return value->data[(static_cast<std::int64_t>(ci) * h + y) * w + x];
  };
  for (int p = 0; p < np; ++p) {
    auto tap = detail::bilinear_tap(static_cast<double>(points->data[2 * p]),
                                    static_cast<double>(points->data[2 * p + 1]), w, h);
    T wx = static_cast<T>(tap.wx), wy = static_cast<T>(tap.wy);
    for (int ci = 0; ci < c; ++ci) {
      T v00 = at(ci, tap.y0, tap.x0), v01 = at(ci, tap.y0, tap.x0 + 1);
      T v10 = at(ci, tap.y0 + 1, tap.x0), v11 = at(ci, tap.y0 + 1, tap.x0 + 1);
      out->data[static_cast<std::int64_t>(p) * c + ci] =
          (v00 * (T(1) - wx) + v01 * wx) * (T(1) - wy) + (v10 * (T(1) - wx) + v11 * wx) * wy;
    }
  }
  detail::attach<T>(out, {value, points}, [value, points, c, h, w, np](Node<T>& o) {
    auto at = [&](int ci, int y, int x) -> T {
      if (x < 0 || x >= w || y < 0 || y >= h) return T(0);
      return value->data[(static_cast<std::int64_t>(ci) * h + y) * w + x];
    };
    auto add_v = [&](int ci, int y, int x, T g) {
      if (x < 0 || x >= w || y < 0 || y >= h) return;
      value->grad[(static_cast<std::int64_t>(ci) * h + y) * w + x] += g;
    };
    if (value->requires_grad) value->ensure_grad();
    if (points->requires_grad) points->ensure_grad();
    for (int p = 0; p < np; ++p) {
      auto tap = detail::bilinear_tap(static_cast<double>(points->data[2 * p]),
                                      static_cast<double>(points->data[2 * p + 1]), w, h);
      T wx = static_cast<T>(tap.wx), wy = static_cast<T>(tap.wy);
      T dx_acc = T(0), dy_acc = T(0);
      for (int ci = 0; ci < c; ++ci) {
        T g = o.grad[static_cast<std::int64_t>(p) * c + ci];
        if (value->requires_grad) {
          add_v(ci, tap.y0, tap.x0, g * (T(1) - wx) * (T(1) - wy));
          add_v(ci, tap.y0, tap.x0 + 1, g * wx * (T(1) - wy));
          add_v(ci, tap.y0 + 1, tap.x0, g * (T(1) - wx) * wy);
          add_v(ci, tap.y0 + 1, tap.x0 + 1, g * wx * wy);
        }
        if (points->requires_grad) {
          T v00 = at(ci, tap.y0, tap.x0), v01 = at(ci, tap.y0, tap.x0 + 1);
          T v10 = at(ci, tap.y0 + 1, tap.x0), v11 = at(ci, tap.y0 + 1, tap.x0 + 1);
          T dfdx = (v01 - v00) * (T(1) - wy) + (v11 - v10) * wy;
          T dfdy = (v10 - v00) * (T(1) - wx) + (v11 - v01) * wx;
          dx_acc += g * dfdx;
          dy_acc += g * dfdy;
        }
      }
      if (points->requires_grad) {
        // d(x_norm) = d(x_f) * W per the center convention.
        points->grad[2 * p] += dx_acc * static_cast<T>(w);
        points->grad[2 * p + 1] += dy_acc * static_cast<T>(h);
      }
    }
  });
  return out;
}

// Resize [C,H,W] -> [C,oh,ow], align-corners-false with edge clamping.
template <class T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int oh, int ow) {
  if (x->shape.size() != 3) throw ShapeError("bilinear_resize: rank");
  int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  if (oh == h && ow == w) return x;
  auto out = make_tensor<T>(Shape{c, oh, ow});
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  // Precompute tap indices/weights per axis.
  std::vector<int> xs0(ow), xs1(ow), ys0(oh), ys1(oh);
  std::vector<T> wxs(ow), wys(oh);
  for (int ox = 0; ox < ow; ++ox) {
    double xf = (ox + 0.5) * static_cast<double>(w) / ow - 0.5;
    int x0 = static_cast<int>(std::floor(xf));
    wxs[ox] = static_cast<T>(xf - x0);
    xs0[ox] = clampi(x0, 0, w - 1);
    xs1[ox] = clampi(x0 + 1, 0, w - 1);
  }
  for (int oy = 0; oy < oh; ++oy) {
    double yf = (oy + 0.5) * static_cast<double>(h) / oh - 0.5;
    int y0 = static_cast<int>(std::floor(yf));
    wys[oy] = static_cast<T>(yf - y0);
    ys0[oy] = clampi(y0, 0, h - 1);
    ys1[oy] = clampi(y0 + 1, 0, h - 1);
  }
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x->data.data() + static_cast<std::int64_t>(ci) * h * w;
    T* yc = out->data.data() + static_cast<std::int64_t>(ci) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      T wy = wys[oy];
      for (int ox = 0; ox < ow; ++ox) {
        T wx = wxs[ox];
        T v00 = xc[static_cast<std::int64_t>(ys0[oy]) * w + xs0[ox]];
        T v01 = xc[static_cast<std::int64_t>(ys0[oy]) * w + xs1[ox]];
        T v10 = xc[static_cast<std::int64_t>(ys1[oy]) * w + xs0[ox]];
        T v11 = xc[static_cast<std::int64_t>(ys1[oy]) * w + xs1[ox]];
        yc[static_cast<std::int64_t>(oy) * ow + ox] =
            (v00 * (T(1) - wx) + v01 * wx) * (T(1) - wy) + (v10 * (T(1) - wx) + v11 * wx) * wy;
      }
    }
  }
  auto taps = std::make_shared<std::tuple<std::vector<int>, std::vector<int>, std::vector<int>,
                                          std::vector<int>, std::vector<T>, std::vector<T>>>(
      xs0, xs1, ys0, ys1, wxs, wys);
  detail::attach<T>(out, {x}, [x, c, h, w, oh, ow, taps](Node<T>& o) {
    x->ensure_grad();
    const auto& [xs0, xs1, ys0, ys1, wxs, wys] = *taps;
    for (int ci = 0; ci < c; ++ci) {
      T* xg = x->grad.data() + static_cast<std::int64_t>(ci) * h * w;
      const T* gc = o.grad.data() + static_cast<std::int64_t>(ci) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        T wy = wys[oy];
        for (int ox = 0; ox < ow; ++ox) {
          T wx = wxs[ox];
          T g = gc[static_cast<std::int64_t>(oy) * ow + ox];
          xg[static_cast<std::int64_t>(ys0[oy]) * w + xs0[ox]] += g * (T(1) - wx) * (T(1) - wy);
          xg[static_cast<std::int64_t>(ys0[oy]) * w + xs1[ox]] += g * wx * (T(1) - wy);
          xg[static_cast<std::int64_t>(ys1[oy]) * w + xs0[ox]] += g * (T(1) - wx) * wy;
          xg[static_cast<std::int64_t>(ys1[oy]) * w + xs1[ox]] += g * wx * wy;
        }
      }
    }
  });
  return out;
}

// Adaptive average pooling to (oh, ow) bins.
template <class T>
TensorT<T> adaptive_avg_pool2d(const TensorT<T>& x, int oh, int ow) {
  if (x->shape.size() != 3) throw ShapeError("adaptive_avg_pool2d: rank");
  int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  auto out = make_tensor<T>(Shape{c, oh, ow});
  auto bin = [](int i, int n, int o) {
    return std::pair<int, int>{(i * n) / o, ((i + 1) * n + o - 1) / o};
  };
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < oh; ++oy) {
      auto [y0, y1] = bin(oy, h, oh);
      for (int ox = 0; ox < ow; ++ox) {
        auto [x0, x1] = bin(ox, w, ow);
        T acc = T(0);
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx)
            acc += x->data[(static_cast<std::int64_t>(ci) * h + y) * w + xx];
        out->data[(static_cast<std::int64_t>(ci) * oh + oy) * ow + ox] =
            acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  detail::attach<T>(out, {x}, [x, c, h, w, oh, ow](Node<T>& o) {
    x->ensure_grad();
    auto bin = [](int i, int n, int ob) {
      return std::pair<int, int>{(i * n) / ob, ((i + 1) * n + ob - 1) / ob};
    };
    for (int ci = 0; ci < c; ++ci)
      for (int oy = 0; oy < oh; ++oy) {
        auto [y0, y1] = bin(oy, h, oh);
        for (int ox = 0; ox < ow; ++ox) {
          auto [x0, x1] = bin(ox, w, ow);
          T g = o.grad[(static_cast<std::int64_t>(ci) * oh + oy) * ow + ox] /
                static_cast<T>((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx)
              x->grad[(static_cast<std::int64_t>(ci) * h + y) * w + xx] += g;
        }
      }
  });
  return out;
}

// Mean over groups of `group` consecutive rows: [G*group, d] -> [G, d].
template <class T>
TensorT<T> mean_rows_grouped(const TensorT<T>& x, int group) {
  if (x->shape.size() != 2 || x->shape[0] % group != 0) throw ShapeError("mean_rows_grouped");
  int g = x->shape[0] / group, d = x->shape[1];
  auto out = make_tensor<T>(Shape{g, d});
  T inv = T(1) / static_cast<T>(group);
  for (int r = 0; r < g; ++r)
    for (int j = 0; j < d; ++j) {
      T acc = T(0);
      for (int i = 0; i < group; ++i)
        acc += x->data[(static_cast<std::int64_t>(r) * group + i) * d + j];
      out->data[static_cast<std::int64_t>(r) * d + j] = acc * inv;
    }
  detail::attach<T>(out, {x}, [x, g, d, group, inv](Node<T>& o) {
    x->ensure_grad();
    for (int r = 0; r < g; ++r)
      for (int i = 0; i < group; ++i)
        for (int j = 0; j < d; ++j)
          x->grad[(static_cast<std::int64_t>(r) * group + i) * d + j] +=
              o.grad[static_cast<std::int64_t>(r) * d + j] * inv;
  });
  return out;
}

// --- multi-head attention --------------------------------------------------------

template <class T>
struct AttentionWeights {
  // [B, heads, Tq, Tk] row-major; filled when a probe is passed.
  std::vector<T> probs;
  int batch = 0, heads = 0, tq = 0, tk = 0;
};

// Scaled dot-product attention over B independent sequences packed as
// 2D tensors: q [B*Tq, D], kv [B*Tk, D]. Projections may bottleneck to Dp.
// wq/wk/wv: [D,Dp], wo: [Dp,D]. q==kv realizes self-attention.
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& q_in, const TensorT<T>& kv_in, int batch, int tq,
                                int tk, int heads, const TensorT<T>& wq, const TensorT<T>& bq,
                                const TensorT<T>& wk, const TensorT<T>& bk, const TensorT<T>& wv,
                                const TensorT<T>& bv, const TensorT<T>& wo, const TensorT<T>& bo,
                                AttentionWeights<T>* probe = nullptr) {
  int d = q_in->shape.at(1);
  int dp = wq->shape.at(1);
  if (q_in->shape[0] != batch * tq || kv_in->shape[0] != batch * tk)
    throw ShapeError("multi_head_attention: sequence layout");
  if (dp % heads != 0) throw ShapeError("multi_head_attention: dim not divisible by heads");
  if (kv_in->shape.at(1) != d) throw ShapeError("multi_head_attention: q/kv dim mismatch");
  int hd = dp / heads;
  T scalev = T(1) / std::sqrt(static_cast<T>(hd));

  auto qp = linear(q_in, wq, bq);   // [B*Tq, Dp]
  auto kp = linear(kv_in, wk, bk);  // [B*Tk, Dp]
  auto vp = linear(kv_in, wv, bv);  // [B*Tk, Dp]

  // Fused attention core with hand backward; stores softmax probabilities.
  auto out_core = make_tensor<T>(Shape{batch * tq, dp});
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(batch) * heads * tq * tk, T(0));
  {
    const T* Q = qp->data.data();
    const T* K = kp->data.data();
    const T* V = vp->data.data();
    T* O = out_core->data.data();
    std::vector<T> logits(tk);
    for (int b = 0; b < batch; ++b)
      for (int hh = 0; hh < heads; ++hh)
        for (int i = 0; i < tq; ++i) {
          const T* qrow = Q + (static_cast<std::int64_t>(b) * tq + i) * dp + hh * hd;
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j < tk; ++j) {
            const T* krow = K + (static_cast<std::int64_t>(b) * tk + j) * dp + hh * hd;
            T s = T(0);
            for (int cdim = 0; cdim < hd; ++cdim) s += qrow[cdim] * krow[cdim];
            s *= scalev;
            logits[j] = s;
            mx = std::max(mx, s);
          }
          T denom = T(0);
          T* arow = probs->data() +
                    ((static_cast<std::int64_t>(b) * heads + hh) * tq + i) * tk;
          for (int j = 0; j < tk; ++j) {
            arow[j] = std::exp(logits[j] - mx);
            denom += arow[j];
          }
          for (int j = 0; j < tk; ++j) arow[j] /= denom;
          T* orow = O + (static_cast<std::int64_t>(b) * tq + i) * dp + hh * hd;
          for (int cdim = 0; cdim < hd; ++cdim) orow[cdim] = T(0);
          for (int j = 0; j < tk; ++j) {
            T a = arow[j];
            const T* vrow = V + (static_cast<std::int64_t>(b) * tk + j) * dp + hh * hd;
            for (int cdim = 0; cdim < hd; ++cdim) orow[cdim] += a * vrow[cdim];
          }
        }
  }
  if (probe) {
    probe->probs = *probs;
    probe->batch = batch;
    probe->heads = heads;
    probe->tq = tq;
    probe->tk = tk;
  }
  detail::attach<T>(out_core, {qp, kp, vp},
                    [qp, kp, vp, probs, batch, tq, tk, heads, hd, dp, scalev](Node<T>& o) {
                      if (qp->requires_grad) qp->ensure_grad();
                      if (kp->requires_grad) kp->ensure_grad();
                      if (vp->requires_grad) vp->ensure_grad();
                      const T* Q = qp->data.data();
                      const T* K = kp->data.data();
                      const T* V = vp->data.data();
                      const T* G = o.grad.data();
                      std::vector<T> dlog(tk);
                      for (int b = 0; b < batch; ++b)
                        for (int hh = 0; hh < heads; ++hh)
                          for (int i = 0; i < tq; ++i) {
                            const T* arow =
                                probs->data() +
                                ((static_cast<std::int64_t>(b) * heads + hh) * tq + i) * tk;
                            const T* grow =
                                G + (static_cast<std::int64_t>(b) * tq + i) * dp + hh * hd;
                            // dA and dV.
                            T dot = T(0);
                            for (int j = 0; j < tk; ++j) {
                              const T* vrow =
                                  V + (static_cast<std::int64_t>(b) * tk + j) * dp + hh * hd;
                              T da = T(0);
                              for (int cdim = 0; cdim < hd; ++cdim) da += grow[cdim] * vrow[cdim];
                              dlog[j] = da;
                              dot += da * arow[j];
                              if (vp->requires_grad) {
                                T* vg = vp->grad.data() +
                                        (static_cast<std::int64_t>(b) * tk + j) * dp + hh * hd;
                                T a = arow[j];
                                for (int cdim = 0; cdim < hd; ++cdim)
                                  vg[cdim] += a * grow[cdim];
                              }
                            }
                            // Softmax backward to logits, then into Q/K.
                            const T* qrow =
                                Q + (static_cast<std::int64_t>(b) * tq + i) * dp + hh * hd;
                            for (int j = 0; j < tk; ++j) {
                              T ds = arow[j] * (dlog[j] - dot) * scalev;
                              if (ds == T(0)) continue;
                              const T* krow =
                                  K + (static_cast<std::int64_t>(b) * tk + j) * dp + hh * hd;
                              if (qp->requires_grad) {
                                T* qg = qp->grad.data() +
                                        (static_cast<std::int64_t>(b) * tq + i) * dp + hh * hd;
                                for (int cdim = 0; cdim < hd; ++cdim) qg[cdim] += ds * krow[cdim];
                              }
                              if (kp->requires_grad) {
                                T* kg = kp->grad.data() +
                                        (static_cast<std::int64_t>(b) * tk + j) * dp + hh * hd;
                                for (int cdim = 0; cdim < hd; ++cdim) kg[cdim] += ds * qrow[cdim];
                              }
                            }
                          }
                    });
  return linear(out_core, wo, bo);
}

// --- multi-scale deformable attention ----------------------------------------------

// Grid of normalized cell centers for an H x W level, row-major, (x,y).
template <class T>
std::vector<T> grid_centers(int h, int w) {
  std::vector<T> pts;
  pts.reserve(static_cast<size_t>(h) * w * 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      pts.push_back(static_cast<T>((x + 0.5) / w));
      pts.push_back(static_cast<T>((y + 0.5) / h));
    }
  return pts;
}

// One normalized center per token of the spec, each on its own level's grid.
template <class T>
std::vector<T> make_reference_points(const LevelSpec& spec) {
  if (spec.levels.empty()) throw ShapeError("make_reference_points: empty spec");
  std::vector<T> pts;
  pts.reserve(static_cast<size_t>(spec.total()) * 2);
  for (auto& [h, w] : spec.levels) {
    auto lv = grid_centers<T>(h, w);
    pts.insert(pts.end(), lv.begin(), lv.end());
  }
  return pts;
}

template <class T>
struct MsDeformParams {
  TensorT<T> w_value, b_value;    // [D,D], [D]
  TensorT<T> w_offset, b_offset;  // [D, h*L*P*2], [h*L*P*2]
  TensorT<T> w_attn, b_attn;      // [D, h*L*P], [h*L*P]
  TensorT<T> w_out, b_out;        // [D,D], [D]
  int heads = 8;
  int points = 4;
};

// Sampling/aggregation core. value_proj [Vtot,D] already projected; offsets
// [Q, h*L*P*2]; attn [Q, h*L*P] softmax-normalized jointly over (L x P) per
// head. Sampling location = ref + offset / (W_l, H_l) per level.
template <class T>
TensorT<T> ms_deform_core(const TensorT<T>& value_proj, const TensorT<T>& offsets,
                          const TensorT<T>& attn, const LevelSpec& spec,
                          const std::vector<T>& ref_points, int heads, int points) {
  int vtot = value_proj->shape.at(0);
  int d = value_proj->shape.at(1);
  int q = offsets->shape.at(0);
  int nl = spec.num_levels();
  if (vtot != spec.total()) throw ShapeError("ms_deform_attn: value/spec length mismatch");
  if (d % heads != 0) throw ShapeError("ms_deform_attn: dim not divisible by heads");
  if (offsets->shape.at(1) != heads * nl * points * 2 || attn->shape.at(0) != q ||
      attn->shape.at(1) != heads * nl * points)
    throw ShapeError("ms_deform_attn: offsets/attn layout");
  if (static_cast<int>(ref_points.size()) != q * 2)
    throw ShapeError("ms_deform_attn: ref point count");
  int hd = d / heads;
  auto out = make_tensor<T>(Shape{q, d});

  auto sample_val = [&](int lvl, int hh, int y, int x, int cdim) -> T {
    auto [lh, lw] = spec.levels[lvl];
    if (x < 0 || x >= lw || y < 0 || y >= lh) return T(0);
    int row = spec.offsets[lvl] + y * lw + x;
    return value_proj->data[static_cast<std::int64_t>(row) * d + hh * hd + cdim];
  };

  for (int qi = 0; qi < q; ++qi) {
    T rx = ref_points[2 * qi], ry = ref_points[2 * qi + 1];
    for (int hh = 0; hh < heads; ++hh) {
      T* orow = out->data.data() + static_cast<std::int64_t>(qi) * d + hh * hd;
      for (int lvl = 0; lvl < nl; ++lvl) {
        auto [lh, lw] = spec.levels[lvl];
        for (int pp = 0; pp < points; ++pp) {
          std::int64_t flat = ((static_cast<std::int64_t>(hh) * nl + lvl) * points + pp);
          T ox = offsets->data[static_cast<std::int64_t>(qi) * heads * nl * points * 2 + flat * 2];
          T oy =
              offsets->data[static_cast<std::int64_t>(qi) * heads * nl * points * 2 + flat * 2 + 1];
          T a = attn->data[static_cast<std::int64_t>(qi) * heads * nl * points + flat];
          double sx = static_cast<double>(rx) + static_cast<double>(ox) / lw;
          double sy = static_cast<double>(ry) + static_cast<double>(oy) / lh;
          auto tap = detail::bilinear_tap(sx, sy, lw, lh);
          T wx = static_cast<T>(tap.wx), wy = static_cast<T>(tap.wy);
          for (int cdim = 0; cdim < hd; ++cdim) {
            T v00 = sample_val(lvl, hh, tap.y0, tap.x0, cdim);
            T v01 = sample_val(lvl, hh, tap.y0, tap.x0 + 1, cdim);
            T v10 = sample_val(lvl, hh, tap.y0 + 1, tap.x0, cdim);
            T v11 = sample_val(lvl, hh, tap.y0 + 1, tap.x0 + 1, cdim);
            T s = (v00 * (T(1) - wx) + v01 * wx) * (T(1) - wy) +
                  (v10 * (T(1) - wx) + v11 * wx) * wy;
            orow[cdim] += a * s;
          }
        }
      }
    }
  }
  auto refs = std::make_shared<std::vector<T>>(ref_points);
  detail::attach<T>(out, {value_proj, offsets, attn},
                    [value_proj, offsets, attn, spec, refs, heads, points, q, d, hd,
                     nl](Node<T>& o) {
                      if (value_proj->requires_grad) value_proj->ensure_grad();
                      if (offsets->requires_grad) offsets->ensure_grad();
                      if (attn->requires_grad) attn->ensure_grad();
                      auto val_at = [&](int lvl, int hh, int y, int x, int cdim) -> T {
                        auto [lh, lw] = spec.levels[lvl];
                        if (x < 0 || x >= lw || y < 0 || y >= lh) return T(0);
                        int row = spec.offsets[lvl] + y * lw + x;
                        return value_proj
                            ->data[static_cast<std::int64_t>(row) * d + hh * hd + cdim];
                      };
                      auto val_add = [&](int lvl, int hh, int y, int x, int cdim, T g) {
                        auto [lh, lw] = spec.levels[lvl];
                        if (x < 0 || x >= lw || y < 0 || y >= lh) return;
                        int row = spec.offsets[lvl] + y * lw + x;
                        value_proj->grad[static_cast<std::int64_t>(row) * d + hh * hd + cdim] += g;
                      };
                      for (int qi = 0; qi < q; ++qi) {
                        T rx = (*refs)[2 * qi], ry = (*refs)[2 * qi + 1];
                        for (int hh = 0; hh < heads; ++hh) {
                          const T* grow =
                              o.grad.data() + static_cast<std::int64_t>(qi) * d + hh * hd;
                          for (int lvl = 0; lvl < nl; ++lvl) {
                            auto [lh, lw] = spec.levels[lvl];
                            for (int pp = 0; pp < points; ++pp) {
                              std::int64_t flat =
                                  ((static_cast<std::int64_t>(hh) * nl + lvl) * points + pp);
                              std::int64_t obase =
                                  static_cast<std::int64_t>(qi) * heads * nl * points * 2 +
                                  flat * 2;
                              std::int64_t abase =
                                  static_cast<std::int64_t>(qi) * heads * nl * points + flat;
                              T ox = offsets->data[obase], oy = offsets->data[obase + 1];
                              T a = attn->data[abase];
                              double sx = static_cast<double>(rx) + static_cast<double>(ox) / lw;
                              double sy = static_cast<double>(ry) + static_cast<double>(oy) / lh;
                              auto tap = detail::bilinear_tap(sx, sy, lw, lh);
                              T wx = static_cast<T>(tap.wx), wy = static_cast<T>(tap.wy);
                              T da = T(0), dxf = T(0), dyf = T(0);
                              for (int cdim = 0; cdim < hd; ++cdim) {
                                T g = grow[cdim];
                                T v00 = val_at(lvl, hh, tap.y0, tap.x0, cdim);
                                T v01 = val_at(lvl, hh, tap.y0, tap.x0 + 1, cdim);
                                T v10 = val_at(lvl, hh, tap.y0 + 1, tap.x0, cdim);
                                T v11 = val_at(lvl, hh, tap.y0 + 1, tap.x0 + 1, cdim);
                                T s = (v00 * (T(1) - wx) + v01 * wx) * (T(1) - wy) +
                                      (v10 * (T(1) - wx) + v11 * wx) * wy;
                                da += g * s;
                                if (value_proj->requires_grad) {
                                  T ga = g * a;
                                  val_add(lvl, hh, tap.y0, tap.x0, cdim,
                                          ga * (T(1) - wx) * (T(1) - wy));
                                  val_add(lvl, hh, tap.y0, tap.x0 + 1, cdim,
                                          ga * wx * (T(1) - wy));
                                  val_add(lvl, hh, tap.y0 + 1, tap.x0, cdim,
                                          ga * (T(1) - wx) * wy);
                                  val_add(lvl, hh, tap.y0 + 1, tap.x0 + 1, cdim, ga * wx * wy);
                                }
                                if (offsets->requires_grad) {
                                  dxf += g * a *
                                         ((v01 - v00) * (T(1) - wy) + (v11 - v10) * wy);
                                  dyf += g * a *
                                         ((v10 - v00) * (T(1) - wx) + (v11 - v01) * wx);
                                }
                              }
                              if (attn->requires_grad) attn->grad[abase] += da;
                              if (offsets->requires_grad) {
                                // d(loc_x) = d(x_f) * W_l; offset enters as
                                // loc = ref + off/W_l, so d(off) = d(x_f).
                                offsets->grad[obase] += dxf;
                                offsets->grad[obase + 1] += dyf;
                              }
                            }
                          }
                        }
                      }
                    });
  return out;
}

// Full deformable attention: offsets and weights are linear in the query,
// weights softmax-normalized jointly over (levels x points) per head.
template <class T>
TensorT<T> ms_deform_attn(const TensorT<T>& query, const TensorT<T>& value, const LevelSpec& spec,
                          const std::vector<T>& ref_points, const MsDeformParams<T>& p) {
  int q = query->shape.at(0);
  int nl = spec.num_levels();
  int lp = nl * p.points;
  auto vp = linear(value, p.w_value, p.b_value);
  auto off = linear(query, p.w_offset, p.b_offset);
  auto logits = linear(query, p.w_attn, p.b_attn);            // [Q, h*L*P]
  auto logits_hp = reshape(logits, Shape{q * p.heads, lp});   // softmax over L*P
  auto attn = reshape(softmax_rows(logits_hp), Shape{q, p.heads * lp});
  auto core = ms_deform_core(vp, off, attn, spec, ref_points, p.heads, p.points);
  return linear(core, p.w_out, p.b_out);
}

}  // namespace hsia
