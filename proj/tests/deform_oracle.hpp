#pragma once
// Independent naive-loop reference for multi-scale deformable attention.
// Everything is computed in double with plain index arithmetic and no shared
// code paths with the library implementation.

#include <cmath>
#include <vector>

#include "hsia/ops.hpp"

namespace oracle {

// query [Q,D], value [Vtot,D] row-major; returns [Q,D].
template <class T>
std::vector<double> ms_deform_naive(const std::vector<T>& query, const std::vector<T>& value,
                                    const hsia::LevelSpec& spec, const std::vector<T>& refs,
                                    const hsia::MsDeformParams<T>& p, int q_count, int d) {
  int nl = spec.num_levels();
  int heads = p.heads, points = p.points, hd = d / heads;
  int vtot = spec.total();
  auto lin = [&](const std::vector<T>& x, int rows, const hsia::TensorT<T>& w,
                 const hsia::TensorT<T>& b) {
    int cols = w->shape[1];
    std::vector<double> y(static_cast<std::size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        double acc = b->data[j];
        for (int k = 0; k < d; ++k)
          acc += static_cast<double>(x[static_cast<std::size_t>(i) * d + k]) * w->data[k * cols + j];
        y[static_cast<std::size_t>(i) * cols + j] = acc;
      }
    return y;
  };
  auto vp = lin(value, vtot, p.w_value, p.b_value);
  auto off = lin(query, q_count, p.w_offset, p.b_offset);
  auto logits = lin(query, q_count, p.w_attn, p.b_attn);

  std::vector<double> ctx(static_cast<std::size_t>(q_count) * d, 0.0);
  for (int qi = 0; qi < q_count; ++qi) {
    double rx = refs[2 * qi], ry = refs[2 * qi + 1];
    for (int hh = 0; hh < heads; ++hh) {
      // softmax jointly over the (level x point) slots of this head
      int lp = nl * points;
      std::vector<double> a(static_cast<std::size_t>(lp));
      double mx = -1e300;
      for (int s = 0; s < lp; ++s) {
        a[static_cast<std::size_t>(s)] =
            logits[static_cast<std::size_t>(qi) * heads * lp + hh * lp + s];
        mx = std::max(mx, a[static_cast<std::size_t>(s)]);
      }
      double den = 0;
      for (int s = 0; s < lp; ++s) {
        a[static_cast<std::size_t>(s)] = std::exp(a[static_cast<std::size_t>(s)] - mx);
        den += a[static_cast<std::size_t>(s)];
      }
      for (int lvl = 0; lvl < nl; ++lvl) {
        auto [lh, lw] = spec.levels[lvl];
        for (int pp = 0; pp < points; ++pp) {
          int slot = lvl * points + pp;
          std::size_t obase =
              (static_cast<std::size_t>(qi) * heads * lp + hh * lp + slot) * 2;
          double sx = rx + off[obase] / lw;
          double sy = ry + off[obase + 1] / lh;
          double weight = a[static_cast<std::size_t>(slot)] / den;
          // align-corners-false bilinear with zero padding
          double xf = sx * lw - 0.5, yf = sy * lh - 0.5;
          int x0 = static_cast<int>(std::floor(xf)), y0 = static_cast<int>(std::floor(yf));
          double tx = xf - x0, ty = yf - y0;
          auto at = [&](int yy, int xx, int cdim) -> double {
            if (xx < 0 || xx >= lw || yy < 0 || yy >= lh) return 0.0;
            int row = spec.offsets[lvl] + yy * lw + xx;
            return vp[static_cast<std::size_t>(row) * d + hh * hd + cdim];
          };
          for (int cdim = 0; cdim < hd; ++cdim) {
            double s = (1 - ty) * ((1 - tx) * at(y0, x0, cdim) + tx * at(y0, x0 + 1, cdim)) +
                       ty * ((1 - tx) * at(y0 + 1, x0, cdim) + tx * at(y0 + 1, x0 + 1, cdim));
            ctx[static_cast<std::size_t>(qi) * d + hh * hd + cdim] += weight * s;
          }
        }
      }
    }
  }
  // output projection
  std::vector<double> out(static_cast<std::size_t>(q_count) * d);
  for (int i = 0; i < q_count; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = p.b_out->data[j];
      for (int k = 0; k < d; ++k)
        acc += ctx[static_cast<std::size_t>(i) * d + k] * p.w_out->data[k * d + j];
      out[static_cast<std::size_t>(i) * d + j] = acc;
    }
  return out;
}

// Builds randomized params for one configuration.
template <class T>
hsia::MsDeformParams<T> random_deform_params(int d, int heads, int points, int levels,
                                             std::uint64_t seed) {
  using namespace hsia;
  MsDeformParams<T> p;
  p.heads = heads;
  p.points = points;
  int lp = levels * points;
  p.w_value = tensor_uniform<T>({d, d}, seed + 1, -0.5, 0.5);
  p.b_value = tensor_uniform<T>({d}, seed + 2, -0.5, 0.5);
  p.w_offset = tensor_uniform<T>({d, heads * lp * 2}, seed + 3, -0.5, 0.5);
  p.b_offset = tensor_uniform<T>({heads * lp * 2}, seed + 4, -0.5, 0.5);
  p.w_attn = tensor_uniform<T>({d, heads * lp}, seed + 5, -0.5, 0.5);
  p.b_attn = tensor_uniform<T>({heads * lp}, seed + 6, -0.5, 0.5);
  p.w_out = tensor_uniform<T>({d, d}, seed + 7, -0.5, 0.5);
  p.b_out = tensor_uniform<T>({d}, seed + 8, -0.5, 0.5);
  return p;
}

}  // namespace oracle
