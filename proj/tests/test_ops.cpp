#include "doctest.h"
#include "hsia/ops.hpp"

#include <cmath>

using namespace hsia;

namespace {

// plain six-loop convolution oracle
std::vector<float> conv_oracle(const std::vector<float>& x, int cin, int h, int w,
                               const std::vector<float>& wt, const std::vector<float>& b, int cout,
                               int kh, int kw, int stride, int pad, int groups) {
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (w + 2 * pad - kw) / stride + 1;
  int cin_g = cin / groups, cout_g = cout / groups;
  std::vector<float> y(static_cast<std::size_t>(cout) * oh * ow, 0.0f);
  for (int oc = 0; oc < cout; ++oc) {
    int g = oc / cout_g;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        float acc = b[oc];
        for (int ic = 0; ic < cin_g; ++ic)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              int iy = oy * stride - pad + ky;
              int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              float xv = x[(static_cast<std::size_t>(g * cin_g + ic) * h + iy) * w + ix];
              float wv = wt[((static_cast<std::size_t>(oc) * cin_g + ic) * kh + ky) * kw + kx];
              acc += xv * wv;
            }
        y[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
      }
  }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches the six-loop oracle across configs") {
  struct Cfg {
    int cin, h, w, cout, k, stride, pad, groups;
  };
  for (Cfg c : {Cfg{3, 9, 7, 4, 3, 1, 1, 1}, Cfg{4, 8, 8, 6, 3, 2, 1, 2}, Cfg{5, 6, 5, 5, 1, 1, 0, 5},
                Cfg{2, 10, 11, 3, 5, 2, 2, 1}}) {
    auto x = tensor_uniform<float>({c.cin, c.h, c.w}, 100 + c.cin, -1, 1);
    auto w = tensor_uniform<float>({c.cout, c.cin / c.groups, c.k, c.k}, 200 + c.cout, -1, 1);
    auto b = tensor_uniform<float>({c.cout}, 300 + c.cout, -1, 1);
    auto y = conv2d(x, w, b, c.stride, c.pad, c.groups);
    auto ref =
        conv_oracle(x->data, c.cin, c.h, c.w, w->data, b->data, c.cout, c.k, c.k, c.stride, c.pad, c.groups);
    REQUIRE(y->data.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(y->data[i] == doctest::Approx(ref[i]).epsilon(1e-4));
  }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // <conv(x), y> == <x, conv_transpose(y)> for zero bias, matching strides
  int cin = 3, cout = 2, h = 6, w = 7, k = 3, stride = 2;
  auto wt = tensor_uniform<float>({cin, cout, k, k}, 7, -1, 1);
  auto x = tensor_uniform<float>({cin, h, w}, 8, -1, 1);
  int oh = (h - 1) * stride + k, ow = (w - 1) * stride + k;
  auto y = tensor_uniform<float>({cout, oh, ow}, 9, -1, 1);
  auto up = conv_transpose2d(x, wt, tensor_zeros<float>({cout}), stride);
  REQUIRE(up->shape == Shape{cout, oh, ow});
  double lhs = 0;
  for (std::size_t i = 0; i < up->data.size(); ++i)
    lhs += static_cast<double>(up->data[i]) * y->data[i];
  // the same weight tensor, reinterpreted as a conv kernel over y, gives the adjoint
  auto down = conv2d(y, wt, tensor_zeros<float>({cin}), stride, 0);
  REQUIRE(down->shape == Shape{cin, h, w});
  double rhs = 0;
  for (std::size_t i = 0; i < x->data.size(); ++i)
    rhs += static_cast<double>(down->data[i]) * x->data[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-3));
}

TEST_CASE("maxpool2d picks window maxima") {
  auto x = tensor_from<float>({1, 4, 4},
                              {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  auto y = maxpool2d(x, 2, 2, 0);
  CHECK(y->shape == Shape{1, 2, 2});
  CHECK(y->data == std::vector<float>{6, 8, 14, 16});
  auto z = maxpool2d(x, 3, 2, 1);
  CHECK(z->shape == Shape{1, 2, 2});
  CHECK(z->data == std::vector<float>{6, 8, 14, 16});
}

TEST_CASE("batchnorm2d normalizes in train mode and tracks running stats") {
  auto x = tensor_uniform<float>({2, 5, 6}, 17, -3, 3);
  auto g = tensor_ones<float>({2});
  auto b = tensor_zeros<float>({2});
  BnStats<float> st;
  st.init(2);
  auto y = batchnorm2d(x, g, b, st, true);
  int n = 30;
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (int i = 0; i < n; ++i) m += y->data[c * n + i];
    m /= n;
    for (int i = 0; i < n; ++i) v += (y->data[c * n + i] - m) * (y->data[c * n + i] - m);
    v /= n;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(st.running_mean[c] != 0.0f);
  }
  // eval mode uses the running stats, not the batch stats
  auto x2 = tensor_uniform<float>({2, 5, 6}, 18, -3, 3);
  auto y2 = batchnorm2d(x2, g, b, st, false);
  double m2 = 0;
  for (int i = 0; i < n; ++i) m2 += y2->data[i];
  CHECK(std::abs(m2 / n) > 1e-6);  // not exactly re-centered
}

TEST_CASE("softmax rows sum to one and match direct exp computation") {
  auto x = tensor_uniform<float>({4, 7}, 19, -5, 5);
  auto y = softmax_rows(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0, ref = 0;
    for (int c = 0; c < 7; ++c) ref += std::exp(static_cast<double>(x->data[r * 7 + c]));
    for (int c = 0; c < 7; ++c) {
      s += y->data[r * 7 + c];
      double e = std::exp(static_cast<double>(x->data[r * 7 + c])) / ref;
      CHECK(y->data[r * 7 + c] == doctest::Approx(e).epsilon(1e-5));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("softmax is shift invariant") {
  auto x = tensor_uniform<float>({3, 5}, 20, -2, 2);
  auto shifted = make_tensor<float>(x->shape);
  for (std::size_t i = 0; i < x->data.size(); ++i) shifted->data[i] = x->data[i] + 100.0f;
  auto a = softmax_rows(x), b = softmax_rows(shifted);
  for (std::size_t i = 0; i < a->data.size(); ++i)
    CHECK(a->data[i] == doctest::Approx(b->data[i]).epsilon(1e-5));
}

TEST_CASE("layernorm output has zero mean and unit variance per row") {
  auto x = tensor_uniform<float>({5, 16}, 21, -4, 4);
  auto g = tensor_ones<float>({16});
  auto b = tensor_zeros<float>({16});
  auto y = layernorm(x, g, b);
  for (int r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 16; ++c) m += y->data[r * 16 + c];
    m /= 16;
    for (int c = 0; c < 16; ++c) v += (y->data[r * 16 + c] - m) * (y->data[r * 16 + c] - m);
    v /= 16;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("gelu matches the erf formula") {
  auto x = tensor_from<float>({5}, {-2.0f, -0.5f, 0.0f, 0.5f, 2.0f});
  auto y = gelu(x);
  for (int i = 0; i < 5; ++i) {
    double v = x->data[i];
    double ref = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    CHECK(y->data[i] == doctest::Approx(ref).epsilon(1e-6));
  }
}

TEST_CASE("bilinear_sample matches manual interpolation and zero pads") {
  auto v = tensor_uniform<float>({2, 4, 5}, 22, -1, 1);
  int h = 4, w = 5;
  auto ref_at = [&](int c, double xn, double yn) {
    double xf = xn * w - 0.5, yf = yn * h - 0.5;
    int x0 = static_cast<int>(std::floor(xf)), y0 = static_cast<int>(std::floor(yf));
    double tx = xf - x0, ty = yf - y0;
    auto pix = [&](int yy, int xx) -> double {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
      return v->data[(static_cast<std::size_t>(c) * h + yy) * w + xx];
    };
    return (1 - ty) * ((1 - tx) * pix(y0, x0) + tx * pix(y0, x0 + 1)) +
           ty * ((1 - tx) * pix(y0 + 1, x0) + tx * pix(y0 + 1, x0 + 1));
  };
  auto pts = tensor_from<float>({4, 2}, {0.3f, 0.6f, 0.05f, 0.05f, 0.97f, 0.5f, -0.2f, 0.4f});
  auto out = bilinear_sample(v, pts);
  for (int p = 0; p < 4; ++p)
    for (int c = 0; c < 2; ++c)
      CHECK(out->data[p * 2 + c] ==
            doctest::Approx(ref_at(c, pts->data[2 * p], pts->data[2 * p + 1])).epsilon(1e-5));
  // far outside: exact zero
  auto far = tensor_from<float>({1, 2}, {-3.0f, 2.5f});
  auto z = bilinear_sample(v, far);
  CHECK(z->data[0] == 0.0f);
  CHECK(z->data[1] == 0.0f);
}

TEST_CASE("grid center sampling reproduces the map") {
  auto v = tensor_uniform<float>({3, 4, 6}, 23, -1, 1);
  auto centers = grid_centers<float>(4, 6);
  auto pts = tensor_from<float>({24, 2}, centers);
  auto out = bilinear_sample(v, pts);
  for (int p = 0; p < 24; ++p)
    for (int c = 0; c < 3; ++c)
      CHECK(out->data[p * 3 + c] == doctest::Approx(v->data[c * 24 + p]).epsilon(1e-6));
}

TEST_CASE("multi_head_attention matches a double-loop oracle") {
  int d = 8, heads = 2, tq = 4, tk = 5, dh = d / heads;
  auto q_in = tensor_uniform<float>({tq, d}, 24, -1, 1);
  auto kv_in = tensor_uniform<float>({tk, d}, 25, -1, 1);
  auto wq = tensor_uniform<float>({d, d}, 26, -1, 1), wk = tensor_uniform<float>({d, d}, 27, -1, 1);
  auto wv = tensor_uniform<float>({d, d}, 28, -1, 1), wo = tensor_uniform<float>({d, d}, 29, -1, 1);
  auto bq = tensor_uniform<float>({d}, 30, -1, 1), bk = tensor_uniform<float>({d}, 31, -1, 1);
  auto bv = tensor_uniform<float>({d}, 32, -1, 1), bo = tensor_uniform<float>({d}, 33, -1, 1);
  auto out = multi_head_attention(q_in, kv_in, 1, tq, tk, heads, wq, bq, wk, bk, wv, bv, wo, bo);

  auto proj = [&](const TensorT<float>& x, const TensorT<float>& w, const TensorT<float>& b, int t) {
    std::vector<double> y(static_cast<std::size_t>(t) * d);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) {
        double acc = b->data[j];
        for (int k = 0; k < d; ++k) acc += static_cast<double>(x->data[i * d + k]) * w->data[k * d + j];
        y[static_cast<std::size_t>(i) * d + j] = acc;
      }
    return y;
  };
  auto Q = proj(q_in, wq, bq, tq), K = proj(kv_in, wk, bk, tk), V = proj(kv_in, wv, bv, tk);
  std::vector<double> ctx(static_cast<std::size_t>(tq) * d, 0.0);
  for (int hd = 0; hd < heads; ++hd)
    for (int i = 0; i < tq; ++i) {
      std::vector<double> sc(static_cast<std::size_t>(tk));
      double mx = -1e300;
      for (int j = 0; j < tk; ++j) {
        double s = 0;
        for (int k = 0; k < dh; ++k)
          s += Q[static_cast<std::size_t>(i) * d + hd * dh + k] * K[static_cast<std::size_t>(j) * d + hd * dh + k];
        sc[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, sc[static_cast<std::size_t>(j)]);
      }
      double den = 0;
      for (int j = 0; j < tk; ++j) den += std::exp(sc[static_cast<std::size_t>(j)] - mx);
      for (int j = 0; j < tk; ++j) {
        double p = std::exp(sc[static_cast<std::size_t>(j)] - mx) / den;
        for (int k = 0; k < dh; ++k)
          ctx[static_cast<std::size_t>(i) * d + hd * dh + k] += p * V[static_cast<std::size_t>(j) * d + hd * dh + k];
      }
    }
  for (int i = 0; i < tq; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = bo->data[j];
      for (int k = 0; k < d; ++k) acc += ctx[static_cast<std::size_t>(i) * d + k] * wo->data[k * d + j];
      CHECK(out->data[i * d + j] == doctest::Approx(acc).epsilon(2e-4));
    }
}

TEST_CASE("pad/crop are mutually inverse and identity at equal size") {
  auto x = tensor_uniform<float>({2, 5, 7}, 34, -1, 1);
  auto p = pad2d_br(x, 8, 9);
  CHECK(p->shape == Shape{2, 8, 9});
  auto c = crop2d(p, 5, 7);
  CHECK(c->data == x->data);
  auto same = pad2d_br(x, 5, 7);
  CHECK(same->data == x->data);
}

TEST_CASE("token/map conversions round trip") {
  auto x = tensor_uniform<float>({3, 4, 5}, 35, -1, 1);
  auto t = chw_to_tokens(x);
  CHECK(t->shape == Shape{20, 3});
  auto back = tokens_to_chw(t, 4, 5);
  CHECK(back->data == x->data);
}

TEST_CASE("adaptive_avg_pool2d averages full partitions") {
  auto x = tensor_from<float>({1, 4, 4},
                              {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  auto y = adaptive_avg_pool2d(x, 2, 2);
  CHECK(y->data == std::vector<float>{3.5f, 5.5f, 11.5f, 13.5f});
  auto one = adaptive_avg_pool2d(x, 1, 1);
  CHECK(one->data[0] == doctest::Approx(8.5f));
}

TEST_CASE("bilinear_resize is identity at equal size and exact on constants") {
  auto x = tensor_uniform<float>({2, 5, 6}, 36, -1, 1);
  auto same = bilinear_resize(x, 5, 6);
  for (std::size_t i = 0; i < x->data.size(); ++i)
    CHECK(same->data[i] == doctest::Approx(x->data[i]).epsilon(1e-6));
  auto c = tensor_ones<float>({1, 3, 3});
  auto up = bilinear_resize(c, 9, 7);
  for (float v : up->data) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("level spec offsets match the documented example") {
  // pyramid of a 224x448 input at strides 8/16/32
  auto spec = LevelSpec::from_levels({{28, 56}, {14, 28}, {7, 14}});
  CHECK(spec.offsets == std::vector<int>{0, 1568, 1960, 2058});
  CHECK(spec.total() == 2058);
}

TEST_CASE("shape errors carry shapes") {
  auto a = tensor_uniform<float>({2, 3}, 37, -1, 1);
  auto b = tensor_uniform<float>({3, 2}, 38, -1, 1);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}
