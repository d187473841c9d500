#include "ofa/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "ofa/error.hpp"

namespace ofa::ops {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank())
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  for (int i = 0; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw DimensionError(op, i, a.dim(i), b.dim(i));
}

void check_rank(const char* op, const Tensor& t, int rank) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = f(v);
  return make_result(x.shape(), std::move(out), {x}, [x, df](TensorImpl& self) {
    auto* in = x.impl();
    if (!in->requires_grad) return;
    auto g = in->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(in->data[i], self.data[i]);
  });
}

// First output index whose input coordinate (o*s - p + kk) is >= 0, and the
// last one whose coordinate is < extent.
inline void valid_range(int extent, int out_extent, int stride, int pad, int kk, int& lo, int& hi) {
  const int a = pad - kk;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const int b = extent - 1 + pad - kk;
  hi = b < 0 ? -1 : std::min(out_extent - 1, b / stride);
}

void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* cols) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * ho * wo;
        std::fill(row, row + ho * wo, 0.0f);
        int lo, hi;
        valid_range(w, wo, stride, pad, kx, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const float* src = x + (static_cast<int64_t>(ci) * h + iy) * w;
          for (int ox = lo; ox <= hi; ++ox) row[oy * wo + ox] = src[ox * stride - pad + kx];
        }
      }
}

void col2im(const float* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* x) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * ho * wo;
        int lo, hi;
        valid_range(w, wo, stride, pad, kx, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          float* dst = x + (static_cast<int64_t>(ci) * h + iy) * w;
          for (int ox = lo; ox <= hi; ++ox) dst[ox * stride - pad + kx] += row[oy * wo + ox];
        }
      }
}

struct ConvGeom {
  int b, c, h, w, co, k, stride, pad, groups, ho, wo;
};

// (b, c, hw) <-> (c, b * hw), so one GEMM covers the whole batch when the
// spatial extent is too small to keep the weights hot.
constexpr int64_t kPackBelow = 256;

void pack_batch(const float* src, int b, int c, int64_t hw, float* dst) {
  for (int bi = 0; bi < b; ++bi)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<int64_t>(bi) * c + ch) * hw, hw, dst + (static_cast<int64_t>(ch) * b + bi) * hw);
}

template <bool Accumulate>
void unpack_batch(const float* src, int b, int c, int64_t hw, float* dst) {
  for (int bi = 0; bi < b; ++bi)
    for (int ch = 0; ch < c; ++ch) {
      const float* s = src + (static_cast<int64_t>(ch) * b + bi) * hw;
      float* d = dst + (static_cast<int64_t>(bi) * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        if constexpr (Accumulate)
          d[i] += s[i];
        else
          d[i] = s[i];
      }
    }
}

// dst[j * ldd + i] (+)= src[i * lds + j], in cache-sized tiles.
template <bool Accumulate>
void transpose(const float* src, int64_t rows, int64_t cols, int64_t lds, float* dst, int64_t ldd) {
  constexpr int64_t T = 16;
  for (int64_t i0 = 0; i0 < rows; i0 += T)
    for (int64_t j0 = 0; j0 < cols; j0 += T) {
      const int64_t i1 = std::min(rows, i0 + T), j1 = std::min(cols, j0 + T);
      for (int64_t j = j0; j < j1; ++j)
        for (int64_t i = i0; i < i1; ++i) {
          if constexpr (Accumulate)
            dst[j * ldd + i] += src[i * lds + j];
          else
            dst[j * ldd + i] = src[i * lds + j];
        }
    }
}

// Depthwise kernels run channels-last on a zero-padded copy of each image, so
// every tap is a vector op across channels regardless of the spatial size.
struct ChannelsLast {
  int hp, wp;
  std::vector<float> buf;  // (hp, wp, c), border stays zero

  ChannelsLast(const ConvGeom& g) : hp(g.h + 2 * g.pad), wp(g.w + 2 * g.pad) {
    buf.resize(static_cast<size_t>(hp) * wp * g.c);
  }
  float* at(int y, int x, int c) { return buf.data() + (static_cast<int64_t>(y) * wp + x) * c; }
  const float* at(int y, int x, int c) const { return buf.data() + (static_cast<int64_t>(y) * wp + x) * c; }

  void load(const ConvGeom& g, const float* img) {
    const int64_t hw = static_cast<int64_t>(g.h) * g.w;
    for (int y = 0; y < g.h; ++y) transpose<false>(img + y * g.w, g.c, g.w, hw, at(y + g.pad, g.pad, g.c), g.c);
  }
};

std::vector<float> taps_by_channel(const ConvGeom& g, const float* wt) {
  const int kk = g.k * g.k;
  std::vector<float> t(static_cast<size_t>(kk) * g.c);
  for (int ch = 0; ch < g.c; ++ch)
    for (int i = 0; i < kk; ++i) t[static_cast<size_t>(i) * g.c + ch] = wt[static_cast<int64_t>(ch) * kk + i];
  return t;
}

// One output pixel for channels [ch, ch + L): the accumulators stay in
// registers across all taps.
template <int L>
void depthwise_pixel(const ChannelsLast& in, const float* taps, const ConvGeom& g, int y0, int x0, int ch,
                     float* out) {
  float v[L] = {};
  for (int ky = 0; ky < g.k; ++ky)
    for (int kx = 0; kx < g.k; ++kx) {
      const float* __restrict s = in.at(y0 + ky, x0 + kx, g.c) + ch;
      const float* __restrict w = taps + static_cast<int64_t>(ky * g.k + kx) * g.c + ch;
#pragma omp simd
      for (int l = 0; l < L; ++l) v[l] += w[l] * s[l];
    }
  for (int l = 0; l < L; ++l) out[ch + l] = v[l];
}

void depthwise_forward(const ConvGeom& g, const float* x, const float* wt, float* y) {
  const int64_t hw = static_cast<int64_t>(g.h) * g.w, ohw = static_cast<int64_t>(g.ho) * g.wo;
  const int C = g.c;
  const std::vector<float> taps = taps_by_channel(g, wt);
  ChannelsLast in(g);
  std::vector<float> acc(static_cast<size_t>(ohw) * C);  // (ho, wo, c)
  for (int b = 0; b < g.b; ++b) {
    in.load(g, x + b * C * hw);
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        float* a = acc.data() + (static_cast<int64_t>(oy) * g.wo + ox) * C;
        const int y0 = oy * g.stride, x0 = ox * g.stride;
        int ch = 0;
        for (; ch + 16 <= C; ch += 16) depthwise_pixel<16>(in, taps.data(), g, y0, x0, ch, a);
        for (; ch + 8 <= C; ch += 8) depthwise_pixel<8>(in, taps.data(), g, y0, x0, ch, a);
        for (; ch < C; ++ch) depthwise_pixel<1>(in, taps.data(), g, y0, x0, ch, a);
      }
    transpose<false>(acc.data(), ohw, C, C, y + b * C * ohw, ohw);
  }
}

// d taps[t][ch..ch+L) += sum over output pixels of grad * input under tap t.
template <int L>
void depthwise_tap_grad(const ChannelsLast& in, const float* go, const ConvGeom& g, int ky, int kx, int ch,
                        float* dtap) {
  float v[L] = {};
  for (int oy = 0; oy < g.ho; ++oy)
    for (int ox = 0; ox < g.wo; ++ox) {
      const float* __restrict s = in.at(oy * g.stride + ky, ox * g.stride + kx, g.c) + ch;
      const float* __restrict d = go + (static_cast<int64_t>(oy) * g.wo + ox) * g.c + ch;
#pragma omp simd
      for (int l = 0; l < L; ++l) v[l] += d[l] * s[l];
    }
  for (int l = 0; l < L; ++l) dtap[ch + l] += v[l];
}

// Input gradient at padded position (py, px), gathered over the taps that read it.
template <int L>
void depthwise_input_grad(const float* go, const float* taps, const ConvGeom& g, int py, int px, int ch,
                          float* out) {
  float v[L] = {};
  for (int ky = 0; ky < g.k; ++ky) {
    const int ty = py - ky;
    if (ty < 0 || ty % g.stride) continue;
    const int oy = ty / g.stride;
    if (oy >= g.ho) continue;
    for (int kx = 0; kx < g.k; ++kx) {
      const int tx = px - kx;
      if (tx < 0 || tx % g.stride) continue;
      const int ox = tx / g.stride;
      if (ox >= g.wo) continue;
      const float* __restrict d = go + (static_cast<int64_t>(oy) * g.wo + ox) * g.c + ch;
      const float* __restrict w = taps + static_cast<int64_t>(ky * g.k + kx) * g.c + ch;
#pragma omp simd
      for (int l = 0; l < L; ++l) v[l] += w[l] * d[l];
    }
  }
  for (int l = 0; l < L; ++l) out[ch + l] = v[l];
}

void depthwise_backward(const ConvGeom& g, const float* x, const float* wt, const float* dy, float* dx,
                        float* dw) {
  const int64_t hw = static_cast<int64_t>(g.h) * g.w, ohw = static_cast<int64_t>(g.ho) * g.wo;
  const int C = g.c, kk = g.k * g.k;
  const std::vector<float> taps = taps_by_channel(g, wt);
  std::vector<float> dtaps(dw ? taps.size() : 0, 0.0f);
  ChannelsLast in(g);
  std::vector<float> go(static_cast<size_t>(ohw) * C);  // (ho, wo, c)
  std::vector<float> gi(dx ? static_cast<size_t>(hw) * C : 0);  // (h, w, c)
  for (int b = 0; b < g.b; ++b) {
    transpose<false>(dy + b * C * ohw, C, ohw, ohw, go.data(), C);
    if (dw) {
      in.load(g, x + b * C * hw);
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          float* d = dtaps.data() + static_cast<int64_t>(ky * g.k + kx) * C;
          int ch = 0;
          for (; ch + 16 <= C; ch += 16) depthwise_tap_grad<16>(in, go.data(), g, ky, kx, ch, d);
          for (; ch + 8 <= C; ch += 8) depthwise_tap_grad<8>(in, go.data(), g, ky, kx, ch, d);
          for (; ch < C; ++ch) depthwise_tap_grad<1>(in, go.data(), g, ky, kx, ch, d);
        }
    }
    if (dx) {
      for (int iy = 0; iy < g.h; ++iy)
        for (int ix = 0; ix < g.w; ++ix) {
          float* out = gi.data() + (static_cast<int64_t>(iy) * g.w + ix) * C;
          const int py = iy + g.pad, px = ix + g.pad;
          int ch = 0;
          for (; ch + 16 <= C; ch += 16) depthwise_input_grad<16>(go.data(), taps.data(), g, py, px, ch, out);
          for (; ch + 8 <= C; ch += 8) depthwise_input_grad<8>(go.data(), taps.data(), g, py, px, ch, out);
          for (; ch < C; ++ch) depthwise_input_grad<1>(go.data(), taps.data(), g, py, px, ch, out);
        }
      transpose<true>(gi.data(), hw, C, C, dx + b * C * hw, hw);
    }
  }
  if (dw)
    for (int ch = 0; ch < C; ++ch)
      for (int i = 0; i < kk; ++i) dw[static_cast<int64_t>(ch) * kk + i] += dtaps[static_cast<size_t>(i) * C + ch];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<float> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& self) {
    if (a.impl()->requires_grad) a.impl()->accumulate_grad(self.grad);
    if (b.impl()->requires_grad) b.impl()->accumulate_grad(self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<float> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& self) {
    auto* ai = a.impl();
    auto* bi = b.impl();
    if (ai->requires_grad) {
      auto g = ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto g = bi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [a, s](TensorImpl& self) {
    auto g = a.impl()->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return make_result(Shape{1}, {static_cast<float>(acc)}, {a}, [a](TensorImpl& self) {
    auto g = a.impl()->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean_of(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "mean_of: empty input");
  for (size_t i = 1; i < xs.size(); ++i) check_same_shape("mean_of", xs[0], xs[i]);
  if (xs.size() == 1) return xs[0];
  std::vector<float> out(xs[0].data().begin(), xs[0].data().end());
  for (size_t i = 1; i < xs.size(); ++i) {
    auto d = xs[i].data();
    for (size_t j = 0; j < out.size(); ++j) out[j] += d[j];
  }
  const float inv = 1.0f / static_cast<float>(xs.size());
  for (auto& v : out) v *= inv;
  return make_result(xs[0].shape(), std::move(out), xs, [xs, inv](TensorImpl& self) {
    for (const auto& x : xs) {
      if (!x.impl()->requires_grad) continue;
      auto g = x.impl()->ensure_grad();
      for (size_t j = 0; j < g.size(); ++j) g[j] += inv * self.grad[j];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<float> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a},
                     [a](TensorImpl& self) { a.impl()->accumulate_grad(self.grad); });
}

// ---------------------------------------------------------------------------
// Activations

float hsigmoid_scalar(float x) { return std::clamp(x + 3.0f, 0.0f, 6.0f) / 6.0f; }
float hswish_scalar(float x) { return x * std::clamp(x + 3.0f, 0.0f, 6.0f) / 6.0f; }

Tensor relu(const Tensor& x) {
  return unary(
      x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float in, float) { return in > 0.0f ? 1.0f : 0.0f; });
}

Tensor hswish(const Tensor& x) {
  return unary(x, hswish_scalar, [](float in, float) {
    if (in <= -3.0f) return 0.0f;
    if (in >= 3.0f) return 1.0f;
    return (2.0f * in + 3.0f) / 6.0f;
  });
}

Tensor hsigmoid(const Tensor& x) {
  return unary(x, hsigmoid_scalar, [](float in, float) {
    return (in > -3.0f && in < 3.0f) ? 1.0f / 6.0f : 0.0f;
  });
}

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad, int groups) {
  check_rank("conv2d input", x, 4);
  check_rank("conv2d weight", w, 4);
  require(stride >= 1 && pad >= 0 && groups >= 1, "conv2d: invalid stride/pad/groups");
  ConvGeom g{};
  g.b = static_cast<int>(x.dim(0));
  g.c = static_cast<int>(x.dim(1));
  g.h = static_cast<int>(x.dim(2));
  g.w = static_cast<int>(x.dim(3));
  g.co = static_cast<int>(w.dim(0));
  g.k = static_cast<int>(w.dim(2));
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  if (g.c % groups != 0) throw DimensionError("conv2d", 1, (g.c / groups + 1) * groups, g.c);
  if (g.co % groups != 0) throw DimensionError("conv2d weight", 0, (g.co / groups + 1) * groups, g.co);
  if (w.dim(1) != g.c / groups) throw DimensionError("conv2d weight", 1, g.c / groups, w.dim(1));
  if (w.dim(3) != g.k) throw DimensionError("conv2d weight", 3, g.k, w.dim(3));
  if (g.h + 2 * pad < g.k) throw DimensionError("conv2d", 2, g.k - 2 * pad, g.h);
  if (g.w + 2 * pad < g.k) throw DimensionError("conv2d", 3, g.k - 2 * pad, g.w);
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;

  const int64_t hw = static_cast<int64_t>(g.h) * g.w, ohw = static_cast<int64_t>(g.ho) * g.wo;
  std::vector<float> out(static_cast<size_t>(g.b) * g.co * ohw, 0.0f);
  const bool depthwise = groups == g.c && g.co == g.c;
  const bool pointwise = g.k == 1 && pad == 0 && stride == 1 && groups == 1;
  const int cg = g.c / groups, cog = g.co / groups, kk = cg * g.k * g.k;

  if (depthwise) {
    depthwise_forward(g, x.data().data(), w.data().data(), out.data());
  } else if (pointwise && hw < kPackBelow && g.b > 1) {
    const int n = static_cast<int>(g.b * hw);
    std::vector<float> xp(static_cast<size_t>(g.c) * n), yp(static_cast<size_t>(g.co) * n);
    pack_batch(x.data().data(), g.b, g.c, hw, xp.data());
    gemm(false, false, g.co, n, g.c, 1.0f, w.data().data(), g.c, xp.data(), n, 0.0f, yp.data(), n);
    unpack_batch<false>(yp.data(), g.b, g.co, hw, out.data());
  } else if (pointwise) {
    for (int b = 0; b < g.b; ++b)
      gemm(false, false, g.co, static_cast<int>(hw), g.c, 1.0f, w.data().data(), g.c,
           x.data().data() + b * g.c * hw, static_cast<int>(hw), 0.0f, out.data() + b * g.co * ohw,
           static_cast<int>(ohw));
  } else {
    std::vector<float> cols(static_cast<size_t>(kk) * ohw);
    for (int b = 0; b < g.b; ++b)
      for (int gi = 0; gi < groups; ++gi) {
        im2col(x.data().data() + (static_cast<int64_t>(b) * g.c + gi * cg) * hw, cg, g.h, g.w, g.k, stride,
               pad, g.ho, g.wo, cols.data());
        gemm(false, false, cog, static_cast<int>(ohw), kk, 1.0f, w.data().data() + gi * cog * kk, kk,
             cols.data(), static_cast<int>(ohw), 0.0f,
             out.data() + (static_cast<int64_t>(b) * g.co + gi * cog) * ohw, static_cast<int>(ohw));
      }
  }

  return make_result(
      Shape{g.b, g.co, g.ho, g.wo}, std::move(out), {x, w},
      [x, w, g, depthwise, pointwise, hw, ohw, cg, cog, kk](TensorImpl& self) {
        auto* xi = x.impl();
        auto* wi = w.impl();
        float* dx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        float* dw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
        const float* dy = self.grad.data();
        if (depthwise) {
          depthwise_backward(g, xi->data.data(), wi->data.data(), dy, dx, dw);
          return;
        }
        if (pointwise && hw < kPackBelow && g.b > 1) {
          const int n = static_cast<int>(g.b * hw);
          std::vector<float> dyp(static_cast<size_t>(g.co) * n);
          pack_batch(dy, g.b, g.co, hw, dyp.data());
          if (dw) {
            std::vector<float> xp(static_cast<size_t>(g.c) * n);
            pack_batch(xi->data.data(), g.b, g.c, hw, xp.data());
            gemm(false, true, g.co, g.c, n, 1.0f, dyp.data(), n, xp.data(), n, 1.0f, dw, g.c);
          }
          if (dx) {
            std::vector<float> dxp(static_cast<size_t>(g.c) * n);
            gemm(true, false, g.c, n, g.co, 1.0f, wi->data.data(), g.c, dyp.data(), n, 0.0f, dxp.data(), n);
            unpack_batch<true>(dxp.data(), g.b, g.c, hw, dx);
          }
          return;
        }
        if (pointwise) {
          for (int b = 0; b < g.b; ++b) {
            const float* dyb = dy + b * g.co * ohw;
            if (dw)
              gemm(false, true, g.co, g.c, static_cast<int>(hw), 1.0f, dyb, static_cast<int>(ohw),
                   xi->data.data() + b * g.c * hw, static_cast<int>(hw), 1.0f, dw, g.c);
            if (dx)
              gemm(true, false, g.c, static_cast<int>(hw), g.co, 1.0f, wi->data.data(), g.c, dyb,
                   static_cast<int>(ohw), 1.0f, dx + b * g.c * hw, static_cast<int>(hw));
          }
          return;
        }
        std::vector<float> cols(static_cast<size_t>(kk) * ohw);
        std::vector<float> dcols(dx ? cols.size() : 0);
        for (int b = 0; b < g.b; ++b)
          for (int gi = 0; gi < g.groups; ++gi) {
            const int64_t xoff = (static_cast<int64_t>(b) * g.c + gi * cg) * hw;
            const float* dyg = dy + (static_cast<int64_t>(b) * g.co + gi * cog) * ohw;
            if (dw) {
              im2col(xi->data.data() + xoff, cg, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo, cols.data());
              gemm(false, true, cog, kk, static_cast<int>(ohw), 1.0f, dyg, static_cast<int>(ohw), cols.data(),
                   static_cast<int>(ohw), 1.0f, dw + gi * cog * kk, kk);
            }
            if (dx) {
              gemm(true, false, kk, static_cast<int>(ohw), cog, 1.0f, wi->data.data() + gi * cog * kk, kk, dyg,
                   static_cast<int>(ohw), 0.0f, dcols.data(), static_cast<int>(ohw));
              col2im(dcols.data(), cg, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo, dx + xoff);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Batch normalisation

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats stats,
                  const NormOptions& opt) {
  if (x.rank() != 4 && x.rank() != 2) throw DimensionError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  const int b = static_cast<int>(x.dim(0));
  const int c = static_cast<int>(x.dim(1));
  const int64_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c) throw DimensionError("batch_norm weight", 0, c, gamma.numel());
  if (beta.numel() != c) throw DimensionError("batch_norm bias", 0, c, beta.numel());
  const bool indexed = !stats.index.empty();
  if (indexed && static_cast<int>(stats.index.size()) != c)
    throw DimensionError("batch_norm running stats index", 0, c, static_cast<long>(stats.index.size()));
  if (!indexed && stats.mean.numel() != c)
    throw DimensionError("batch_norm running mean", 0, c, stats.mean.numel());
  auto slot = [&](int ch) { return indexed ? stats.index[static_cast<size_t>(ch)] : ch; };

  const int64_t n = b * hw;
  std::vector<float> mean(c), invstd(c);
  const bool use_batch = opt.mode != NormMode::eval;
  auto xd = x.data();
  if (use_batch) {
    auto rm = stats.mean.data();
    auto rv = stats.var.data();
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0, ss = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const float* p = xd.data() + (static_cast<int64_t>(bi) * c + ch) * hw;
#pragma omp simd reduction(+ : s)
        for (int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(n);
      for (int bi = 0; bi < b; ++bi) {
        const float* p = xd.data() + (static_cast<int64_t>(bi) * c + ch) * hw;
#pragma omp simd reduction(+ : ss)
        for (int64_t i = 0; i < hw; ++i) {
          const double d = p[i] - m;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(n);
      mean[ch] = static_cast<float>(m);
      invstd[ch] = static_cast<float>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      const int s_idx = slot(ch);
      if (opt.mode == NormMode::train) {
        rm[s_idx] = (1.0f - opt.momentum) * rm[s_idx] + opt.momentum * static_cast<float>(m);
        rv[s_idx] = (1.0f - opt.momentum) * rv[s_idx] + opt.momentum * static_cast<float>(unbiased);
      } else {
        const float t = static_cast<float>(opt.calibration_step);
        rm[s_idx] = (rm[s_idx] * t + static_cast<float>(m)) / (t + 1.0f);
        rv[s_idx] = (rv[s_idx] * t + static_cast<float>(unbiased)) / (t + 1.0f);
      }
    }
  } else {
    auto rm = stats.mean.data();
    auto rv = stats.var.data();
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = rm[slot(ch)];
      invstd[ch] = 1.0f / std::sqrt(rv[slot(ch)] + opt.eps);
    }
  }

  const bool keep = GradMode::enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  std::vector<float> xhat(keep ? static_cast<size_t>(x.numel()) : 0);
  std::vector<float> out(static_cast<size_t>(x.numel()));
  auto gd = gamma.data();
  auto bd = beta.data();
  for (int bi = 0; bi < b; ++bi)
    for (int ch = 0; ch < c; ++ch) {
      const int64_t off = (static_cast<int64_t>(bi) * c + ch) * hw;
      const float m = mean[ch], is = invstd[ch], ga = gd[ch], be = bd[ch];
      if (keep) {
        for (int64_t i = 0; i < hw; ++i) {
          const float h = (xd[off + i] - m) * is;
          xhat[off + i] = h;
          out[off + i] = ga * h + be;
        }
      } else {
        for (int64_t i = 0; i < hw; ++i) out[off + i] = ga * ((xd[off + i] - m) * is) + be;
      }
    }

  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), invstd, use_batch, b, c, hw, n](TensorImpl& self) {
                       std::vector<double> sdy(c, 0.0), sdyx(c, 0.0);
                       const float* dy = self.grad.data();
                       for (int bi = 0; bi < b; ++bi)
                         for (int ch = 0; ch < c; ++ch) {
                           const int64_t off = (static_cast<int64_t>(bi) * c + ch) * hw;
                           for (int64_t i = 0; i < hw; ++i) {
                             sdy[ch] += dy[off + i];
                             sdyx[ch] += dy[off + i] * xhat[off + i];
                           }
                         }
                       if (gamma.impl()->requires_grad) {
                         auto g = gamma.impl()->ensure_grad();
                         for (int ch = 0; ch < c; ++ch) g[ch] += static_cast<float>(sdyx[ch]);
                       }
                       if (beta.impl()->requires_grad) {
                         auto g = beta.impl()->ensure_grad();
                         for (int ch = 0; ch < c; ++ch) g[ch] += static_cast<float>(sdy[ch]);
                       }
                       if (!x.impl()->requires_grad) return;
                       auto dx = x.impl()->ensure_grad();
                       const auto& gd = gamma.impl()->data;
                       const float inv_n = 1.0f / static_cast<float>(n);
                       for (int bi = 0; bi < b; ++bi)
                         for (int ch = 0; ch < c; ++ch) {
                           const int64_t off = (static_cast<int64_t>(bi) * c + ch) * hw;
                           const float k = gd[ch] * invstd[ch];
                           if (use_batch) {
                             const float m1 = static_cast<float>(sdy[ch]) * inv_n;
                             const float m2 = static_cast<float>(sdyx[ch]) * inv_n;
                             for (int64_t i = 0; i < hw; ++i)
                               dx[off + i] += k * (dy[off + i] - m1 - xhat[off + i] * m2);
                           } else {
                             for (int64_t i = 0; i < hw; ++i) dx[off + i] += k * dy[off + i];
                           }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Linear / pooling / gating

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_rank("linear input", x, 2);
  check_rank("linear weight", w, 2);
  const int b = static_cast<int>(x.dim(0)), in = static_cast<int>(x.dim(1)), o = static_cast<int>(w.dim(0));
  if (w.dim(1) != in) throw DimensionError("linear weight", 1, in, w.dim(1));
  if (bias.defined() && bias.numel() != o) throw DimensionError("linear bias", 0, o, bias.numel());
  std::vector<float> out(static_cast<size_t>(b) * o, 0.0f);
  if (bias.defined())
    for (int i = 0; i < b; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * o);
  gemm(false, true, b, o, in, 1.0f, x.data().data(), in, w.data().data(), in, bias.defined() ? 1.0f : 0.0f,
       out.data(), o);
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(Shape{b, o}, std::move(out), inputs, [x, w, bias, b, in, o](TensorImpl& self) {
    const float* dy = self.grad.data();
    if (x.impl()->requires_grad)
      gemm(false, false, b, in, o, 1.0f, dy, o, w.impl()->data.data(), in, 1.0f,
           x.impl()->ensure_grad().data(), in);
    if (w.impl()->requires_grad)
      gemm(true, false, o, in, b, 1.0f, dy, o, x.impl()->data.data(), in, 1.0f,
           w.impl()->ensure_grad().data(), in);
    if (bias.defined() && bias.impl()->requires_grad) {
      auto g = bias.impl()->ensure_grad();
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < o; ++j) g[j] += dy[i * o + j];
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  check_rank("global_avg_pool", x, 4);
  const int64_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<float> out(static_cast<size_t>(bc));
  auto xd = x.data();
  for (int64_t i = 0; i < bc; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < hw; ++j) s += xd[i * hw + j];
    out[i] = static_cast<float>(s / static_cast<double>(hw));
  }
  return make_result(Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out), {x}, [x, bc, hw](TensorImpl& self) {
    auto g = x.impl()->ensure_grad();
    const float inv = 1.0f / static_cast<float>(hw);
    for (int64_t i = 0; i < bc; ++i)
      for (int64_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i] * inv;
  });
}

Tensor max_pool2x2(const Tensor& x) {
  check_rank("max_pool2x2", x, 4);
  const int64_t bc = x.dim(0) * x.dim(1);
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  const int ho = (h + 1) / 2, wo = (w + 1) / 2;
  std::vector<float> out(static_cast<size_t>(bc) * ho * wo);
  std::vector<int64_t> arg(out.size());
  auto xd = x.data();
  for (int64_t i = 0; i < bc; ++i)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        int64_t at = -1;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = oy * 2 + dy, ix = ox * 2 + dx;
            if (iy >= h || ix >= w) continue;
            const int64_t idx = (i * h + iy) * w + ix;
            if (xd[idx] > best) {
              best = xd[idx];
              at = idx;
            }
          }
        const int64_t o = (i * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = at;
      }
  return make_result(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                     [x, arg = std::move(arg)](TensorImpl& self) {
                       auto g = x.impl()->ensure_grad();
                       for (size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                     });
}

Tensor channel_scale(const Tensor& x, const Tensor& gate) {
  check_rank("channel_scale", x, 4);
  const int64_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gate.numel() != bc) throw DimensionError("channel_scale gate", 1, x.dim(1), gate.numel() / x.dim(0));
  std::vector<float> out(x.data().begin(), x.data().end());
  auto gd = gate.data();
  for (int64_t i = 0; i < bc; ++i)
    for (int64_t j = 0; j < hw; ++j) out[i * hw + j] *= gd[i];
  return make_result(x.shape(), std::move(out), {x, gate}, [x, gate, bc, hw](TensorImpl& self) {
    const float* dy = self.grad.data();
    if (x.impl()->requires_grad) {
      auto g = x.impl()->ensure_grad();
      const auto& gd = gate.impl()->data;
      for (int64_t i = 0; i < bc; ++i)
        for (int64_t j = 0; j < hw; ++j) g[i * hw + j] += dy[i * hw + j] * gd[i];
    }
    if (gate.impl()->requires_grad) {
      auto g = gate.impl()->ensure_grad();
      const auto& xd = x.impl()->data;
      for (int64_t i = 0; i < bc; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < hw; ++j) s += dy[i * hw + j] * xd[i * hw + j];
        g[i] += static_cast<float>(s);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Weight slicing / transforms

Tensor index_select(const Tensor& x, int axis, std::span<const int> index) {
  if (axis < 0 || axis >= x.rank()) throw DimensionError("index_select: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const int64_t n = x.dim(axis);
  const int64_t m = static_cast<int64_t>(index.size());
  for (int v : index)
    if (v < 0 || v >= n) throw DimensionError("index_select", axis, n - 1, v);
  Shape shape = x.shape();
  shape[static_cast<size_t>(axis)] = m;
  std::vector<float> out(static_cast<size_t>(outer * m * inner));
  auto xd = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(xd.begin() + (o * n + index[i]) * inner, inner, out.begin() + (o * m + i) * inner);
  std::vector<int> idx(index.begin(), index.end());
  return make_result(std::move(shape), std::move(out), {x}, [x, idx, outer, inner, n, m](TensorImpl& self) {
    auto g = x.impl()->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < m; ++i) {
        float* dst = g.data() + (o * n + idx[i]) * inner;
        const float* src = self.grad.data() + (o * m + i) * inner;
        for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
  });
}

Tensor center_crop(const Tensor& w, int k) {
  if (w.rank() < 2) throw DimensionError("center_crop: rank < 2");
  const int kh = static_cast<int>(w.dim(-2)), kw = static_cast<int>(w.dim(-1));
  if (kh != kw) throw DimensionError("center_crop", w.rank() - 1, kh, kw);
  if (k > kh || (kh - k) % 2 != 0) throw DimensionError("center_crop", w.rank() - 1, k, kh);
  const int off = (kh - k) / 2;
  const int64_t lead = w.numel() / (kh * kw);
  Shape shape = w.shape();
  shape[shape.size() - 2] = k;
  shape[shape.size() - 1] = k;
  std::vector<float> out(static_cast<size_t>(lead) * k * k);
  auto wd = w.data();
  for (int64_t l = 0; l < lead; ++l)
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) out[(l * k + y) * k + x] = wd[(l * kh + y + off) * kw + x + off];
  return make_result(std::move(shape), std::move(out), {w}, [w, lead, k, kh, kw, off](TensorImpl& self) {
    auto g = w.impl()->ensure_grad();
    for (int64_t l = 0; l < lead; ++l)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) g[(l * kh + y + off) * kw + x + off] += self.grad[(l * k + y) * k + x];
  });
}

Tensor kernel_matmul(const Tensor& w, const Tensor& m) {
  const int k = static_cast<int>(w.dim(-1));
  const int kk = k * k;
  check_rank("kernel_matmul matrix", m, 2);
  if (m.dim(0) != kk) throw DimensionError("kernel_matmul matrix", 0, kk, m.dim(0));
  if (m.dim(1) != kk) throw DimensionError("kernel_matmul matrix", 1, kk, m.dim(1));
  const int lead = static_cast<int>(w.numel() / kk);
  std::vector<float> out(static_cast<size_t>(w.numel()));
  // out[l, :] = M v_l  <=>  Out = V M^T
  gemm(false, true, lead, kk, kk, 1.0f, w.data().data(), kk, m.data().data(), kk, 0.0f, out.data(), kk);
  return make_result(w.shape(), std::move(out), {w, m}, [w, m, lead, kk](TensorImpl& self) {
    if (w.impl()->requires_grad)
      gemm(false, false, lead, kk, kk, 1.0f, self.grad.data(), kk, m.impl()->data.data(), kk, 1.0f,
           w.impl()->ensure_grad().data(), kk);
    if (m.impl()->requires_grad)
      gemm(true, false, kk, kk, lead, 1.0f, self.grad.data(), kk, w.impl()->data.data(), kk, 1.0f,
           m.impl()->ensure_grad().data(), kk);
  });
}

// ---------------------------------------------------------------------------
// Losses

namespace {
std::vector<float> log_softmax_rows(const float* z, int b, int c) {
  std::vector<float> out(static_cast<size_t>(b) * c);
  for (int i = 0; i < b; ++i) {
    const float* r = z + static_cast<int64_t>(i) * c;
    const float mx = *std::max_element(r, r + c);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(r[j] - mx));
    const float lse = mx + static_cast<float>(std::log(s));
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] = r[j] - lse;
  }
  return out;
}
}  // namespace

std::vector<float> softmax_rows(const Tensor& logits, float temperature) {
  check_rank("softmax", logits, 2);
  const int b = static_cast<int>(logits.dim(0)), c = static_cast<int>(logits.dim(1));
  std::vector<float> z(logits.data().begin(), logits.data().end());
  if (temperature != 1.0f)
    for (auto& v : z) v /= temperature;
  auto out = log_softmax_rows(z.data(), b, c);
  for (auto& v : out) v = std::exp(v);
  return out;
}

Tensor softmax(const Tensor& logits, float temperature) {
  return Tensor(logits.shape(), softmax_rows(logits, temperature));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_rank("cross_entropy", logits, 2);
  const int b = static_cast<int>(logits.dim(0)), c = static_cast<int>(logits.dim(1));
  if (static_cast<int>(labels.size()) != b) throw DimensionError("cross_entropy labels", 0, b, static_cast<long>(labels.size()));
  for (int y : labels)
    if (y < 0 || y >= c) throw Error(ErrorKind::invalid_argument, "cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
  auto lsm = log_softmax_rows(logits.data().data(), b, c);
  double loss = 0.0;
  for (int i = 0; i < b; ++i) loss -= lsm[static_cast<size_t>(i) * c + labels[i]];
  loss /= b;
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(Shape{1}, {static_cast<float>(loss)}, {logits},
                     [logits, lsm = std::move(lsm), lab, b, c](TensorImpl& self) {
                       auto g = logits.impl()->ensure_grad();
                       const float s = self.grad[0] / static_cast<float>(b);
                       for (int i = 0; i < b; ++i)
                         for (int j = 0; j < c; ++j) {
                           const size_t k = static_cast<size_t>(i) * c + j;
                           g[k] += s * (std::exp(lsm[k]) - (j == lab[i] ? 1.0f : 0.0f));
                         }
                     });
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target) {
  check_rank("soft_cross_entropy", logits, 2);
  check_same_shape("soft_cross_entropy", logits, target);
  const int b = static_cast<int>(logits.dim(0)), c = static_cast<int>(logits.dim(1));
  auto lsm = log_softmax_rows(logits.data().data(), b, c);
  auto td = target.data();
  double loss = 0.0;
  std::vector<float> tsum(b, 0.0f);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < c; ++j) {
      const size_t k = static_cast<size_t>(i) * c + j;
      loss -= static_cast<double>(td[k]) * lsm[k];
      tsum[i] += td[k];
    }
  loss /= b;
  std::vector<float> t(td.begin(), td.end());
  return make_result(Shape{1}, {static_cast<float>(loss)}, {logits},
                     [logits, lsm = std::move(lsm), t = std::move(t), tsum, b, c](TensorImpl& self) {
                       auto g = logits.impl()->ensure_grad();
                       const float s = self.grad[0] / static_cast<float>(b);
                       for (int i = 0; i < b; ++i)
                         for (int j = 0; j < c; ++j) {
                           const size_t k = static_cast<size_t>(i) * c + j;
                           g[k] += s * (std::exp(lsm[k]) * tsum[i] - t[k]);
                         }
                     });
}

}  // namespace ofa::ops
