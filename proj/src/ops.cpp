#include "mtml/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

namespace mtml::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  MTML_CHECK(a == b, ErrorCode::ShapeError,
             std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_volume(const Shape& s, const char* what) {
  MTML_CHECK(s.size() == 4, ErrorCode::ShapeError,
             std::string(what) + ": expected {C, nz, ny, nx}, got " + shape_str(s));
}

void require_tape(const void* a, const void* b) {
  MTML_CHECK(a == b, ErrorCode::ShapeError, "operands recorded on different tapes");
}

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int ceil_div(int a, int b) { return -floor_div(-a, b); }

}  // namespace

int conv_out_extent(int in, int kernel, int stride, int dilation, int padding) {
  return floor_div(in + 2 * padding - dilation * (kernel - 1) - 1, stride) + 1;
}

int conv_transpose_out_extent(int in, int kernel, int stride, int dilation, int padding, int output_padding) {
  return (in - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1 + output_padding;
}

namespace kernels {

namespace {

std::size_t kernel_volume(const ConvGeometry& g) {
  return static_cast<std::size_t>(g.kernel) * g.kernel * g.kernel;
}

// Output z-slabs handled per GEMM; bounds the column buffer.
int chunk_depth(const ConvGeometry& g) {
  const std::size_t plane = static_cast<std::size_t>(g.out[1]) * g.out[2];
  const std::size_t rows = g.in_channels * kernel_volume(g);
  const std::size_t budget_cols = std::max<std::size_t>(1, (std::size_t{1} << 22) / std::max<std::size_t>(rows, 1));
  const std::size_t cols = std::min<std::size_t>(budget_cols, 16384);
  return static_cast<int>(std::clamp<std::size_t>(cols / std::max<std::size_t>(plane, 1), 1, g.out[0]));
}

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
void tap_range(int out_n, int in_n, int stride, int offset, int* lo, int* hi) {
  // in index = o * stride + offset, need 0 <= in < in_n
  *lo = std::clamp(ceil_div(-offset, stride), 0, out_n);
  *hi = std::min(out_n, floor_div(in_n - 1 - offset, stride) + 1);
  if (*hi < *lo) *hi = *lo;
}

// Gathers the input patches of output slabs [z0, z1) into `col`
// (rows: c, kz, ky, kx; columns: output voxels).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, int z0, int z1, T* col) {
  const int k = g.kernel;
  const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.out[1] * g.out[2];
  const std::size_t in_plane = static_cast<std::size_t>(g.in[1]) * g.in[2];
  const std::size_t in_vol = in_plane * g.in[0];
  T* row = col;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* xc = x + c * in_vol;
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        int ylo, yhi;
        tap_range(g.out[1], g.in[1], g.stride, ky * g.dilation - g.padding, &ylo, &yhi);
        for (int kx = 0; kx < k; ++kx, row += n) {
          const int xoff = kx * g.dilation - g.padding;
          int xlo, xhi;
          tap_range(g.out[2], g.in[2], g.stride, xoff, &xlo, &xhi);
          T* dst = row;
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride + kz * g.dilation - g.padding;
            if (iz < 0 || iz >= g.in[0]) {
              std::fill(dst, dst + static_cast<std::size_t>(g.out[1]) * g.out[2], T(0));
              dst += static_cast<std::size_t>(g.out[1]) * g.out[2];
              continue;
            }
            for (int oy = 0; oy < g.out[1]; ++oy, dst += g.out[2]) {
              if (oy < ylo || oy >= yhi) {
                std::fill(dst, dst + g.out[2], T(0));
                continue;
              }
              const int iy = oy * g.stride + ky * g.dilation - g.padding;
              const T* src = xc + iz * in_plane + static_cast<std::size_t>(iy) * g.in[2];
              std::fill(dst, dst + xlo, T(0));
              if (g.stride == 1) {
                std::copy(src + xlo + xoff, src + xhi + xoff, dst + xlo);
              } else {
                for (int ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * g.stride + xoff];
              }
              std::fill(dst + xhi, dst + g.out[2], T(0));
            }
          }
        }
      }
    }
  }
}

// Scatter-adds `col` back into the input layout; adjoint of im2col.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, int z0, int z1, T* x) {
  const int k = g.kernel;
  const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.out[1] * g.out[2];
  const std::size_t in_plane = static_cast<std::size_t>(g.in[1]) * g.in[2];
  const std::size_t in_vol = in_plane * g.in[0];
  const T* row = col;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* xc = x + c * in_vol;
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        int ylo, yhi;
        tap_range(g.out[1], g.in[1], g.stride, ky * g.dilation - g.padding, &ylo, &yhi);
        for (int kx = 0; kx < k; ++kx, row += n) {
          const int xoff = kx * g.dilation - g.padding;
          int xlo, xhi;
          tap_range(g.out[2], g.in[2], g.stride, xoff, &xlo, &xhi);
          const T* src = row;
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride + kz * g.dilation - g.padding;
            if (iz < 0 || iz >= g.in[0]) {
              src += static_cast<std::size_t>(g.out[1]) * g.out[2];
              continue;
            }
            for (int oy = 0; oy < g.out[1]; ++oy, src += g.out[2]) {
              if (oy < ylo || oy >= yhi) continue;
              const int iy = oy * g.stride + ky * g.dilation - g.padding;
              T* dst = xc + iz * in_plane + static_cast<std::size_t>(iy) * g.in[2];
              for (int ox = xlo; ox < xhi; ++ox) dst[ox * g.stride + xoff] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  const std::size_t kdim = g.in_channels * kernel_volume(g);
  const std::size_t plane = static_cast<std::size_t>(g.out[1]) * g.out[2];
  const std::size_t out_vol = plane * g.out[0];
  const int depth = chunk_depth(g);
  std::vector<T> col(kdim * plane * depth);
  Eigen::Map<const RowMat<T>> wm(w, g.out_channels, kdim);
  for (int z0 = 0; z0 < g.out[0]; z0 += depth) {
    const int z1 = std::min(g.out[0], z0 + depth);
    const std::size_t n = plane * (z1 - z0);
    im2col(g, x, z0, z1, col.data());
    Eigen::Map<const RowMat<T>> cm(col.data(), kdim, n);
    Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> ym(y + z0 * plane, g.out_channels, n, Eigen::OuterStride<>(out_vol));
    ym.noalias() = wm * cm;
  }
}

template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw) {
  if (!dx && !dw) return;
  const std::size_t kdim = g.in_channels * kernel_volume(g);
  const std::size_t plane = static_cast<std::size_t>(g.out[1]) * g.out[2];
  const std::size_t out_vol = plane * g.out[0];
  const int depth = chunk_depth(g);
  std::vector<T> col(kdim * plane * depth);
  Eigen::Map<const RowMat<T>> wm(w, g.out_channels, kdim);
  for (int z0 = 0; z0 < g.out[0]; z0 += depth) {
    const int z1 = std::min(g.out[0], z0 + depth);
    const std::size_t n = plane * (z1 - z0);
    Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> dym(dy + z0 * plane, g.out_channels, n,
                                                              Eigen::OuterStride<>(out_vol));
    Eigen::Map<RowMat<T>> cm(col.data(), kdim, n);
    if (dw) {
      im2col(g, x, z0, z1, col.data());
      Eigen::Map<RowMat<T>> dwm(dw, g.out_channels, kdim);
      dwm.noalias() += dym * cm.transpose();
    }
    if (dx) {
      cm.noalias() = wm.transpose() * dym;
      col2im(g, col.data(), z0, z1, dx);
    }
  }
}

template void conv_forward<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv_forward<double>(const ConvGeometry&, const double*, const double*, double*);
template void conv_backward<float>(const ConvGeometry&, const float*, const float*, const float*, float*, float*);
template void conv_backward<double>(const ConvGeometry&, const double*, const double*, const double*, double*,
                                    double*);

}  // namespace kernels

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_tape(&a.tape(), &b.tape());
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t p : {ia, ib}) {
      if (Tensor<T>* s = t.grad_sink(p)) {
        for (std::size_t i = 0; i < g.numel(); ++i) (*s)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_tape(&a.tape(), &b.tape());
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av = t.value(ia);
    const Tensor<T>& bv = t.value(ib);
    if (Tensor<T>* s = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*s)[i] += g[i] * bv[i];
    }
    if (Tensor<T>* s = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*s)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> x, T c) {
  Tensor<T> out = x.value();
  for (T& v : out.values()) v *= c;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, c](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (Tensor<T>* s = t.grad_sink(ix)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*s)[i] += c * g[i];
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.values()) v = v > T(0) ? v : T(0);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(ix);
    if (Tensor<T>* s = t.grad_sink(ix)) {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (xv[i] > T(0)) (*s)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T acc = std::accumulate(xv.values().begin(), xv.values().end(), T(0));
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(acc), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    if (Tensor<T>* s = t.grad_sink(ix)) {
      for (T& v : s->values()) v += g;
    }
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  require_same_shape(x.shape(), weights.shape(), "weighted_sum");
  const Tensor<T>& xv = x.value();
  T acc = T(0);
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i] * weights[i];
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(acc), {ix}, [ix, weights](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    if (Tensor<T>* s = t.grad_sink(ix)) {
      for (std::size_t i = 0; i < weights.numel(); ++i) (*s)[i] += g * weights[i];
    }
  });
}

template <typename T>
Var<T> concat(Var<T> a, Var<T> b, std::size_t axis) {
  require_tape(&a.tape(), &b.tape());
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  MTML_CHECK(sa.size() == sb.size() && axis < sa.size(), ErrorCode::ShapeError,
             "concat: incompatible ranks " + shape_str(sa) + " / " + shape_str(sb));
  for (std::size_t d = 0; d < sa.size(); ++d) {
    MTML_CHECK(d == axis || sa[d] == sb[d], ErrorCode::ShapeError,
               "concat: mismatched dims " + shape_str(sa) + " / " + shape_str(sb));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sa[d];
  const std::size_t na = a.value().numel() / outer;
  const std::size_t nb = b.value().numel() / outer;
  Shape so = sa;
  so[axis] += sb[axis];
  Tensor<T> out(so);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(pa + o * na, pa + (o + 1) * na, po + o * (na + nb));
    std::copy(pb + o * nb, pb + (o + 1) * nb, po + o * (na + nb) + na);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, outer, na, nb](Tape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    if (Tensor<T>* s = t.grad_sink(ia)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < na; ++i) (*s)[o * na + i] += g[o * (na + nb) + i];
    }
    if (Tensor<T>* s = t.grad_sink(ib)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < nb; ++i) (*s)[o * nb + i] += g[o * (na + nb) + na + i];
    }
  });
}

template <typename T>
Var<T> l2_normalize(Var<T> x, std::size_t axis, T eps) {
  const Shape& sh = x.shape();
  MTML_CHECK(axis < sh.size(), ErrorCode::ShapeError, "l2_normalize: axis out of range for " + shape_str(sh));
  MTML_CHECK(eps > T(0), ErrorCode::ShapeError, "l2_normalize: eps must be positive");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sh[d];
  for (std::size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];
  const std::size_t len = sh[axis];
  const Tensor<T>& xv = x.value();
  Tensor<T> out(sh);
  // Per-fiber divisor max(||x||, eps).
  std::vector<T> denom(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T ss = T(0);
      for (std::size_t l = 0; l < len; ++l) ss += xv[base + l * inner] * xv[base + l * inner];
      const T d = std::max(std::sqrt(ss), eps);
      denom[o * inner + in] = d;
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] = xv[base + l * inner] / d;
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, outer, inner, len, eps, denom = std::move(denom)](
                                                   Tape<T>& t, std::size_t self) {
    Tensor<T>* s = t.grad_sink(ix);
    if (!s) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        const T d = denom[o * inner + in];
        if (d > eps) {
          T dot = T(0);
          for (std::size_t l = 0; l < len; ++l) dot += y[base + l * inner] * g[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t i = base + l * inner;
            (*s)[i] += (g[i] - y[i] * dot) / d;
          }
        } else {
          for (std::size_t l = 0; l < len; ++l) (*s)[base + l * inner] += g[base + l * inner] / eps;
        }
      }
    }
  });
}

namespace {

template <typename T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias) {
  const std::size_t c = out.dim(0);
  const std::size_t vol = out.numel() / c;
  MTML_CHECK(bias.numel() == c, ErrorCode::ShapeError,
             "bias has " + std::to_string(bias.numel()) + " entries for " + std::to_string(c) + " channels");
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* p = out.data() + ch * vol;
    const T b = bias[ch];
    for (std::size_t i = 0; i < vol; ++i) p[i] += b;
  }
}

template <typename T>
void bias_grad(const Tensor<T>& g, Tensor<T>& sink) {
  const std::size_t c = g.dim(0);
  const std::size_t vol = g.numel() / c;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* p = g.data() + ch * vol;
    T acc = T(0);
    for (std::size_t i = 0; i < vol; ++i) acc += p[i];
    sink[ch] += acc;
  }
}

}  // namespace

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b, ConvOptions opt) {
  require_tape(&x.tape(), &w.tape());
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require_volume(xs, "conv3d input");
  MTML_CHECK(ws.size() == 5 && ws[2] == ws[3] && ws[3] == ws[4], ErrorCode::ShapeError,
             "conv3d: weights must be {C_out, C_in, k, k, k}, got " + shape_str(ws));
  MTML_CHECK(ws[1] == xs[0], ErrorCode::ShapeError,
             "conv3d: weight expects " + std::to_string(ws[1]) + " input channels, input has " + std::to_string(xs[0]));
  const int k = static_cast<int>(ws[2]);
  MTML_CHECK(k % 2 == 1, ErrorCode::ShapeError, "conv3d: kernel size must be odd");
  MTML_CHECK(opt.stride >= 1 && opt.dilation >= 1, ErrorCode::ShapeError, "conv3d: stride and dilation must be >= 1");
  kernels::ConvGeometry g;
  g.in_channels = xs[0];
  g.out_channels = ws[0];
  g.kernel = k;
  g.stride = opt.stride;
  g.dilation = opt.dilation;
  g.padding = opt.padding < 0 ? opt.dilation * (k - 1) / 2 : opt.padding;
  for (int a = 0; a < 3; ++a) {
    g.in[a] = static_cast<int>(xs[a + 1]);
    g.out[a] = conv_out_extent(g.in[a], k, g.stride, g.dilation, g.padding);
    MTML_CHECK(g.out[a] >= 1, ErrorCode::ShapeError, "conv3d: input " + shape_str(xs) + " too small for kernel");
  }
  Tensor<T> out(Shape{g.out_channels, std::size_t(g.out[0]), std::size_t(g.out[1]), std::size_t(g.out[2])});
  kernels::conv_forward(g, x.value().data(), w.value().data(), out.data());
  std::vector<std::size_t> parents{x.id(), w.id()};
  if (b.valid()) {
    add_bias(out, b.value());
    parents.push_back(b.id());
  }
  const std::size_t ix = x.id(), iw = w.id();
  const bool has_bias = b.valid();
  const std::size_t ib = has_bias ? b.id() : 0;
  return x.tape().record(std::move(out), std::move(parents), [g, ix, iw, ib, has_bias](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>* dx = t.grad_sink(ix);
    Tensor<T>* dw = t.grad_sink(iw);
    kernels::conv_backward(g, t.value(ix).data(), t.value(iw).data(), gy.data(), dx ? dx->data() : nullptr,
                           dw ? dw->data() : nullptr);
    if (has_bias) {
      if (Tensor<T>* db = t.grad_sink(ib)) bias_grad(gy, *db);
    }
  });
}

template <typename T>
Var<T> conv_transpose3d(Var<T> x, Var<T> w, Var<T> b, ConvTransposeOptions opt) {
  require_tape(&x.tape(), &w.tape());
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require_volume(xs, "conv_transpose3d input");
  MTML_CHECK(ws.size() == 5 && ws[2] == ws[3] && ws[3] == ws[4], ErrorCode::ShapeError,
             "conv_transpose3d: weights must be {C_in, C_out, k, k, k}, got " + shape_str(ws));
  MTML_CHECK(ws[0] == xs[0], ErrorCode::ShapeError,
             "conv_transpose3d: weight expects " + std::to_string(ws[0]) + " input channels, input has " +
                 std::to_string(xs[0]));
  MTML_CHECK(opt.stride >= 1 && opt.dilation >= 1 && opt.padding >= 0, ErrorCode::ShapeError,
             "conv_transpose3d: invalid stride/dilation/padding");
  MTML_CHECK(opt.output_padding >= 0 && (opt.output_padding < opt.stride || opt.output_padding < opt.dilation),
             ErrorCode::ShapeError, "conv_transpose3d: output_padding must be smaller than stride or dilation");
  const int k = static_cast<int>(ws[2]);
  kernels::ConvGeometry g;
  g.in_channels = ws[1];
  g.out_channels = ws[0];
  g.kernel = k;
  g.stride = opt.stride;
  g.dilation = opt.dilation;
  g.padding = opt.padding;
  for (int a = 0; a < 3; ++a) {
    g.out[a] = static_cast<int>(xs[a + 1]);
    g.in[a] = conv_transpose_out_extent(g.out[a], k, g.stride, g.dilation, g.padding, opt.output_padding);
    MTML_CHECK(g.in[a] >= 1, ErrorCode::ShapeError, "conv_transpose3d: non-positive output extent");
  }
  Tensor<T> out(Shape{g.in_channels, std::size_t(g.in[0]), std::size_t(g.in[1]), std::size_t(g.in[2])});
  kernels::conv_backward<T>(g, nullptr, w.value().data(), x.value().data(), out.data(), nullptr);
  std::vector<std::size_t> parents{x.id(), w.id()};
  if (b.valid()) {
    add_bias(out, b.value());
    parents.push_back(b.id());
  }
  const std::size_t ix = x.id(), iw = w.id();
  const bool has_bias = b.valid();
  const std::size_t ib = has_bias ? b.id() : 0;
  return x.tape().record(std::move(out), std::move(parents), [g, ix, iw, ib, has_bias](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    if (Tensor<T>* dx = t.grad_sink(ix)) {
      Tensor<T> tmp(dx->shape());
      kernels::conv_forward(g, gy.data(), t.value(iw).data(), tmp.data());
      for (std::size_t i = 0; i < tmp.numel(); ++i) (*dx)[i] += tmp[i];
    }
    if (Tensor<T>* dw = t.grad_sink(iw)) {
      kernels::conv_backward<T>(g, gy.data(), t.value(iw).data(), t.value(ix).data(), nullptr, dw->data());
    }
    if (has_bias) {
      if (Tensor<T>* db = t.grad_sink(ib)) bias_grad(gy, *db);
    }
  });
}

template <typename T>
Var<T> maxpool3d(Var<T> x) {
  const Shape& xs = x.shape();
  require_volume(xs, "maxpool3d input");
  for (int a = 1; a < 4; ++a) {
    MTML_CHECK(xs[a] % 2 == 0, ErrorCode::ShapeError, "maxpool3d: spatial dims must be even, got " + shape_str(xs));
  }
  const std::size_t c = xs[0], nz = xs[1], ny = xs[2], nx = xs[3];
  const std::size_t oz = nz / 2, oy = ny / 2, ox = nx / 2;
  Tensor<T> out(Shape{c, oz, oy, ox});
  std::vector<std::uint32_t> argmax(out.numel());
  const T* xv = x.value().data();
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t z = 0; z < oz; ++z) {
      for (std::size_t y = 0; y < oy; ++y) {
        for (std::size_t xx = 0; xx < ox; ++xx, ++o) {
          std::size_t best = ((ch * nz + 2 * z) * ny + 2 * y) * nx + 2 * xx;
          for (std::size_t dz = 0; dz < 2; ++dz) {
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t i = ((ch * nz + 2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xx + dx;
                if (xv[i] > xv[best]) best = i;
              }
            }
          }
          out[o] = xv[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (Tensor<T>* s = t.grad_sink(ix)) {
      for (std::size_t i = 0; i < argmax.size(); ++i) (*s)[argmax[i]] += g[i];
    }
  });
}

#define MTML_INSTANTIATE_OPS(T)                                                  \
  template Var<T> add<T>(Var<T>, Var<T>);                                        \
  template Var<T> mul<T>(Var<T>, Var<T>);                                        \
  template Var<T> mul_scalar<T>(Var<T>, T);                                      \
  template Var<T> relu<T>(Var<T>);                                               \
  template Var<T> sum<T>(Var<T>);                                                \
  template Var<T> weighted_sum<T>(Var<T>, const Tensor<T>&);                     \
  template Var<T> concat<T>(Var<T>, Var<T>, std::size_t);                        \
  template Var<T> l2_normalize<T>(Var<T>, std::size_t, T);                       \
  template Var<T> conv3d<T>(Var<T>, Var<T>, Var<T>, ConvOptions);                \
  template Var<T> conv_transpose3d<T>(Var<T>, Var<T>, Var<T>, ConvTransposeOptions); \
  template Var<T> maxpool3d<T>(Var<T>);

MTML_INSTANTIATE_OPS(float)
MTML_INSTANTIATE_OPS(double)

}  // namespace mtml::ops
