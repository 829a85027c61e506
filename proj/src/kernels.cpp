#include "privisp/kernels.hpp"

#include <algorithm>
#include <cstddef>

#include "privisp/error.hpp"

namespace privisp::kernels {

namespace {

// Range of output columns ox for which ix = ox * stride - pad + kx lies in [0, in_w).
inline void valid_range(int kx, int stride, int pad, int in_w, int out_w, int& lo, int& hi) {
  const int off = kx - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  // largest ox with ox * stride + off <= in_w - 1
  const int top = in_w - 1 - off;
  hi = top < 0 ? 0 : std::min(out_w, top / stride + 1);
  if (lo > hi) lo = hi;
}

}  // namespace

ConvGeometry conv_geometry(int batch, int in_channels, int in_h, int in_w, int out_channels, int kernel,
                           int stride, int pad) {
  if (kernel < 1 || stride < 1 || pad < 0) throw ValidationError("invalid convolution geometry");
  ConvGeometry g{batch, in_channels, in_h, in_w, out_channels, kernel, stride, pad, 0, 0};
  g.out_h = (in_h + 2 * pad - kernel) / stride + 1;
  g.out_w = (in_w + 2 * pad - kernel) / stride + 1;
  if (g.out_h < 1 || g.out_w < 1) throw ValidationError("convolution output would be empty");
  return g;
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* b, double* y) {
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const int k = g.kernel;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_channels; ++co) {
      double* out = y + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
      const double bias = b ? b[co] : 0.0;
      std::fill(out, out + out_plane, bias);
      for (int ci = 0; ci < g.in_channels; ++ci) {
        const double* in = x + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
        const double* wk = w + (static_cast<std::size_t>(co) * g.in_channels + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double wv = wk[ky * k + kx];
            int lo, hi;
            valid_range(kx, g.stride, g.pad, g.in_w, g.out_w, lo, hi);
            for (int oy = 0; oy < g.out_h; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.in_h) continue;
              const double* row = in + static_cast<std::size_t>(iy) * g.in_w;
              const int off = kx - g.pad;
              double* orow = out + static_cast<std::size_t>(oy) * g.out_w;
              if (g.stride == 1) {
#pragma omp simd
                for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * row[ox + off];
              } else {
                for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * row[ox * g.stride + off];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* dy, double* dx) {
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const int k = g.kernel;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < g.batch; ++n) {
    for (int ci = 0; ci < g.in_channels; ++ci) {
      double* din = dx + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
      for (int co = 0; co < g.out_channels; ++co) {
        const double* dout = dy + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
        const double* wk = w + (static_cast<std::size_t>(co) * g.in_channels + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double wv = wk[ky * k + kx];
            int lo, hi;
            valid_range(kx, g.stride, g.pad, g.in_w, g.out_w, lo, hi);
            for (int oy = 0; oy < g.out_h; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.in_h) continue;
              double* row = din + static_cast<std::size_t>(iy) * g.in_w;
              const int off = kx - g.pad;
              const double* drow = dout + static_cast<std::size_t>(oy) * g.out_w;
              if (g.stride == 1) {
#pragma omp simd
                for (int ox = lo; ox < hi; ++ox) row[ox + off] += wv * drow[ox];
              } else {
                for (int ox = lo; ox < hi; ++ox) row[ox * g.stride + off] += wv * drow[ox];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw, double* db) {
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const int k = g.kernel;
#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.out_channels; ++co) {
    for (int n = 0; n < g.batch; ++n) {
      const double* dout = dy + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
      if (db) {
        double s = 0.0;
        for (std::size_t i = 0; i < out_plane; ++i) s += dout[i];
        db[co] += s;
      }
      for (int ci = 0; ci < g.in_channels; ++ci) {
        const double* in = x + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
        double* wk = dw + (static_cast<std::size_t>(co) * g.in_channels + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            int lo, hi;
            valid_range(kx, g.stride, g.pad, g.in_w, g.out_w, lo, hi);
            double acc = 0.0;
            for (int oy = 0; oy < g.out_h; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.in_h) continue;
              const double* row = in + static_cast<std::size_t>(iy) * g.in_w;
              const int off = kx - g.pad;
              const double* drow = dout + static_cast<std::size_t>(oy) * g.out_w;
              if (g.stride == 1) {
#pragma omp simd reduction(+ : acc)
                for (int ox = lo; ox < hi; ++ox) acc += row[ox + off] * drow[ox];
              } else {
                for (int ox = lo; ox < hi; ++ox) acc += row[ox * g.stride + off] * drow[ox];
              }
            }
            wk[ky * k + kx] += acc;
          }
        }
      }
    }
  }
}

void linear_forward(int batch, int in, int out, const double* x, const double* w, const double* b, double* y) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < out; ++o) {
      const double* xr = x + static_cast<std::size_t>(n) * in;
      const double* wr = w + static_cast<std::size_t>(o) * in;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y[static_cast<std::size_t>(n) * out + o] = acc + (b ? b[o] : 0.0);
    }
  }
}

void linear_backward_input(int batch, int in, int out, const double* w, const double* dy, double* dx) {
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    double* dxr = dx + static_cast<std::size_t>(n) * in;
    for (int o = 0; o < out; ++o) {
      const double g = dy[static_cast<std::size_t>(n) * out + o];
      if (g == 0.0) continue;
      const double* wr = w + static_cast<std::size_t>(o) * in;
#pragma omp simd
      for (int i = 0; i < in; ++i) dxr[i] += g * wr[i];
    }
  }
}

void linear_backward_weight(int batch, int in, int out, const double* x, const double* dy, double* dw,
                            double* db) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out; ++o) {
    double* dwr = dw + static_cast<std::size_t>(o) * in;
    for (int n = 0; n < batch; ++n) {
      const double g = dy[static_cast<std::size_t>(n) * out + o];
      if (db) db[o] += g;
      if (g == 0.0) continue;
      const double* xr = x + static_cast<std::size_t>(n) * in;
#pragma omp simd
      for (int i = 0; i < in; ++i) dwr[i] += g * xr[i];
    }
  }
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* b, double* y) {
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int oy = 0; oy < g.out_h; ++oy)
        for (int ox = 0; ox < g.out_w; ++ox) {
          double acc = b ? b[co] : 0.0;
          for (int ci = 0; ci < g.in_channels; ++ci)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                acc += w[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] *
                       x[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix];
              }
          y[((static_cast<std::size_t>(n) * g.out_channels + co) * g.out_h + oy) * g.out_w + ox] = acc;
        }
}

void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* dy, double* dx) {
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int oy = 0; oy < g.out_h; ++oy)
        for (int ox = 0; ox < g.out_w; ++ox) {
          const double d = dy[((static_cast<std::size_t>(n) * g.out_channels + co) * g.out_h + oy) * g.out_w + ox];
          for (int ci = 0; ci < g.in_channels; ++ci)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                dx[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix] +=
                    d * w[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx];
              }
        }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw, double* db) {
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int oy = 0; oy < g.out_h; ++oy)
        for (int ox = 0; ox < g.out_w; ++ox) {
          const double d = dy[((static_cast<std::size_t>(n) * g.out_channels + co) * g.out_h + oy) * g.out_w + ox];
          if (db) db[co] += d;
          for (int ci = 0; ci < g.in_channels; ++ci)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                dw[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] +=
                    d * x[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix];
              }
        }
}

void linear_forward(int batch, int in, int out, const double* x, const double* w, const double* b, double* y) {
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < out; ++o) {
      double acc = b ? b[o] : 0.0;
      for (int i = 0; i < in; ++i) acc += x[n * in + i] * w[o * in + i];
      y[n * out + o] = acc;
    }
}

void linear_backward_input(int batch, int in, int out, const double* w, const double* dy, double* dx) {
  for (int n = 0; n < batch; ++n)
    for (int i = 0; i < in; ++i)
      for (int o = 0; o < out; ++o) dx[n * in + i] += dy[n * out + o] * w[o * in + i];
}

void linear_backward_weight(int batch, int in, int out, const double* x, const double* dy, double* dw,
                            double* db) {
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < out; ++o) {
      if (db) db[o] += dy[n * out + o];
      for (int i = 0; i < in; ++i) dw[o * in + i] += dy[n * out + o] * x[n * in + i];
    }
}

}  // namespace reference

}  // namespace privisp::kernels
