#pragma once

// Hot loops behind the autodiff ops. The functions in `kernels` are
// OpenMP-parallel; `kernels::reference` holds straightforward serial versions
// that the tests and the benchmark compare against.
//
// Every parallel kernel partitions its output so that each element is written
// by exactly one thread in a fixed order, so results do not depend on the
// thread count.

namespace privisp::kernels {

struct ConvGeometry {
  int batch = 0;
  int in_channels = 0;
  int in_h = 0;
  int in_w = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int out_h = 0;
  int out_w = 0;
};

ConvGeometry conv_geometry(int batch, int in_channels, int in_h, int in_w, int out_channels, int kernel,
                           int stride, int pad);

/// y = conv(x, w) + b. Overwrites y. `b` may be null.
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* b, double* y);
/// dx += conv^T(dy, w).
void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* dy, double* dx);
/// dw += corr(x, dy); db += sum(dy). `db` may be null.
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw, double* db);

/// y[n, o] = sum_i x[n, i] w[o, i] + b[o]. Overwrites y. `b` may be null.
void linear_forward(int batch, int in, int out, const double* x, const double* w, const double* b, double* y);
/// dx += dy w.
void linear_backward_input(int batch, int in, int out, const double* w, const double* dy, double* dx);
/// dw += dy^T x; db += column sums of dy.
void linear_backward_weight(int batch, int in, int out, const double* x, const double* dy, double* dw,
                            double* db);

namespace reference {

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* b, double* y);
void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* dy, double* dx);
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw, double* db);
void linear_forward(int batch, int in, int out, const double* x, const double* w, const double* b, double* y);
void linear_backward_input(int batch, int in, int out, const double* w, const double* dy, double* dx);
void linear_backward_weight(int batch, int in, int out, const double* x, const double* dy, double* dw,
                            double* db);

}  // namespace reference

}  // namespace privisp::kernels
