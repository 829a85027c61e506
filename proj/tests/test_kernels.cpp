#include <vector>

#include "doctest.h"
#include "privisp/kernels.hpp"
#include "testing.hpp"

using namespace privisp;
using privisp::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("parallel convolution kernels agree with the serial reference on random geometries") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int batch = rng.integer(1, 3);
    const int cin = rng.integer(1, 4);
    const int cout = rng.integer(1, 5);
    const int k = 2 * rng.integer(0, 2) + 1;
    const int stride = rng.integer(1, 2);
    const int pad = rng.integer(0, k / 2 + 1);
    const int h = rng.integer(k, 11);
    const int w = rng.integer(k, 13);
    const auto g = kernels::conv_geometry(batch, cin, h, w, cout, k, stride, pad);
    CAPTURE(trial);

    Tensor x = random_tensor({batch, cin, h, w}, rng);
    Tensor wt = random_tensor({cout, cin, k, k}, rng);
    Tensor b = random_tensor({cout}, rng);
    Tensor dy = random_tensor({batch, cout, g.out_h, g.out_w}, rng);

    Tensor y_fast({batch, cout, g.out_h, g.out_w}), y_ref = y_fast;
    kernels::conv2d_forward(g, x.ptr(), wt.ptr(), b.ptr(), y_fast.ptr());
    kernels::reference::conv2d_forward(g, x.ptr(), wt.ptr(), b.ptr(), y_ref.ptr());
    CHECK(max_abs_diff(y_fast, y_ref) < 1e-12);

    Tensor dx_fast(x.shape()), dx_ref(x.shape());
    kernels::conv2d_backward_input(g, wt.ptr(), dy.ptr(), dx_fast.ptr());
    kernels::reference::conv2d_backward_input(g, wt.ptr(), dy.ptr(), dx_ref.ptr());
    CHECK(max_abs_diff(dx_fast, dx_ref) < 1e-12);

    Tensor dw_fast(wt.shape()), dw_ref(wt.shape()), db_fast({cout}), db_ref({cout});
    kernels::conv2d_backward_weight(g, x.ptr(), dy.ptr(), dw_fast.ptr(), db_fast.ptr());
    kernels::reference::conv2d_backward_weight(g, x.ptr(), dy.ptr(), dw_ref.ptr(), db_ref.ptr());
    CHECK(max_abs_diff(dw_fast, dw_ref) < 1e-12);
    CHECK(max_abs_diff(db_fast, db_ref) < 1e-12);
  }
}

TEST_CASE("parallel linear kernels agree with the serial reference") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int batch = rng.integer(1, 6), in = rng.integer(1, 17), out = rng.integer(1, 9);
    Tensor x = random_tensor({batch, in}, rng), w = random_tensor({out, in}, rng), b = random_tensor({out}, rng);
    Tensor dy = random_tensor({batch, out}, rng);
    Tensor y1({batch, out}), y2({batch, out});
    kernels::linear_forward(batch, in, out, x.ptr(), w.ptr(), b.ptr(), y1.ptr());
    kernels::reference::linear_forward(batch, in, out, x.ptr(), w.ptr(), b.ptr(), y2.ptr());
    CHECK(max_abs_diff(y1, y2) < 1e-12);
    Tensor dx1(x.shape()), dx2(x.shape()), dw1(w.shape()), dw2(w.shape()), db1({out}), db2({out});
    kernels::linear_backward_input(batch, in, out, w.ptr(), dy.ptr(), dx1.ptr());
    kernels::reference::linear_backward_input(batch, in, out, w.ptr(), dy.ptr(), dx2.ptr());
    kernels::linear_backward_weight(batch, in, out, x.ptr(), dy.ptr(), dw1.ptr(), db1.ptr());
    kernels::reference::linear_backward_weight(batch, in, out, x.ptr(), dy.ptr(), dw2.ptr(), db2.ptr());
    CHECK(max_abs_diff(dx1, dx2) < 1e-12);
    CHECK(max_abs_diff(dw1, dw2) < 1e-12);
    CHECK(max_abs_diff(db1, db2) < 1e-12);
  }
}

TEST_CASE("convolution geometry rejects empty outputs") {
  CHECK_THROWS(kernels::conv_geometry(1, 1, 2, 2, 1, 5, 1, 0));
  const auto g = kernels::conv_geometry(1, 1, 32, 32, 1, 3, 2, 1);
  CHECK(g.out_h == 16);
  CHECK(g.out_w == 16);
}
