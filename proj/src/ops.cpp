#include "privisp/ops.hpp"

#include <algorithm>
#include <cmath>

#include "privisp/error.hpp"
#include "privisp/kernels.hpp"

namespace privisp::ad {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ValidationError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(xv[i]);
  return make_result(std::move(out), {x}, [deriv](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * deriv(a.value[i], self.value[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.accumulate(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (in(self, k).requires_grad) in(self, k).ensure_grad().accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (in(self, 0).requires_grad) in(self, 0).ensure_grad().accumulate(self.grad);
    if (in(self, 1).requires_grad) {
      Tensor& g = in(self, 1).ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    if (x.requires_grad) {
      Tensor& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      Tensor& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var clamp01(const Var& x) {
  return unary(
      x, [](double v) { return std::clamp(v, 0.0, 1.0); },
      [](double v, double) { return (v >= 0.0 && v <= 1.0) ? 1.0 : 0.0; });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result(Tensor({1}, {s}), {x}, [](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const double d = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += d;
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / n);
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3))
    throw ValidationError("conv2d: bad shapes x" + xv.shape_string() + " w" + wv.shape_string());
  const auto g = kernels::conv_geometry(xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, pad);
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  kernels::conv2d_forward(g, xv.ptr(), wv.ptr(), b.defined() ? b.value().ptr() : nullptr, out.ptr());
  std::vector<Var> inputs{x, w};
  const bool has_bias = b.defined();
  if (has_bias) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [g, has_bias](Node& self) {
    Node& xn = in(self, 0);
    Node& wn = in(self, 1);
    if (xn.requires_grad) kernels::conv2d_backward_input(g, wn.value.ptr(), self.grad.ptr(), xn.ensure_grad().ptr());
    const bool bias_grad = has_bias && in(self, 2).requires_grad;
    if (wn.requires_grad || bias_grad) {
      // The weight kernel also produces the bias sum; route to scratch when one side is frozen.
      Tensor dw_scratch, db_scratch;
      double* dw = wn.requires_grad ? wn.ensure_grad().ptr() : (dw_scratch = Tensor(wn.value.shape())).ptr();
      double* db = nullptr;
      if (has_bias) db = bias_grad ? in(self, 2).ensure_grad().ptr() : (db_scratch = Tensor({g.out_channels})).ptr();
      kernels::conv2d_backward_weight(g, xn.value.ptr(), self.grad.ptr(), dw, db);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(1) != xv.dim(1))
    throw ValidationError("linear: bad shapes x" + xv.shape_string() + " w" + wv.shape_string());
  const int batch = xv.dim(0), nin = xv.dim(1), nout = wv.dim(0);
  Tensor out({batch, nout});
  kernels::linear_forward(batch, nin, nout, xv.ptr(), wv.ptr(), b.defined() ? b.value().ptr() : nullptr, out.ptr());
  std::vector<Var> inputs{x, w};
  const bool has_bias = b.defined();
  if (has_bias) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [batch, nin, nout, has_bias](Node& self) {
    Node& xn = in(self, 0);
    Node& wn = in(self, 1);
    if (xn.requires_grad)
      kernels::linear_backward_input(batch, nin, nout, wn.value.ptr(), self.grad.ptr(), xn.ensure_grad().ptr());
    const bool bias_grad = has_bias && in(self, 2).requires_grad;
    if (wn.requires_grad || bias_grad) {
      Tensor dw_scratch, db_scratch;
      double* dw = wn.requires_grad ? wn.ensure_grad().ptr() : (dw_scratch = Tensor(wn.value.shape())).ptr();
      double* db = nullptr;
      if (has_bias) db = bias_grad ? in(self, 2).ensure_grad().ptr() : (db_scratch = Tensor({nout})).ptr();
      kernels::linear_backward_weight(batch, nin, nout, xn.value.ptr(), self.grad.ptr(), dw, db);
    }
  });
}

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var flatten(const Var& x) {
  const int n = x.value().dim(0);
  return reshape(x, {n, static_cast<int>(x.value().numel() / static_cast<std::size_t>(n))});
}

Var upsample_nearest2x(const Var& x) {
  const Tensor& v = x.value();
  const int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) out.at(n, c, y, xx) = v.at(n, c, y / 2, xx / 2);
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const int N = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx) g.at(n, c, y / 2, xx / 2) += self.grad.at(n, c, y, xx);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    throw ValidationError("concat_channels: shape mismatch " + av.shape_string() + " vs " + bv.shape_string());
  const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
  Tensor out({N, Ca + Cb, av.dim(2), av.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(av.ptr() + n * Ca * plane, Ca * plane, out.ptr() + n * (Ca + Cb) * plane);
    std::copy_n(bv.ptr() + n * Cb * plane, Cb * plane, out.ptr() + (n * (Ca + Cb) + Ca) * plane);
  }
  return make_result(std::move(out), {a, b}, [N, Ca, Cb, plane](Node& self) {
    for (int n = 0; n < N; ++n) {
      if (in(self, 0).requires_grad) {
        double* g = in(self, 0).ensure_grad().ptr() + n * Ca * plane;
        const double* s = self.grad.ptr() + n * (Ca + Cb) * plane;
        for (std::size_t i = 0; i < Ca * plane; ++i) g[i] += s[i];
      }
      if (in(self, 1).requires_grad) {
        double* g = in(self, 1).ensure_grad().ptr() + n * Cb * plane;
        const double* s = self.grad.ptr() + (n * (Ca + Cb) + Ca) * plane;
        for (std::size_t i = 0; i < Cb * plane; ++i) g[i] += s[i];
      }
    }
  });
}

Var pad_replicate(const Var& x, int h, int w) {
  const Tensor& v = x.value();
  const int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  if (h < H || w < W) throw ValidationError("pad_replicate: target smaller than input");
  Tensor out({N, C, h, w});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out.at(n, c, y, xx) = v.at(n, c, std::min(y, H - 1), std::min(xx, W - 1));
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const int N = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
    const int h = self.grad.dim(2), w = self.grad.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) g.at(n, c, std::min(y, H - 1), std::min(xx, W - 1)) += self.grad.at(n, c, y, xx);
  });
}

Var crop(const Var& x, int h, int w) {
  const Tensor& v = x.value();
  const int N = v.dim(0), C = v.dim(1);
  if (h > v.dim(2) || w > v.dim(3)) throw ValidationError("crop: window larger than input");
  Tensor out({N, C, h, w});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out.at(n, c, y, xx) = v.at(n, c, y, xx);
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const int N = self.grad.dim(0), C = self.grad.dim(1), h = self.grad.dim(2), w = self.grad.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) g.at(n, c, y, xx) += self.grad.at(n, c, y, xx);
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& v = x.value();
  const int N = v.dim(0), C = v.dim(1);
  const std::size_t plane = static_cast<std::size_t>(v.dim(2)) * v.dim(3);
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = v.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out.at(n, c) = s / static_cast<double>(plane);
    }
  return make_result(std::move(out), {x}, [N, C, plane](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double d = self.grad.at(n, c) / static_cast<double>(plane);
        double* p = g.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += d;
      }
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& v = x.value();
  const int N = v.dim(0), D = v.dim(1);
  Tensor out({N, D});
  std::vector<double> norms(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += v.at(n, d) * v.at(n, d);
    norms[n] = std::max(std::sqrt(s), 1e-12);
    for (int d = 0; d < D; ++d) out.at(n, d) = v.at(n, d) / norms[n];
  }
  return make_result(std::move(out), {x}, [N, D, norms](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    for (int n = 0; n < N; ++n) {
      // d(x/|x|) = (g - y (y.g)) / |x|
      double dot = 0.0;
      for (int d = 0; d < D; ++d) dot += self.value.at(n, d) * self.grad.at(n, d);
      for (int d = 0; d < D; ++d) g.at(n, d) += (self.grad.at(n, d) - self.value.at(n, d) * dot) / norms[n];
    }
  });
}

namespace {

Tensor softmax_rows(const Tensor& logits) {
  const int N = logits.dim(0), C = logits.dim(1);
  Tensor p({N, C});
  for (int n = 0; n < N; ++n) {
    double mx = logits.at(n, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits.at(n, c));
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += (p.at(n, c) = std::exp(logits.at(n, c) - mx));
    for (int c = 0; c < C; ++c) p.at(n, c) /= s;
  }
  return p;
}

void check_labels(const Tensor& logits, std::span<const int> labels, const char* op) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw ValidationError(std::string(op) + ": logits/labels mismatch");
  for (int y : labels)
    if (y < 0 || y >= logits.dim(1)) throw ValidationError(std::string(op) + ": label out of range");
}

}  // namespace

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  check_labels(lv, labels, "cross_entropy");
  const int N = lv.dim(0), C = lv.dim(1);
  Tensor p = softmax_rows(lv);
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    double mx = lv.at(n, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, lv.at(n, c));
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(lv.at(n, c) - mx);
    loss += std::log(s) + mx - lv.at(n, labels[n]);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result(Tensor({1}, {loss / N}), {logits}, [p = std::move(p), ys, N, C](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const double d = self.grad[0] / N;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) g.at(n, c) += d * (p.at(n, c) - (c == ys[n] ? 1.0 : 0.0));
  });
}

Var non_saturated_loss(const Var& logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  check_labels(lv, labels, "non_saturated_loss");
  const int N = lv.dim(0), C = lv.dim(1);
  Tensor p = softmax_rows(lv);
  constexpr double kFloor = 1e-12;
  double loss = 0.0;
  for (int n = 0; n < N; ++n) loss += -std::log(std::max(1.0 - p.at(n, labels[n]), kFloor));
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result(Tensor({1}, {loss / N}), {logits}, [p = std::move(p), ys, N, C](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const double d = self.grad[0] / N;
    for (int n = 0; n < N; ++n) {
      const double py = p.at(n, ys[n]);
      const double q = 1.0 - py;
      if (q <= kFloor) continue;  // floor active: locally constant
      // L = -log(1 - p_y); dL/dz_c = p_y (delta_cy - p_c) / (1 - p_y)
      for (int c = 0; c < C; ++c) {
        const double dp = py * ((c == ys[n] ? 1.0 : 0.0) - p.at(n, c));
        g.at(n, c) += d * dp / q;
      }
    }
  });
}

Var angular_margin_logits(const Var& features, const Var& weight, std::span<const int> labels, double scale,
                          double margin) {
  Var f = l2_normalize_rows(features);
  Var w = l2_normalize_rows(weight);
  Var cosines = linear(f, w, Var());
  const Tensor& cv = cosines.value();
  check_labels(cv, labels, "angular_margin_logits");
  const int N = cv.dim(0), C = cv.dim(1);
  const double cos_m = std::cos(margin), sin_m = std::sin(margin);
  // Beyond theta + m > pi the margin would make the target logit increase again;
  // fall back to the linear penalty used by the reference implementation.
  const double th = std::cos(M_PI - margin);
  const double mm = std::sin(M_PI - margin) * margin;
  Tensor out({N, C});
  std::vector<double> target_slope(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) out.at(n, c) = scale * cv.at(n, c);
    const double ct = std::clamp(cv.at(n, labels[n]), -1.0, 1.0);
    const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
    if (margin == 0.0) {
      target_slope[n] = 1.0;
    } else if (ct > th) {
      out.at(n, labels[n]) = scale * (ct * cos_m - st * sin_m);
      target_slope[n] = cos_m + (st > 1e-12 ? ct / st : 0.0) * sin_m;
    } else {
      out.at(n, labels[n]) = scale * (ct - mm);
      target_slope[n] = 1.0;
    }
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result(std::move(out), {cosines}, [ys, target_slope, scale, N, C](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        g.at(n, c) += self.grad.at(n, c) * scale * (c == ys[n] ? target_slope[n] : 1.0);
  });
}

Var masked_mae(const Var& out, const Tensor& target, const Tensor& mask) {
  const Tensor& ov = out.value();
  require_same(ov, target, "masked_mae");
  if (ov.rank() != 4 || mask.rank() != 4 || mask.dim(0) != ov.dim(0) || mask.dim(1) != 1 ||
      mask.dim(2) != ov.dim(2) || mask.dim(3) != ov.dim(3))
    throw ValidationError("masked_mae: mask shape " + mask.shape_string() + " does not match " + ov.shape_string());
  const int N = ov.dim(0), C = ov.dim(1);
  const std::size_t plane = static_cast<std::size_t>(ov.dim(2)) * ov.dim(3);
  const double count = static_cast<double>(ov.numel());
  double total = 0.0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * C + c) * plane + i;
        const double s = mask[static_cast<std::size_t>(n) * plane + i];
        total += s * std::abs(ov[k] - target[k]) + (1.0 - s) * std::abs(ov[k]);
      }
  return make_result(Tensor({1}, {total / count}), {out}, [target, mask, N, C, plane, count](Node& self) {
    Node& a = in(self, 0);
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const double d = self.grad[0] / count;
    auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = (static_cast<std::size_t>(n) * C + c) * plane + i;
          const double s = mask[static_cast<std::size_t>(n) * plane + i];
          g[k] += d * (s * sgn(a.value[k] - target[k]) + (1.0 - s) * sgn(a.value[k]));
        }
  });
}

}  // namespace privisp::ad
