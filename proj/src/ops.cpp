#include "dcsd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dcsd/error.hpp"

namespace dcsd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

using BackwardFn = std::function<void(std::span<const double>)>;

Tensor finish(Tensor out, std::vector<Tensor> inputs, const char* op, BackwardFn fn) {
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.set_node(std::move(node));
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

struct Conv2dGeom {
  std::size_t n, c, h, w, co, k, stride, pad, ho, wo;
};

// Unfolds one sample [C,H,W] into [C*K*K, Ho*Wo] with zero padding.
void im2col(const double* x, const Conv2dGeom& g, double* cols) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.k; ++i)
      for (std::size_t j = 0; j < g.k; ++j) {
        double* row = cols + ((c * g.k + i) * g.k + j) * hw_out;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.h) &&
                                iw < static_cast<long>(g.w);
            row[oh * g.wo + ow] = inside ? x[(c * g.h + ih) * g.w + iw] : 0.0;
          }
        }
      }
}

void col2im_add(const double* cols, const Conv2dGeom& g, double* dx) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.k; ++i)
      for (std::size_t j = 0; j < g.k; ++j) {
        const double* row = cols + ((c * g.k + i) * g.k + j) * hw_out;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + ih) * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
}

bool is_pointwise(const Conv2dGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

// --- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), 0.0);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  return finish(out, {a, b}, "add", [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& gt = t->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), 0.0);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  return finish(out, {a, b}, "mul", [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape(), 0.0);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * s;
  return finish(out, {a}, "scale", [a, s](std::span<const double> g) {
    auto& ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape(), 0.0);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  return finish(out, {x}, "relu", [x](std::span<const double> g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) gx[i] += g[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return finish(Tensor::scalar(s), {x}, "sum", [x](std::span<const double> g) {
    auto& gx = x.grad_buffer();
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor weighted_sum(std::span<const Tensor> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size() || scalars.empty())
    throw ShapeError("weighted_sum: need matching, non-empty scalar and weight lists");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].numel() != 1) throw ShapeError("weighted_sum: operands must be scalars");
    s += weights[i] * scalars[i][0];
  }
  std::vector<Tensor> inputs(scalars.begin(), scalars.end());
  std::vector<double> w(weights.begin(), weights.end());
  return finish(Tensor::scalar(s), inputs, "weighted_sum",
                [inputs, w](std::span<const double> g) {
                  for (std::size_t i = 0; i < inputs.size(); ++i)
                    if (inputs[i].requires_grad()) inputs[i].grad_buffer()[0] += g[0] * w[i];
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), x.values());
  return finish(out, {x}, "reshape", [x](std::span<const double> g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor detach(const Tensor& x) { return Tensor(x.shape(), x.values()); }

// --- dense algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor out({m, n}, 0.0);
  MapMat(out.mutable_data().data(), m, n).noalias() =
      MapConstMat(a.data().data(), m, k) * MapConstMat(b.data().data(), k, n);
  return finish(out, {a, b}, "matmul", [a, b, m, k, n](std::span<const double> g) {
    MapConstMat gm(g.data(), m, n);
    if (a.requires_grad())
      MapMat(a.grad_buffer().data(), m, k).noalias() +=
          gm * MapConstMat(b.data().data(), k, n).transpose();
    if (b.requires_grad())
      MapMat(b.grad_buffer().data(), k, n).noalias() +=
          MapConstMat(a.data().data(), m, k).transpose() * gm;
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias", "input");
  require_rank(bias, 1, "add_row_bias", "bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols)
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " vs input " +
                     shape_str(x.shape()));
  Tensor out(x.shape(), 0.0);
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = x[r * cols + c] + bias[c];
  return finish(out, {x, bias}, "add_row_bias", [x, bias, rows, cols](std::span<const double> g) {
    if (x.requires_grad()) {
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto& gb = bias.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

Tensor add_channel_broadcast(const Tensor& x, const Tensor& v) {
  require_rank(x, 4, "add_channel_broadcast", "input");
  require_rank(v, 2, "add_channel_broadcast", "vector");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (v.dim(0) != n || v.dim(1) != c)
    throw ShapeError("add_channel_broadcast: vector " + shape_str(v.shape()) + " vs input " +
                     shape_str(x.shape()));
  Tensor out(x.shape(), 0.0);
  auto o = out.mutable_data();
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t p = 0; p < hw; ++p) o[nc * hw + p] = x[nc * hw + p] + v[nc];
  return finish(out, {x, v}, "add_channel_broadcast", [x, v, n, c, hw](std::span<const double> g) {
    if (x.requires_grad()) {
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (v.requires_grad()) {
      auto& gv = v.grad_buffer();
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += g[nc * hw + p];
        gv[nc] += s;
      }
    }
  });
}

// --- convolution --------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  const std::size_t k = w.dim(2);
  if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(1)) + " input channels, input is " + shape_str(x.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const long hp = static_cast<long>(x.dim(2) + 2 * pad) - static_cast<long>(k);
  const long wp = static_cast<long>(x.dim(3) + 2 * pad) - static_cast<long>(k);
  if (hp < 0 || wp < 0) throw ShapeError("conv2d: output extent < 1 for input " + shape_str(x.shape()));
  const Conv2dGeom geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), k, stride, pad,
                       static_cast<std::size_t>(hp) / stride + 1,
                       static_cast<std::size_t>(wp) / stride + 1};
  const std::size_t rows = geo.c * k * k, hw_out = geo.ho * geo.wo;
  const std::size_t in_stride = geo.c * geo.h * geo.w, out_stride = geo.co * hw_out;

  Tensor out({geo.n, geo.co, geo.ho, geo.wo}, 0.0);
  std::vector<double> cols(is_pointwise(geo) ? 0 : rows * hw_out);
  MapConstMat wm(w.data().data(), geo.co, rows);
  for (std::size_t n = 0; n < geo.n; ++n) {
    const double* xn = x.data().data() + n * in_stride;
    const double* src = xn;
    if (!is_pointwise(geo)) {
      im2col(xn, geo, cols.data());
      src = cols.data();
    }
    MapMat(out.mutable_data().data() + n * out_stride, geo.co, hw_out).noalias() =
        wm * MapConstMat(src, rows, hw_out);
  }

  return finish(out, {x, w}, "conv2d", [x, w, geo, rows, hw_out, in_stride, out_stride](
                                           std::span<const double> g) {
    std::vector<double> cols(is_pointwise(geo) ? 0 : rows * hw_out);
    std::vector<double> dcols(rows * hw_out);
    MapConstMat wm(w.data().data(), geo.co, rows);
    for (std::size_t n = 0; n < geo.n; ++n) {
      MapConstMat gn(g.data() + n * out_stride, geo.co, hw_out);
      const double* xn = x.data().data() + n * in_stride;
      if (w.requires_grad()) {
        const double* src = xn;
        if (!is_pointwise(geo)) {
          im2col(xn, geo, cols.data());
          src = cols.data();
        }
        MapMat(w.grad_buffer().data(), geo.co, rows).noalias() +=
            gn * MapConstMat(src, rows, hw_out).transpose();
      }
      if (x.requires_grad()) {
        double* dx = x.grad_buffer().data() + n * in_stride;
        if (is_pointwise(geo)) {
          MapMat(dx, rows, hw_out).noalias() += wm.transpose() * gn;
        } else {
          MapMat(dcols.data(), rows, hw_out).noalias() = wm.transpose() * gn;
          col2im_add(dcols.data(), geo, dx);
        }
      }
    }
  });
}

Tensor depthwise_conv2d_dynamic(const Tensor& x, const Tensor& kernels, std::size_t pad) {
  require_rank(x, 4, "depthwise_conv2d_dynamic", "input");
  require_rank(kernels, 6, "depthwise_conv2d_dynamic", "kernels");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = kernels.dim(4);
  for (std::size_t i = 0; i < 4; ++i)
    if (kernels.dim(i) != x.dim(i))
      throw ShapeError("depthwise_conv2d_dynamic: kernels " + shape_str(kernels.shape()) +
                       " do not match input " + shape_str(x.shape()));
  if (kernels.dim(5) != k || k % 2 == 0)
    throw ShapeError("depthwise_conv2d_dynamic: kernel must be square with odd size");
  if (pad != (k - 1) / 2) throw ShapeError("depthwise_conv2d_dynamic: pad must be (K-1)/2");

  const long hl = static_cast<long>(h), wl = static_cast<long>(w), p = static_cast<long>(pad);
  const std::size_t kk = k * k;
  Tensor out(x.shape(), 0.0);
  auto o = out.mutable_data();
  const auto xd = x.data();
  const auto kd = kernels.data();
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (long oh = 0; oh < hl; ++oh)
      for (long ow = 0; ow < wl; ++ow) {
        const std::size_t pos = (nc * h + oh) * w + ow;
        const double* kern = kd.data() + pos * kk;
        double s = 0.0;
        for (long i = 0; i < static_cast<long>(k); ++i) {
          const long ih = oh + i - p;
          if (ih < 0 || ih >= hl) continue;
          for (long j = 0; j < static_cast<long>(k); ++j) {
            const long iw = ow + j - p;
            if (iw < 0 || iw >= wl) continue;
            s += kern[i * k + j] * xd[(nc * h + ih) * w + iw];
          }
        }
        o[pos] = s;
      }

  return finish(out, {x, kernels}, "depthwise_conv2d_dynamic",
                [x, kernels, n, c, h, w, k, hl, wl, p, kk](std::span<const double> g) {
                  const auto xd = x.data();
                  const auto kd = kernels.data();
                  double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
                  double* gk = kernels.requires_grad() ? kernels.grad_buffer().data() : nullptr;
                  for (std::size_t nc = 0; nc < n * c; ++nc)
                    for (long oh = 0; oh < hl; ++oh)
                      for (long ow = 0; ow < wl; ++ow) {
                        const std::size_t pos = (nc * h + oh) * w + ow;
                        const double go = g[pos];
                        for (long i = 0; i < static_cast<long>(k); ++i) {
                          const long ih = oh + i - p;
                          if (ih < 0 || ih >= hl) continue;
                          for (long j = 0; j < static_cast<long>(k); ++j) {
                            const long iw = ow + j - p;
                            if (iw < 0 || iw >= wl) continue;
                            const std::size_t xi = (nc * h + ih) * w + iw;
                            if (gk) gk[pos * kk + i * k + j] += go * xd[xi];
                            if (gx) gx[xi] += go * kd[pos * kk + i * k + j];
                          }
                        }
                      }
                });
}

namespace {

struct FactorGeom {
  std::size_t n, c, h, w, k, kk;
};

FactorGeom check_factorized(const Tensor& x, const Tensor& spatial, const Tensor& channel) {
  require_rank(x, 4, "factorized_dynamic_depthwise", "input");
  require_rank(spatial, 4, "factorized_dynamic_depthwise", "spatial kernels");
  require_rank(channel, 3, "factorized_dynamic_depthwise", "channel kernels");
  const std::size_t kk = channel.dim(2);
  const auto k = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(kk))));
  if (k * k != kk || k % 2 == 0)
    throw ShapeError("factorized_dynamic_depthwise: K*K axis must be an odd square");
  if (spatial.dim(0) != x.dim(0) || spatial.dim(1) != kk || spatial.dim(2) != x.dim(2) ||
      spatial.dim(3) != x.dim(3) || channel.dim(0) != x.dim(0) || channel.dim(1) != x.dim(1))
    throw ShapeError("factorized_dynamic_depthwise: spatial " + shape_str(spatial.shape()) +
                     " / channel " + shape_str(channel.shape()) + " do not match input " +
                     shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, kk};
}

// Fills taps[q] with the kernel at (n,c,h,w); raw[q] keeps the pre-softmax
// product so callers can reuse it.
void factor_taps(const FactorGeom& g, const double* s, const double* t, KernelNormalization norm,
                 std::size_t n, std::size_t c, std::size_t hw_pos, double* taps) {
  const std::size_t hw = g.h * g.w;
  const double* tc = t + (n * g.c + c) * g.kk;
  const double* sn = s + n * g.kk * hw + hw_pos;
  for (std::size_t q = 0; q < g.kk; ++q) taps[q] = sn[q * hw] * tc[q];
  if (norm == KernelNormalization::softmax_over_k2) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < g.kk; ++q) mx = std::max(mx, taps[q]);
    double z = 0.0;
    for (std::size_t q = 0; q < g.kk; ++q) z += (taps[q] = std::exp(taps[q] - mx));
    for (std::size_t q = 0; q < g.kk; ++q) taps[q] /= z;
  }
}

}  // namespace

std::vector<double> factorized_kernel_at(const Tensor& spatial, const Tensor& channel,
                                         KernelNormalization norm, std::size_t n, std::size_t c,
                                         std::size_t h, std::size_t w) {
  require_rank(spatial, 4, "factorized_kernel_at", "spatial kernels");
  require_rank(channel, 3, "factorized_kernel_at", "channel kernels");
  const std::size_t kk = channel.dim(2);
  if (spatial.dim(1) != kk || spatial.dim(0) != channel.dim(0))
    throw ShapeError("factorized_kernel_at: inconsistent branch shapes");
  if (n >= channel.dim(0) || c >= channel.dim(1) || h >= spatial.dim(2) || w >= spatial.dim(3))
    throw IndexError("factorized_kernel_at: index (" + std::to_string(n) + "," + std::to_string(c) +
                     "," + std::to_string(h) + "," + std::to_string(w) + ") out of range");
  const FactorGeom g{channel.dim(0), channel.dim(1), spatial.dim(2), spatial.dim(3), 0, kk};
  std::vector<double> taps(kk);
  factor_taps(g, spatial.data().data(), channel.data().data(), norm, n, c, h * g.w + w, taps.data());
  return taps;
}

Tensor factorized_dynamic_depthwise(const Tensor& x, const Tensor& spatial, const Tensor& channel,
                                    KernelNormalization norm) {
  const FactorGeom g = check_factorized(x, spatial, channel);
  const long hl = static_cast<long>(g.h), wl = static_cast<long>(g.w);
  const long p = static_cast<long>((g.k - 1) / 2), kl = static_cast<long>(g.k);
  Tensor out(x.shape(), 0.0);
  auto o = out.mutable_data();
  const double* xd = x.data().data();
  std::vector<double> taps(g.kk);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.c; ++c) {
      const double* xc = xd + (n * g.c + c) * g.h * g.w;
      for (long oh = 0; oh < hl; ++oh)
        for (long ow = 0; ow < wl; ++ow) {
          factor_taps(g, spatial.data().data(), channel.data().data(), norm, n, c,
                      static_cast<std::size_t>(oh * wl + ow), taps.data());
          double s = 0.0;
          for (long i = 0; i < kl; ++i) {
            const long ih = oh + i - p;
            if (ih < 0 || ih >= hl) continue;
            for (long j = 0; j < kl; ++j) {
              const long iw = ow + j - p;
              if (iw < 0 || iw >= wl) continue;
              s += taps[i * kl + j] * xc[ih * wl + iw];
            }
          }
          o[((n * g.c + c) * g.h + oh) * g.w + ow] = s;
        }
    }

  return finish(out, {x, spatial, channel}, "factorized_dynamic_depthwise",
                [x, spatial, channel, norm, g, hl, wl, p, kl](std::span<const double> gout) {
                  const double* xd = x.data().data();
                  const double* sd = spatial.data().data();
                  const double* td = channel.data().data();
                  double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
                  double* gs = spatial.requires_grad() ? spatial.grad_buffer().data() : nullptr;
                  double* gt = channel.requires_grad() ? channel.grad_buffer().data() : nullptr;
                  const std::size_t hw = g.h * g.w;
                  std::vector<double> taps(g.kk), patch(g.kk), dz(g.kk);
                  for (std::size_t n = 0; n < g.n; ++n)
                    for (std::size_t c = 0; c < g.c; ++c) {
                      const std::size_t nc = n * g.c + c;
                      const double* xc = xd + nc * hw;
                      for (long oh = 0; oh < hl; ++oh)
                        for (long ow = 0; ow < wl; ++ow) {
                          const auto hw_pos = static_cast<std::size_t>(oh * wl + ow);
                          const double go = gout[nc * hw + hw_pos];
                          if (go == 0.0) continue;
                          factor_taps(g, sd, td, norm, n, c, hw_pos, taps.data());
                          for (long i = 0; i < kl; ++i) {
                            const long ih = oh + i - p;
                            for (long j = 0; j < kl; ++j) {
                              const long iw = ow + j - p;
                              const bool inside = ih >= 0 && ih < hl && iw >= 0 && iw < wl;
                              patch[i * kl + j] = inside ? xc[ih * wl + iw] : 0.0;
                              if (gx && inside) gx[nc * hw + ih * wl + iw] += go * taps[i * kl + j];
                            }
                          }
                          // d(out)/d(raw product) per tap
                          if (norm == KernelNormalization::softmax_over_k2) {
                            double dot = 0.0;
                            for (std::size_t q = 0; q < g.kk; ++q) dot += taps[q] * patch[q];
                            for (std::size_t q = 0; q < g.kk; ++q)
                              dz[q] = go * taps[q] * (patch[q] - dot);
                          } else {
                            for (std::size_t q = 0; q < g.kk; ++q) dz[q] = go * patch[q];
                          }
                          for (std::size_t q = 0; q < g.kk; ++q) {
                            const std::size_t si = (n * g.kk + q) * hw + hw_pos;
                            const std::size_t ti = nc * g.kk + q;
                            if (gs) gs[si] += dz[q] * td[ti];
                            if (gt) gt[ti] += dz[q] * sd[si];
                          }
                        }
                    }
                });
}

// --- pooling --------------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c}, 0.0);
  auto o = out.mutable_data();
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += x[nc * hw + p];
    o[nc] = s * inv;
  }
  return finish(out, {x}, "global_avg_pool", [x, n, c, hw, inv](std::span<const double> g) {
    auto& gx = x.grad_buffer();
    for (std::size_t nc = 0; nc < n * c; ++nc)
      for (std::size_t p = 0; p < hw; ++p) gx[nc * hw + p] += g[nc] * inv;
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_rank(x, 4, "avg_pool2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0)
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({n, c, ho, wo}, 0.0);
  auto o = out.mutable_data();
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) s += x[(nc * h + oh * k + i) * w + ow * k + j];
        o[(nc * ho + oh) * wo + ow] = s * inv;
      }
  return finish(out, {x}, "avg_pool2d", [x, n, c, h, w, k, ho, wo, inv](std::span<const double> g) {
    auto& gx = x.grad_buffer();
    for (std::size_t nc = 0; nc < n * c; ++nc)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          const double v = g[(nc * ho + oh) * wo + ow] * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) gx[(nc * h + oh * k + i) * w + ow * k + j] += v;
        }
  });
}

Tensor max_pool2d(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "max_pool2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const long hp = static_cast<long>(h + 2 * pad) - static_cast<long>(k);
  const long wp = static_cast<long>(w + 2 * pad) - static_cast<long>(k);
  if (stride == 0 || hp < 0 || wp < 0) throw ShapeError("max_pool2d: output extent < 1");
  const std::size_t ho = static_cast<std::size_t>(hp) / stride + 1;
  const std::size_t wo = static_cast<std::size_t>(wp) / stride + 1;
  Tensor out({n, c, ho, wo}, 0.0);
  auto o = out.mutable_data();
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < k; ++i) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(h)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(w)) continue;
            const std::size_t xi = (nc * h + ih) * w + iw;
            if (x[xi] > best) {
              best = x[xi];
              best_i = xi;
            }
          }
        }
        const std::size_t oi = (nc * ho + oh) * wo + ow;
        o[oi] = best;
        arg[oi] = best_i;
      }
  return finish(out, {x}, "max_pool2d", [x, arg](std::span<const double> g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

// --- batch norm ----------------------------------------------------------

BatchNormState BatchNormState::make(std::size_t channels) {
  BatchNormState bn;
  bn.gamma = Tensor::constant({channels}, 1.0).set_requires_grad(true);
  bn.beta = Tensor::zeros({channels}).set_requires_grad(true);
  bn.running_mean.assign(channels, 0.0);
  bn.running_var.assign(channels, 1.0);
  return bn;
}

Tensor batch_norm(const Tensor& x, BatchNormState& bn, Mode mode) {
  if (x.rank() != 2 && x.rank() != 4)
    throw ShapeError("batch_norm: input must be [N,C] or [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (bn.gamma.numel() != c)
    throw ShapeError("batch_norm: state has " + std::to_string(bn.gamma.numel()) +
                     " channels, input " + shape_str(x.shape()));
  if (mode == Mode::train && n < 2)
    throw DegenerateBatchError("batch_norm: train mode needs at least 2 samples, got " + std::to_string(n));

  const double count = static_cast<double>(n * hw);
  std::vector<double> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) s += x[(i * c + ch) * hw + p];
      const double m = s / count;
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = x[(i * c + ch) * hw + p] - m;
          v += d * d;
        }
      v /= count;
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(v + bn.eps);
      bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * m;
      bn.running_var[ch] =
          (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * v * count / (count - 1.0);
    } else {
      mu[ch] = bn.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(bn.running_var[ch] + bn.eps);
    }
  }

  Tensor out(x.shape(), 0.0);
  auto o = out.mutable_data();
  std::vector<double> xhat(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t idx = (i * c + ch) * hw + p;
        xhat[idx] = (x[idx] - mu[ch]) * inv_std[ch];
        o[idx] = bn.gamma[ch] * xhat[idx] + bn.beta[ch];
      }

  const bool training = mode == Mode::train;
  return finish(out, {x, bn.gamma, bn.beta}, "batch_norm",
                [x, gamma = bn.gamma, beta = bn.beta, xhat = std::move(xhat), inv_std, n, c, hw,
                 count, training](std::span<const double> g) {
                  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        sum_g[ch] += g[idx];
                        sum_gx[ch] += g[idx] * xhat[idx];
                      }
                  if (gamma.requires_grad()) {
                    auto& gg = gamma.grad_buffer();
                    for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                  }
                  if (beta.requires_grad()) {
                    auto& gb = beta.grad_buffer();
                    for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                  }
                  if (!x.requires_grad()) return;
                  auto& gx = x.grad_buffer();
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const double a = gamma[ch] * inv_std[ch];
                      for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        gx[idx] += training ? a * (g[idx] - sum_g[ch] / count -
                                                   xhat[idx] * sum_gx[ch] / count)
                                            : a * g[idx];
                      }
                    }
                });
}

}  // namespace dcsd
