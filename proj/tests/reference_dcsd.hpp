#pragma once

// Plain-loop re-derivation of the DCSD forward pass from the layer's raw
// parameter values. Materializes every per-position K*K kernel and applies
// a five-loop depthwise convolution. Shares no code with the layer.

#include <cmath>
#include <vector>

#include "dcsd/dcsd_layer.hpp"

namespace dcsd::testing {

inline std::vector<double> ref_linear(const std::vector<double>& in, std::size_t rows, const Linear& l) {
  const std::size_t a = l.weight.dim(0), b = l.weight.dim(1);
  std::vector<double> out(rows * b, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < b; ++j) {
      double s = l.bias.defined() ? l.bias[j] : 0.0;
      for (std::size_t i = 0; i < a; ++i) s += in[r * a + i] * l.weight[i * b + j];
      out[r * b + j] = s;
    }
  return out;
}

inline std::vector<double> ref_mlp(const std::vector<double>& in, std::size_t rows, const Mlp& m) {
  auto h = ref_linear(in, rows, m.fc1);
  for (double& v : h) v = v > 0.0 ? v : 0.0;
  return ref_linear(h, rows, m.fc2);
}

struct ReferenceDcsd {
  std::vector<double> kernels;  // [N,C,H,W,K*K]
  std::vector<double> feature;  // [N,C,H,W]
};

inline ReferenceDcsd reference_dcsd(const DcsdLayer& layer, const Tensor& x) {
  const auto& cfg = layer.config();
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = cfg.kernel_size, KK = K * K;
  const long P = static_cast<long>((K - 1) / 2);
  std::vector<double> pooled(N * C, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < H * W; ++p) s += x[(n * C + c) * H * W + p];
      pooled[n * C + c] = s / static_cast<double>(H * W);
    }
  const auto dom = ref_mlp(pooled, N, layer.mlp_domain);
  const auto cam = ref_mlp(pooled, N, layer.mlp_camera);
  std::vector<double> extra(N * C, 0.0), vec(N * C, 0.0);
  for (std::size_t i = 0; i < N * C; ++i) {
    extra[i] = (cfg.use_domain ? dom[i] : 0.0) + (cfg.use_camera ? cam[i] : 0.0);
    vec[i] = (cfg.use_sample ? pooled[i] : 0.0) + extra[i];
  }
  const auto tvals = ref_mlp(vec, N, layer.channel_branch);  // [N, C*KK]

  ReferenceDcsd r;
  r.kernels.assign(N * C * H * W * KK, 0.0);
  r.feature.assign(N * C * H * W, 0.0);
  const Tensor& sw = layer.spatial_branch.weight;  // [KK, C, 1, 1]
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        std::vector<double> s(KK, 0.0);
        for (std::size_t q = 0; q < KK; ++q)
          for (std::size_t c = 0; c < C; ++c) {
            const double fused = (cfg.use_sample ? x[((n * C + c) * H + h) * W + w] : 0.0) + extra[n * C + c];
            s[q] += sw[q * C + c] * fused;
          }
        for (std::size_t c = 0; c < C; ++c) {
          double* kern = r.kernels.data() + (((n * C + c) * H + h) * W + w) * KK;
          for (std::size_t q = 0; q < KK; ++q) kern[q] = s[q] * tvals[(n * C + c) * KK + q];
          if (cfg.kernel_normalization == KernelNormalization::softmax_over_k2) {
            double z = 0.0;
            for (std::size_t q = 0; q < KK; ++q) z += std::exp(kern[q]);
            for (std::size_t q = 0; q < KK; ++q) kern[q] = std::exp(kern[q]) / z;
          }
        }
      }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (long h = 0; h < static_cast<long>(H); ++h)
        for (long w = 0; w < static_cast<long>(W); ++w) {
          const std::size_t pos = ((n * C + c) * H + h) * W + w;
          double acc = 0.0;
          for (long i = 0; i < static_cast<long>(K); ++i)
            for (long j = 0; j < static_cast<long>(K); ++j) {
              const long ih = h + i - P, iw = w + j - P;
              if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
              acc += r.kernels[pos * KK + i * K + j] * x[((n * C + c) * H + ih) * W + iw];
            }
          r.feature[pos] = acc;
        }
  return r;
}

}  // namespace dcsd::testing
