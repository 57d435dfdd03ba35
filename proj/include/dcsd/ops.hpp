#pragma once

// Differentiable operations over Tensor. Each op validates shapes, computes
// its forward value eagerly and, when any input requires grad, records a
// backward closure. Only the broadcasting patterns the network needs exist.

#include <span>
#include <vector>

#include "dcsd/tensor.hpp"

namespace dcsd {

enum class Mode { train, eval };

// --- elementwise and reductions -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Weighted sum of scalars: sum_i w_i * s_i, accumulated left to right.
Tensor weighted_sum(std::span<const Tensor> scalars, std::span<const double> weights);
Tensor reshape(const Tensor& x, Shape shape);

// Value-equal copy with no graph edge back to x.
Tensor detach(const Tensor& x);

// --- dense algebra ----------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[N,M] + bias[M] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// x[N,C,H,W] + v[N,C] broadcast over spatial positions.
Tensor add_channel_broadcast(const Tensor& x, const Tensor& v);

// --- convolution and pooling ------------------------------------------------

// Dense cross-correlation without bias. x[N,C,H,W], w[C',C,K,K], K odd.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);

// Depthwise convolution with an individual kernel per output element.
// x[N,C,H,W], kernels[N,C,H,W,K,K]; pad must be (K-1)/2, stride is 1.
Tensor depthwise_conv2d_dynamic(const Tensor& x, const Tensor& kernels, std::size_t pad);

enum class KernelNormalization { none, softmax_over_k2 };

// Same as depthwise_conv2d_dynamic with kernels[n,c,h,w,:] formed on the fly
// as spatial[n,:,h,w] * channel[n,c,:] (optionally softmax-normalized over
// the K*K taps). spatial[N,K*K,H,W], channel[N,C,K*K]. The per-position
// kernels are never materialized.
Tensor factorized_dynamic_depthwise(const Tensor& x, const Tensor& spatial, const Tensor& channel,
                                    KernelNormalization norm);

// Per-tap kernel used by factorized_dynamic_depthwise at one position.
std::vector<double> factorized_kernel_at(const Tensor& spatial, const Tensor& channel,
                                         KernelNormalization norm, std::size_t n, std::size_t c,
                                         std::size_t h, std::size_t w);

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);
// Non-overlapping window average, window == stride == k. Extents must divide.
Tensor avg_pool2d(const Tensor& x, std::size_t k);
// Max pooling with padding (padded cells never win).
Tensor max_pool2d(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad);

// --- normalization -------------------------------------------------------

struct BatchNormState {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::size_t channels);
};

// Per-channel standardization over batch (and spatial) axes. Accepts
// [N,C,H,W] or [N,C]. Train mode needs N >= 2 and updates running stats.
Tensor batch_norm(const Tensor& x, BatchNormState& bn, Mode mode);

}  // namespace dcsd
