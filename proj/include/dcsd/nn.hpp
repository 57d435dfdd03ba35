#pragma once

// Small parameter-holding building blocks shared by the DCSD layer and the
// backbone. Weights of fully-connected layers are stored [in, out].

#include <string>
#include <vector>

#include "dcsd/checkpoint.hpp"
#include "dcsd/ops.hpp"
#include "dcsd/tensor.hpp"

namespace dcsd {

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when bias-free

  static Linear make(std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  Tensor forward(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

// fc2(relu(fc1(x)))
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp make(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

// Bias-free convolution weight [C_out, C_in, K, K] plus its geometry.
struct Conv {
  Tensor weight;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv make(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, stride, pad); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

void collect_batch_norm(const BatchNormState& bn, std::vector<NamedTensor>& out, const std::string& prefix);

}  // namespace dcsd
