#include "dcsd/nn.hpp"

namespace dcsd {

Linear Linear::make(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  Linear l;
  l.weight = tensor_new({in, out}, Init::xavier(), &rng).set_requires_grad(true);
  if (with_bias) l.bias = Tensor::zeros({out}).set_requires_grad(true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row_bias(y, bias) : y;
}

void Linear::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Mlp Mlp::make(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  Mlp m;
  m.fc1 = Linear::make(in, hidden, true, rng);
  m.fc2 = Linear::make(hidden, out, true, rng);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }

void Mlp::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

Conv Conv::make(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad, Rng& rng) {
  Conv c;
  c.weight = tensor_new({out, in, k, k}, Init::he_fan_in(), &rng).set_requires_grad(true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

void Conv::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
}

void collect_batch_norm(const BatchNormState& bn, std::vector<NamedTensor>& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", bn.gamma});
  out.push_back({prefix + ".beta", bn.beta});
}

}  // namespace dcsd
