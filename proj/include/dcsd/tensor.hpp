#pragma once

// Dense double-precision tensor with a reverse-mode autodiff tape.
//
// A Tensor is a shared handle onto TensorImpl. Differentiable operations
// (see ops.hpp) attach a Node to their result recording the inputs and a
// closure that scatters the output gradient back into those inputs.
// backward() walks the graph reachable from a scalar loss in reverse
// topological order. Layout is row-major; image-like data is N,C,H,W.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dcsd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  // Receives d(loss)/d(output) and accumulates into the inputs' grads.
  std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

// Engine-wide pseudo-random stream. All seeded initialization and sampling
// draws from one of these in a fixed order, so a seed fixes every value.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen_);
  }
  std::uint64_t next() { return gen_(); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

struct Init {
  enum class Kind { zeros, constant, normal, he_fan_in, xavier };
  Kind kind = Kind::zeros;
  double a = 0.0;  // constant value, or normal mean
  double b = 0.0;  // normal stddev

  static Init zeros() { return {Kind::zeros, 0.0, 0.0}; }
  static Init constant(double v) { return {Kind::constant, v, 0.0}; }
  static Init normal(double mean, double stddev) { return {Kind::normal, mean, stddev}; }
  // N(0, 2/fan_in). fan_in is C*K*K for [C',C,K,K] and rows for [in,out].
  static Init he_fan_in() { return {Kind::he_fan_in, 0.0, 0.0}; }
  // U(-r, r), r = sqrt(6/(fan_in+fan_out)).
  static Init xavier() { return {Kind::xavier, 0.0, 0.0}; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor constant(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Writable view for optimizers, loaders and initializers. Mutating a
  // tensor that is part of a live graph invalidates that graph.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient, or zeros of the right size when nothing has accumulated yet.
  std::vector<double> grad() const;
  // Accumulator, allocated (zero-filled) on first use.
  std::vector<double>& grad_buffer() const;
  void zero_grad() { impl_->grad.clear(); }

  const std::shared_ptr<Node>& node() const { return impl_->node; }
  void set_node(std::shared_ptr<Node> node) { impl_->node = std::move(node); }
  bool is_leaf() const { return !impl_->node; }

  TensorImpl* impl() const { return impl_.get(); }
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Creates a tensor under one of the initialization rules. Seeded rules draw
// from rng; deterministic rules ignore it.
Tensor tensor_new(Shape shape, const Init& init, Rng* rng = nullptr);

// While a NoGradGuard is alive on this thread, ops record no graph.
bool grad_mode_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across calls;
// grads of interior nodes are reset at the start of each sweep.
void backward(const Tensor& loss);

// Topologically ordered nodes reachable from root (inputs before outputs).
std::vector<Tensor> topological_order(const Tensor& root);

}  // namespace dcsd
