#include "dcsd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dcsd/error.hpp"

namespace dcsd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (std::size_t e : shape)
    if (e == 0) throw ShapeError("tensor extent must be >= 1, got " + shape_str(shape));
}

std::pair<double, double> fans(const Shape& shape) {
  if (shape.size() == 4) {
    const double receptive = static_cast<double>(shape[2] * shape[3]);
    return {static_cast<double>(shape[1]) * receptive, static_cast<double>(shape[0]) * receptive};
  }
  if (shape.size() == 2) return {static_cast<double>(shape[0]), static_cast<double>(shape[1])};
  const double n = static_cast<double>(numel(shape));
  return {n, n};
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) {
  check_extents(shape);
  impl_ = std::make_shared<TensorImpl>();
  impl_->data.assign(dcsd::numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_extents(shape);
  if (dcsd::numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::vector<double>& Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor tensor_new(Shape shape, const Init& init, Rng* rng) {
  Tensor t(std::move(shape), 0.0);
  auto out = t.mutable_data();
  const bool seeded = init.kind == Init::Kind::normal || init.kind == Init::Kind::he_fan_in ||
                      init.kind == Init::Kind::xavier;
  if (seeded && rng == nullptr) throw ConfigError("seeded initialization requires an Rng");
  switch (init.kind) {
    case Init::Kind::zeros:
      break;
    case Init::Kind::constant:
      for (double& v : out) v = init.a;
      break;
    case Init::Kind::normal:
      if (init.b < 0.0) throw ConfigError("normal init stddev must be >= 0");
      for (double& v : out) v = init.b == 0.0 ? init.a : rng->normal(init.a, init.b);
      break;
    case Init::Kind::he_fan_in: {
      const double stddev = std::sqrt(2.0 / fans(t.shape()).first);
      for (double& v : out) v = rng->normal(0.0, stddev);
      break;
    }
    case Init::Kind::xavier: {
      const auto [fan_in, fan_out] = fans(t.shape());
      const double r = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& v : out) v = rng->uniform(-r, r);
      break;
    }
  }
  return t;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_mode_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::vector<Tensor> topological_order(const Tensor& root) {
  std::vector<Tensor> order;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS; children are visited in input order so the
  // resulting order is a pure function of the graph.
  struct Frame {
    Tensor t;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root.impl());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& node = top.t.node();
    if (node && top.next < node->inputs.size()) {
      const Tensor& child = node->inputs[top.next++];
      if (child.requires_grad() && visited.insert(child.impl()).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(top.t);
    stack.pop_back();
  }
  return order;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw StateError("loss is not connected to any tensor requiring grad");
  std::vector<Tensor> order = topological_order(loss);
  for (Tensor& t : order)
    if (!t.is_leaf()) t.zero_grad();
  Tensor root = loss;
  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor& t = *it;
    if (t.is_leaf() || !t.has_grad()) continue;
    const std::vector<double>& g = t.impl()->grad;
    t.node()->backward(std::span<const double>(g));
  }
}

}  // namespace dcsd
