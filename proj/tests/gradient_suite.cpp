#include "gradient_suite.hpp"

#include "dcsd/dcsd_layer.hpp"
#include "dcsd/losses.hpp"
#include "dcsd/ops.hpp"
#include "test_util.hpp"

namespace dcsd::testing {

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
// Builds one random instance: the inputs to perturb and the scalar function.
using Instance = std::pair<std::vector<Tensor>, Fn>;
using Factory = std::function<Instance(Rng&)>;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

std::vector<Label> pk(std::size_t p, std::size_t k) {
  std::vector<Label> v;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < k; ++j) v.push_back(static_cast<Label>(i));
  return v;
}

std::vector<std::pair<std::string, Factory>> cases() {
  std::vector<std::pair<std::string, Factory>> c;
  c.emplace_back("add", [](Rng& r) {
    Shape s{pick(r, 1, 4), pick(r, 1, 4)};
    return Instance{{random_tensor(s, r), random_tensor(s, r)},
                    [](const auto& in) { return probe_loss(add(in[0], in[1])); }};
  });
  c.emplace_back("mul", [](Rng& r) {
    Shape s{pick(r, 1, 4), pick(r, 1, 4)};
    return Instance{{random_tensor(s, r), random_tensor(s, r)},
                    [](const auto& in) { return probe_loss(mul(in[0], in[1])); }};
  });
  c.emplace_back("scale", [](Rng& r) {
    const double k = r.uniform(-3, 3);
    return Instance{{random_tensor({pick(r, 1, 6)}, r)}, [k](const auto& in) { return probe_loss(scale(in[0], k)); }};
  });
  c.emplace_back("relu", [](Rng& r) {
    return Instance{{random_tensor({pick(r, 2, 5), pick(r, 2, 5)}, r)},
                    [](const auto& in) { return probe_loss(relu(in[0])); }};
  });
  c.emplace_back("sum", [](Rng& r) {
    return Instance{{random_tensor({pick(r, 1, 5), 3}, r)}, [](const auto& in) { return sum(mul(in[0], in[0])); }};
  });
  c.emplace_back("mean", [](Rng& r) {
    return Instance{{random_tensor({pick(r, 1, 5), 2}, r)}, [](const auto& in) { return mean(mul(in[0], in[0])); }};
  });
  c.emplace_back("weighted_sum", [](Rng& r) {
    std::vector<Tensor> in;
    std::vector<double> w;
    const std::size_t n = pick(r, 1, 5);
    for (std::size_t i = 0; i < n; ++i) in.push_back(random_tensor({1}, r)), w.push_back(r.uniform(-2, 2));
    return Instance{in, [w](const auto& v) {
                      std::vector<Tensor> sq;
                      for (const auto& t : v) sq.push_back(mul(t, t));
                      return weighted_sum(sq, w);
                    }};
  });
  c.emplace_back("reshape", [](Rng& r) {
    const std::size_t a = pick(r, 1, 4), b = pick(r, 1, 4);
    return Instance{{random_tensor({a, b}, r)}, [a, b](const auto& in) {
                      return probe_loss(mul(reshape(in[0], {b, a}), reshape(in[0], {b, a})));
                    }};
  });
  c.emplace_back("matmul", [](Rng& r) {
    const std::size_t m = pick(r, 1, 5), k = pick(r, 1, 5), n = pick(r, 1, 5);
    return Instance{{random_tensor({m, k}, r), random_tensor({k, n}, r)},
                    [](const auto& in) { return probe_loss(matmul(in[0], in[1])); }};
  });
  c.emplace_back("add_row_bias", [](Rng& r) {
    const std::size_t m = pick(r, 1, 5), n = pick(r, 1, 5);
    return Instance{{random_tensor({m, n}, r), random_tensor({n}, r)},
                    [](const auto& in) { return probe_loss(add_row_bias(in[0], in[1])); }};
  });
  c.emplace_back("add_channel_broadcast", [](Rng& r) {
    const std::size_t n = pick(r, 1, 3), ch = pick(r, 1, 4);
    return Instance{{random_tensor({n, ch, pick(r, 1, 4), pick(r, 1, 4)}, r), random_tensor({n, ch}, r)},
                    [](const auto& in) { return probe_loss(add_channel_broadcast(in[0], in[1])); }};
  });
  c.emplace_back("conv2d", [](Rng& r) {
    const std::size_t k = r.index(2) ? 3 : 1, stride = pick(r, 1, 2), pad = r.index(2);
    const std::size_t ci = pick(r, 1, 3);
    return Instance{{random_tensor({pick(r, 1, 2), ci, pick(r, 3, 6), pick(r, 3, 6)}, r),
                     random_tensor({pick(r, 1, 3), ci, k, k}, r)},
                    [stride, pad](const auto& in) { return probe_loss(conv2d(in[0], in[1], stride, pad)); }};
  });
  c.emplace_back("depthwise_conv2d_dynamic", [](Rng& r) {
    const std::size_t n = pick(r, 1, 2), ch = pick(r, 1, 3), h = pick(r, 1, 4), w = pick(r, 1, 4);
    return Instance{{random_tensor({n, ch, h, w}, r), random_tensor({n, ch, h, w, 3, 3}, r)},
                    [](const auto& in) { return probe_loss(depthwise_conv2d_dynamic(in[0], in[1], 1)); }};
  });
  for (auto norm : {KernelNormalization::none, KernelNormalization::softmax_over_k2}) {
    const std::string name = norm == KernelNormalization::none ? "factorized_depthwise" : "factorized_depthwise_softmax";
    c.emplace_back(name, [norm](Rng& r) {
      const std::size_t n = pick(r, 1, 2), ch = pick(r, 1, 3), h = pick(r, 1, 4), w = pick(r, 1, 4);
      return Instance{{random_tensor({n, ch, h, w}, r), random_tensor({n, 9, h, w}, r), random_tensor({n, ch, 9}, r)},
                      [norm](const auto& in) {
                        return probe_loss(factorized_dynamic_depthwise(in[0], in[1], in[2], norm));
                      }};
    });
  }
  c.emplace_back("global_avg_pool", [](Rng& r) {
    return Instance{{random_tensor({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)}, r)},
                    [](const auto& in) { return probe_loss(global_avg_pool(in[0])); }};
  });
  c.emplace_back("avg_pool2d", [](Rng& r) {
    return Instance{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), 2 * pick(r, 1, 3), 2 * pick(r, 1, 3)}, r)},
                    [](const auto& in) { return probe_loss(avg_pool2d(in[0], 2)); }};
  });
  c.emplace_back("max_pool2d", [](Rng& r) {
    return Instance{{random_tensor({pick(r, 1, 2), pick(r, 1, 2), pick(r, 3, 6), pick(r, 3, 6)}, r)},
                    [](const auto& in) { return probe_loss(max_pool2d(in[0], 3, 2, 1)); }};
  });
  for (Mode mode : {Mode::train, Mode::eval}) {
    c.emplace_back(mode == Mode::train ? "batch_norm_train" : "batch_norm_eval", [mode](Rng& r) {
      const std::size_t ch = pick(r, 1, 3);
      const bool spatial = r.index(2) == 1;
      Shape s = spatial ? Shape{pick(r, 2, 3), ch, pick(r, 1, 3), pick(r, 1, 3)} : Shape{pick(r, 2, 5), ch};
      auto bn = std::make_shared<BatchNormState>(BatchNormState::make(ch));
      for (double& v : bn->running_mean) v = r.uniform(-1, 1);
      for (double& v : bn->running_var) v = r.uniform(0.5, 2);
      Tensor gamma = random_tensor({ch}, r), beta = random_tensor({ch}, r);
      return Instance{{random_tensor(s, r, -2, 2), gamma, beta}, [bn, mode](const auto& in) {
                        bn->gamma = in[1];
                        bn->beta = in[2];
                        return probe_loss(batch_norm(in[0], *bn, mode));
                      }};
    });
  }
  c.emplace_back("triplet_batch_hard", [](Rng& r) {
    const std::size_t p = pick(r, 2, 4), k = pick(r, 2, 3);
    const auto pids = pk(p, k);
    return Instance{{random_tensor({p * k, pick(r, 1, 4)}, r)},
                    [pids](const auto& in) { return triplet_batch_hard(in[0], pids, 0.3); }};
  });
  for (double smoothing : {0.0, 0.1}) {
    c.emplace_back(smoothing == 0.0 ? "cross_entropy" : "cross_entropy_smoothed", [smoothing](Rng& r) {
      const std::size_t n = pick(r, 1, 5), m = pick(r, 2, 6);
      std::vector<Label> y(n);
      for (auto& v : y) v = static_cast<Label>(r.index(m));
      return Instance{{random_tensor({n, m}, r, -3, 3)},
                      [y, smoothing](const auto& in) { return cross_entropy(in[0], y, smoothing); }};
    });
  }
  c.emplace_back("total_loss", [](Rng& r) {
    const std::size_t b = pick(r, 1, 4);
    std::vector<Tensor> in;
    for (std::size_t i = 0; i < 2 + 2 * b; ++i) in.push_back(random_tensor({1}, r, 0, 2));
    return Instance{in, [b](const auto& v) {
                      LossParts p;
                      p.l_tri = mul(v[0], v[0]);
                      p.l_ce_sample = mul(v[1], v[1]);
                      for (std::size_t i = 0; i < b; ++i) {
                        p.l_ce_domain_per_module.push_back(mul(v[2 + i], v[2 + i]));
                        p.l_ce_camera_per_module.push_back(mul(v[2 + b + i], v[2 + b + i]));
                      }
                      return total_loss(p);
                    }};
  });
  // Whole layer, all parameters and the input. The detach edges are a
  // deliberate gradient cut, so the layer is checked with them bypassed.
  for (auto norm : {KernelNormalization::none, KernelNormalization::softmax_over_k2}) {
    const std::string name = norm == KernelNormalization::none ? "dcsd_layer" : "dcsd_layer_softmax";
    c.emplace_back(name, [norm](Rng& r) {
      DcsdConfig cfg;
      cfg.channels = 4;
      cfg.num_domains = 2;
      cfg.num_global_cameras = 3;
      cfg.kernel_normalization = norm;
      cfg.stop_gradient = false;
      auto layer = std::make_shared<DcsdLayer>(cfg, r);
      std::vector<NamedTensor> named;
      layer->collect(named, "l");
      std::vector<Tensor> in{random_tensor({pick(r, 1, 2), 4, pick(r, 2, 4), pick(r, 2, 4)}, r)};
      for (auto& nt : named) in.push_back(nt.tensor);
      return Instance{in, [layer](const auto& v) {
                        const auto out = layer->forward(v[0]);
                        const std::vector<Tensor> parts{probe_loss(out.feature, 1), probe_loss(out.domain_logits, 2),
                                                        probe_loss(out.camera_logits, 3)};
                        const std::vector<double> w{1.0, 1.0, 1.0};
                        return weighted_sum(parts, w);
                      }};
    });
  }
  return c;
}

}  // namespace

std::vector<GradCaseResult> run_gradient_suite(int instances, std::uint64_t seed) {
  std::vector<GradCaseResult> results;
  Rng rng(seed);
  for (const auto& [name, factory] : cases()) {
    GradCaseResult res{name, 0, 0.0};
    for (int i = 0; i < instances; ++i) {
      auto [inputs, fn] = factory(rng);
      res.worst_rel_error = std::max(res.worst_rel_error, gradcheck(fn, inputs));
      ++res.instances;
    }
    results.push_back(res);
  }
  return results;
}

}  // namespace dcsd::testing
