#include "dcsd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "dcsd/error.hpp"
#include "dcsd/ops.hpp"

namespace dcsd {

namespace {

constexpr double kMinSquaredDistance = 1e-12;

void check_features(const Tensor& features, const std::vector<Label>& pids) {
  if (!features.defined() || features.rank() != 2)
    throw ShapeError("triplet: features must be [N,D]");
  if (pids.empty() || pids.size() != features.dim(0))
    throw ShapeError("triplet: batch has " + std::to_string(features.dim(0)) + " rows but " +
                     std::to_string(pids.size()) + " labels");
}

double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

}  // namespace

TripletMining mine_batch_hard(const Tensor& features, const std::vector<Label>& pids) {
  check_features(features, pids);
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::map<Label, std::size_t> counts;
  for (Label p : pids) ++counts[p];
  for (const auto& [pid, count] : counts)
    if (count < 2) throw MiningError("triplet: pid " + std::to_string(pid) + " has a single sample in the batch");
  if (counts.size() < 2) throw MiningError("triplet: batch contains a single pid, no negatives");

  const double* f = features.data().data();
  TripletMining m;
  m.positive.resize(n);
  m.negative.resize(n);
  m.d_pos.resize(n);
  m.d_neg.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best_pos = -1.0, best_neg = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dist = std::sqrt(std::max(squared_distance(f + i * d, f + j * d, d), kMinSquaredDistance));
      if (pids[j] == pids[i]) {
        if (dist > best_pos) {
          best_pos = dist;
          m.positive[i] = j;
        }
      } else if (dist < best_neg) {
        best_neg = dist;
        m.negative[i] = j;
      }
    }
    m.d_pos[i] = best_pos;
    m.d_neg[i] = best_neg;
  }
  return m;
}

Tensor triplet_batch_hard(const Tensor& features, const std::vector<Label>& pids, double margin) {
  const TripletMining m = mine_batch_hard(features, pids);
  const std::size_t n = features.dim(0);
  double total = 0.0;
  std::vector<bool> active(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double h = m.d_pos[i] - m.d_neg[i] + margin;
    active[i] = h > 0.0;
    if (active[i]) total += h;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (!features.requires_grad()) return out;

  auto node = std::make_shared<Node>();
  node->op = "triplet_batch_hard";
  node->inputs = {features};
  node->backward = [features, m, active, n](std::span<const double> g) {
    const std::size_t d = features.dim(1);
    const double* f = features.data().data();
    auto& gf = features.grad_buffer();
    const double coef = g[0] / static_cast<double>(n);
    // d/d f_i of ||f_i - f_j|| is (f_i - f_j)/||f_i - f_j||; zero when clamped.
    auto scatter = [&](std::size_t i, std::size_t j, double dist, double sign) {
      if (dist * dist <= kMinSquaredDistance) return;
      for (std::size_t k = 0; k < d; ++k) {
        const double u = sign * coef * (f[i * d + k] - f[j * d + k]) / dist;
        gf[i * d + k] += u;
        gf[j * d + k] -= u;
      }
    };
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      scatter(i, m.positive[i], m.d_pos[i], 1.0);
      scatter(i, m.negative[i], m.d_neg[i], -1.0);
    }
  };
  out.set_requires_grad(true);
  out.set_node(std::move(node));
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<Label>& labels, double smoothing) {
  if (!logits.defined() || logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N,M]");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) + " labels");
  for (Label y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= m)
      throw LabelError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(m) + ")");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("cross_entropy: smoothing must be in [0,1)");

  std::vector<double> prob(n * m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * m;
    const std::size_t top = static_cast<std::size_t>(std::max_element(z, z + m) - z);
    const double mx = z[top];
    // log sum_j exp(z_j - mx) = log1p(sum over j != top), exact-ish when one
    // logit dominates.
    double rest = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != top) rest += std::exp(z[j] - mx);
    const double log_se = std::log1p(rest);
    double row = (log_se - (z[labels[i]] - mx)) * (1.0 - smoothing);
    if (smoothing > 0.0) {
      double all = 0.0;
      for (std::size_t j = 0; j < m; ++j) all += (z[j] - mx) - log_se;
      row -= smoothing / static_cast<double>(m) * all;
    }
    total += row;
    for (std::size_t j = 0; j < m; ++j) prob[i * m + j] = std::exp((z[j] - mx) - log_se);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (!logits.requires_grad()) return out;

  auto node = std::make_shared<Node>();
  node->op = "cross_entropy";
  node->inputs = {logits};
  node->backward = [logits, labels, prob = std::move(prob), n, m, smoothing](std::span<const double> g) {
    auto& gl = logits.grad_buffer();
    const double coef = g[0] / static_cast<double>(n);
    const double off = smoothing / static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double target = (static_cast<Label>(j) == labels[i] ? 1.0 - smoothing : 0.0) + off;
        gl[i * m + j] += coef * (prob[i * m + j] - target);
      }
  };
  out.set_requires_grad(true);
  out.set_node(std::move(node));
  return out;
}

namespace {

void check_modules(const LossParts& parts) {
  const std::size_t b = parts.l_ce_domain_per_module.size();
  if (b == 0) throw ShapeError("total_loss: per-module lists are empty (B must be >= 1)");
  if (parts.l_ce_camera_per_module.size() != b)
    throw ShapeError("total_loss: domain and camera lists differ in length");
}

}  // namespace

Tensor total_loss(const LossParts& parts) {
  check_modules(parts);
  const std::size_t b = parts.l_ce_domain_per_module.size();
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<Tensor> terms{parts.l_tri, parts.l_ce_sample};
  std::vector<double> weights{1.0, 1.0};
  for (const Tensor& t : parts.l_ce_domain_per_module) terms.push_back(t), weights.push_back(inv_b);
  for (const Tensor& t : parts.l_ce_camera_per_module) terms.push_back(t), weights.push_back(inv_b);
  return weighted_sum(terms, weights);
}

Tensor auxiliary_loss(const LossParts& parts) {
  check_modules(parts);
  const std::size_t b = parts.l_ce_domain_per_module.size();
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<Tensor> terms;
  for (const Tensor& t : parts.l_ce_domain_per_module) terms.push_back(t);
  for (const Tensor& t : parts.l_ce_camera_per_module) terms.push_back(t);
  const std::vector<double> weights(terms.size(), inv_b);
  return weighted_sum(terms, weights);
}

Tensor reid_loss(const LossParts& parts) {
  const std::vector<Tensor> terms{parts.l_tri, parts.l_ce_sample};
  const std::vector<double> weights{1.0, 1.0};
  return weighted_sum(terms, weights);
}

}  // namespace dcsd
