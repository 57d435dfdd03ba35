#pragma once

#include <cstdint>
#include <vector>

#include "dcsd/tensor.hpp"

namespace dcsd {

using Label = std::int64_t;

// Hardest positive / negative per anchor under Euclidean distance.
struct TripletMining {
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
  std::vector<double> d_pos;
  std::vector<double> d_neg;
};

// features is [N,D] row-major. Ties resolve to the lowest index.
TripletMining mine_batch_hard(const Tensor& features, const std::vector<Label>& pids);

// mean_i [ D(x_i, x_i^p) - D(x_i, x_i^n) + margin ]_+ with x_i^p the farthest
// same-pid sample and x_i^n the closest other-pid sample.
Tensor triplet_batch_hard(const Tensor& features, const std::vector<Label>& pids, double margin = 0.3);

// -(1/N) sum_i log softmax(logits)[i, y_i]. With smoothing > 0 the target
// puts (1 - smoothing) + smoothing/M on y_i and smoothing/M elsewhere.
Tensor cross_entropy(const Tensor& logits, const std::vector<Label>& labels, double smoothing = 0.0);

struct LossParts {
  Tensor l_tri;
  Tensor l_ce_sample;
  std::vector<Tensor> l_ce_domain_per_module;
  std::vector<Tensor> l_ce_camera_per_module;
  double margin = 0.3;
};

// L_tri + L_ce_sample + (1/B) sum L_ce_domain + (1/B) sum L_ce_camera.
// Requires B >= 1 and equally long per-module lists.
Tensor total_loss(const LossParts& parts);

// Only the B-averaged domain and camera terms of total_loss, built with the
// same weights so gradients reaching the predictors are comparable.
Tensor auxiliary_loss(const LossParts& parts);

// L_tri + L_ce_sample; the objective of a network with no dynamic modules.
Tensor reid_loss(const LossParts& parts);

}  // namespace dcsd
