#pragma once

#include <cstddef>
#include <vector>

#include "dcsd/tensor.hpp"

namespace dcsd {

struct AdamConfig {
  double lr = 3.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed, ordered parameter list. Parameters without an
// accumulated grad are treated as having a zero gradient.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Step schedule: initial lr divided by `factor` at each listed epoch.
struct StepSchedule {
  double initial = 3.5e-4;
  std::vector<std::size_t> decay_epochs{15, 25};
  double factor = 10.0;

  double lr_at(std::size_t epoch) const;
};

}  // namespace dcsd
