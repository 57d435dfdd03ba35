#pragma once

// Domain-camera-sample dynamic depthwise convolution.
//
//   pooled      = GAP(x)
//   domain      = mlp_domain(pooled)        -> head_domain -> domain logits
//   camera      = mlp_camera(pooled)        -> head_camera -> camera logits
//   d, c        = detach(domain), detach(camera)
//   x'          = x + d + c    (per-channel broadcast over H,W)
//   v           = pooled + d + c
//   S           = spatial_branch(x')         [N, K*K, H, W]   (1x1 conv)
//   T           = channel_branch(v)          [N, C, K*K]      (two FC layers)
//   kernel(n,c,h,w) = S[n,:,h,w] * T[n,c,:]
//   feature     = depthwise(x, kernel), same padding, stride 1
//
// The predictors therefore only learn from the domain/camera labels; the
// kernel generator sees their values but sends no gradient back into them.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcsd/nn.hpp"
#include "dcsd/ops.hpp"

namespace dcsd {

struct DcsdConfig {
  std::size_t channels = 16;
  std::size_t kernel_size = 3;
  std::size_t num_domains = 1;
  std::size_t num_global_cameras = 1;
  KernelNormalization kernel_normalization = KernelNormalization::none;
  // Which factors feed the kernel generator.
  bool use_sample = true;
  bool use_domain = true;
  bool use_camera = true;
  // When false the predictor outputs enter the generator without detach.
  bool stop_gradient = true;

  std::size_t hidden() const { return channels / 4; }
  std::size_t taps() const { return kernel_size * kernel_size; }
  // Throws ConfigError on an invalid combination.
  void validate() const;
};

struct DcsdForwardOutput {
  Tensor feature;                    // [N,C,H,W]
  Tensor domain_logits;              // [N,num_domains]
  Tensor camera_logits;              // [N,num_global_cameras]
  Tensor generated_kernels_channel;  // [N,C,K*K]
  Tensor generated_kernels_spatial;  // [N,K*K,H,W]
  KernelNormalization normalization = KernelNormalization::none;
};

// Test hook: replaces the generator outputs before they are combined.
struct BranchOverride {
  std::optional<Tensor> spatial;
  std::optional<Tensor> channel;
};

class DcsdLayer {
 public:
  DcsdLayer(DcsdConfig config, Rng& rng);

  DcsdForwardOutput forward(const Tensor& x, const BranchOverride* override_branches = nullptr) const;

  const DcsdConfig& config() const { return config_; }
  DcsdConfig& mutable_config() { return config_; }

  Mlp mlp_domain;
  Mlp mlp_camera;
  Linear head_domain;
  Linear head_camera;
  Conv spatial_branch;  // C -> K*K, 1x1, bias-free
  Mlp channel_branch;   // C -> C/4 -> K*K*C

  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
  // Parameters of the two predictor MLPs only.
  std::vector<Tensor> predictor_parameters() const;
  std::size_t parameter_count() const;

 private:
  DcsdConfig config_;
};

// K*K kernel applied at (n,c,h,w); throws IndexError when out of range.
std::vector<double> dcsd_kernel_at(const DcsdForwardOutput& out, std::size_t n, std::size_t c, std::size_t h,
                                   std::size_t w);

struct KernelExportRow {
  std::size_t module = 0;
  std::size_t sample = 0;
  std::int64_t domain = 0;
  std::int64_t global_camera = 0;
  std::vector<double> values;  // flattened [C, K*K] channel-branch kernel
};

// One row per sample of a module's channel-branch kernels.
std::vector<KernelExportRow> kernel_rows(std::size_t module, const DcsdForwardOutput& out,
                                         std::span<const std::size_t> sample_ids,
                                         std::span<const std::int64_t> domains,
                                         std::span<const std::int64_t> global_cameras);

// CSV with header module,sample,domain,global_camera,k0..k{n-1}; values
// printed with 17 significant digits.
void write_kernel_csv(std::ostream& os, std::span<const KernelExportRow> rows);

}  // namespace dcsd
