#include "dcsd/dcsd_layer.hpp"

#include <iomanip>
#include <ostream>

#include "dcsd/error.hpp"

namespace dcsd {

void DcsdConfig::validate() const {
  if (kernel_size % 2 == 0) throw ConfigError("dcsd: kernel_size must be odd");
  if (channels < 4 || channels % 4 != 0) throw ConfigError("dcsd: channels must be a positive multiple of 4");
  if (num_domains < 1 || num_global_cameras < 1)
    throw ConfigError("dcsd: num_domains and num_global_cameras must be >= 1");
  if (!use_sample && !use_domain && !use_camera)
    throw ConfigError("dcsd: at least one of sample/domain/camera factors must be enabled");
}

DcsdLayer::DcsdLayer(DcsdConfig config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t c = config_.channels, h = config_.hidden(), kk = config_.taps();
  mlp_domain = Mlp::make(c, h, c, rng);
  mlp_camera = Mlp::make(c, h, c, rng);
  head_domain = Linear::make(c, config_.num_domains, true, rng);
  head_camera = Linear::make(c, config_.num_global_cameras, true, rng);
  spatial_branch = Conv::make(c, kk, 1, 1, 0, rng);
  channel_branch = Mlp::make(c, h, kk * c, rng);
}

DcsdForwardOutput DcsdLayer::forward(const Tensor& x, const BranchOverride* override_branches) const {
  if (x.rank() != 4 || x.dim(1) != config_.channels)
    throw ShapeError("dcsd: expected [N," + std::to_string(config_.channels) + ",H,W] input, got " +
                     shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = config_.channels, kk = config_.taps();

  Tensor pooled = global_avg_pool(x);
  Tensor domain = mlp_domain.forward(pooled);
  Tensor camera = mlp_camera.forward(pooled);

  DcsdForwardOutput out;
  out.normalization = config_.kernel_normalization;
  out.domain_logits = head_domain.forward(domain);
  out.camera_logits = head_camera.forward(camera);

  const Tensor d = config_.stop_gradient ? detach(domain) : domain;
  const Tensor cam = config_.stop_gradient ? detach(camera) : camera;

  Tensor fused_map = config_.use_sample ? x : Tensor::zeros(x.shape());
  Tensor fused_vec = config_.use_sample ? pooled : Tensor::zeros({n, c});
  if (config_.use_domain) {
    fused_map = add_channel_broadcast(fused_map, d);
    fused_vec = add(fused_vec, d);
  }
  if (config_.use_camera) {
    fused_map = add_channel_broadcast(fused_map, cam);
    fused_vec = add(fused_vec, cam);
  }

  out.generated_kernels_spatial = spatial_branch.forward(fused_map);
  out.generated_kernels_channel = reshape(channel_branch.forward(fused_vec), {n, c, kk});
  if (override_branches) {
    if (override_branches->spatial) out.generated_kernels_spatial = *override_branches->spatial;
    if (override_branches->channel) out.generated_kernels_channel = *override_branches->channel;
  }
  out.feature = factorized_dynamic_depthwise(x, out.generated_kernels_spatial, out.generated_kernels_channel,
                                             config_.kernel_normalization);
  return out;
}

void DcsdLayer::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  mlp_domain.collect(out, prefix + ".mlp_domain");
  mlp_camera.collect(out, prefix + ".mlp_camera");
  head_domain.collect(out, prefix + ".head_domain");
  head_camera.collect(out, prefix + ".head_camera");
  spatial_branch.collect(out, prefix + ".spatial_branch");
  channel_branch.collect(out, prefix + ".channel_branch");
}

std::vector<Tensor> DcsdLayer::predictor_parameters() const {
  std::vector<NamedTensor> named;
  mlp_domain.collect(named, "d");
  mlp_camera.collect(named, "c");
  std::vector<Tensor> params;
  for (auto& nt : named) params.push_back(nt.tensor);
  return params;
}

std::size_t DcsdLayer::parameter_count() const {
  std::vector<NamedTensor> named;
  collect(named, "");
  std::size_t total = 0;
  for (const auto& nt : named) total += nt.tensor.numel();
  return total;
}

std::vector<double> dcsd_kernel_at(const DcsdForwardOutput& out, std::size_t n, std::size_t c, std::size_t h,
                                   std::size_t w) {
  return factorized_kernel_at(out.generated_kernels_spatial, out.generated_kernels_channel, out.normalization, n,
                              c, h, w);
}

std::vector<KernelExportRow> kernel_rows(std::size_t module, const DcsdForwardOutput& out,
                                         std::span<const std::size_t> sample_ids,
                                         std::span<const std::int64_t> domains,
                                         std::span<const std::int64_t> global_cameras) {
  const Tensor& t = out.generated_kernels_channel;
  if (!t.defined()) throw StateError("kernel export: no generated kernels retained");
  const std::size_t n = t.dim(0), per_sample = t.dim(1) * t.dim(2);
  if (sample_ids.size() != n || domains.size() != n || global_cameras.size() != n)
    throw ShapeError("kernel export: label arrays do not match batch size " + std::to_string(n));
  std::vector<KernelExportRow> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    KernelExportRow r;
    r.module = module;
    r.sample = sample_ids[i];
    r.domain = domains[i];
    r.global_camera = global_cameras[i];
    r.values.assign(t.data().begin() + i * per_sample, t.data().begin() + (i + 1) * per_sample);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_kernel_csv(std::ostream& os, std::span<const KernelExportRow> rows) {
  const std::size_t width = rows.empty() ? 0 : rows.front().values.size();
  os << "module,sample,domain,global_camera";
  for (std::size_t k = 0; k < width; ++k) os << ",k" << k;
  os << '\n';
  const auto old_precision = os.precision(17);
  for (const auto& r : rows) {
    if (r.values.size() != width) throw ShapeError("kernel export: rows have different widths");
    os << r.module << ',' << r.sample << ',' << r.domain << ',' << r.global_camera;
    for (double v : r.values) os << ',' << v;
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace dcsd
