#pragma once

// Declarative convolutional embedding networks: a JSON-serializable layer
// list (ModelSpec), a builder producing a trainable Model, and a closed-form
// parameter / multiply-accumulate profiler working on the spec alone.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dcsd/checkpoint.hpp"
#include "dcsd/dcsd_layer.hpp"
#include "dcsd/nn.hpp"

namespace dcsd {

enum class LayerType { conv, dcsd, bn, relu, avgpool, maxpool, gap, fc, bottleneck };

std::string layer_type_name(LayerType t);
LayerType parse_layer_type(const std::string& name);

// One descriptor. Fields are interpreted per type:
//   conv       in, out, k, stride, pad (bias-free)
//   dcsd       channels (= in = out), k; domains/cameras come from the spec
//   bn         channels
//   avgpool    k (window == stride)
//   maxpool    k, stride, pad
//   fc         in, out, bias
//   bottleneck in, mid, out, stride, inner (conv or dcsd for the 3x3)
//   relu, gap  no fields
struct LayerSpec {
  LayerType type = LayerType::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t mid = 0;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = false;
  LayerType inner = LayerType::conv;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad);
  static LayerSpec dcsd(std::size_t channels, std::size_t k = 3);
  static LayerSpec bn(std::size_t channels);
  static LayerSpec relu();
  static LayerSpec avgpool(std::size_t k);
  static LayerSpec maxpool(std::size_t k, std::size_t stride, std::size_t pad);
  static LayerSpec gap();
  static LayerSpec fc(std::size_t in, std::size_t out, bool bias);
  static LayerSpec bottleneck(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride, LayerType inner);
};

// Options shared by every DCSD layer of a model.
struct DcsdOptions {
  KernelNormalization kernel_normalization = KernelNormalization::none;
  bool use_sample = true;
  bool use_domain = true;
  bool use_camera = true;
  bool stop_gradient = true;
};

struct ModelSpec {
  std::string name = "model";
  std::array<std::size_t, 3> input_shape{3, 32, 16};  // C,H,W
  std::vector<LayerSpec> layers;
  std::size_t embedding_dim = 0;  // width of the flat body output
  std::size_t num_pids = 0;       // 0: no identity classifier
  bool bnneck = true;
  std::size_t num_domains = 1;
  std::size_t num_cameras = 1;  // global camera count
  DcsdOptions dcsd;
};

// Expands a bottleneck into its main path and its projection shortcut (empty
// for identity). A DCSD inner op has stride 1, so a strided block moves the
// stride to its first 1x1 conv.
struct BottleneckParts {
  std::vector<LayerSpec> main;
  std::vector<LayerSpec> shortcut;
};
BottleneckParts expand_bottleneck(const LayerSpec& b);

// Activation shape after every top-level layer. Flat activations are {D}.
// Throws SpecError naming the offending layer index when shapes do not compose.
std::vector<std::vector<std::size_t>> trace_shapes(const ModelSpec& spec);

std::size_t count_dcsd_layers(const ModelSpec& spec);

// Returns a copy with every 3x3 conv (top level and inside bottlenecks)
// replaced by a DCSD layer of equal width. Strided 3x3 convs are rejected.
ModelSpec to_dcsd_variant(const ModelSpec& spec);

// Default desk-scale network: stem conv 3->16 + bn + relu, then three stages
// [1x1 conv, 3x3 conv or DCSD, relu, bn] with widths 16/32/64 and 2x average
// pooling after the first two stages, GAP, 64-d embedding.
ModelSpec tinynet_spec(bool dcsd, std::size_t num_pids, std::size_t num_domains, std::size_t num_cameras,
                       std::array<std::size_t, 3> input_shape = {3, 32, 16});

// ResNet50 trunk + 1000-way fc head, without neck or identity classifier.
ModelSpec resnet50_spec(bool dcsd, std::array<std::size_t, 3> input_shape = {3, 256, 128});

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);
ModelSpec load_spec(const std::string& path);
void save_spec(const ModelSpec& spec, const std::string& path);

struct LayerProfile {
  std::size_t index = 0;
  LayerType type = LayerType::relu;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct ProfileReport {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;  // multiply-accumulates for a single image
  std::vector<LayerProfile> layers;
};

// Counts learnable parameters (BN running statistics excluded) and MACs of
// conv, fc and DCSD arithmetic; BN, activations and pooling count 0 MACs.
// Neck and classifier are included when present.
ProfileReport profile(const ModelSpec& spec);

// Closed-form parameter count of one DCSD layer.
std::uint64_t dcsd_param_count(std::size_t channels, std::size_t k, std::size_t domains, std::size_t cameras);

struct ModelOutput {
  Tensor embedding;                    // train: pre-neck; eval: post-neck
  Tensor logits;                       // train mode with a classifier only
  std::vector<Tensor> domain_logits;   // one per DCSD layer
  std::vector<Tensor> camera_logits;   // one per DCSD layer
  std::vector<DcsdForwardOutput> dcsd; // filled when kernel retention is on
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  ModelOutput forward(const Tensor& images, Mode mode);

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_dcsd() const;

  // Trainable tensors in construction order.
  std::vector<NamedTensor> parameters() const;
  // Parameters plus BN running statistics, as stored in checkpoints.
  std::vector<NamedTensor> state() const;
  // Strict: names, order and shapes must match; throws CheckpointError.
  void load_state(const std::vector<NamedTensor>& entries);

  void set_retain_kernels(bool on) { retain_kernels_ = on; }
  bool retain_kernels() const { return retain_kernels_; }

  struct Unit;

 private:
  ModelSpec spec_;
  std::vector<Unit> units_;
  std::shared_ptr<BatchNormState> neck_;
  Linear classifier_;
  bool retain_kernels_ = false;
};

// Writes `<path>` (checkpoint) and `<path>.json` (the spec) atomically.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace dcsd
