#pragma once

// Training, evaluation and experiment drivers behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dcsd/backbone.hpp"
#include "dcsd/datagen.hpp"
#include "dcsd/optim.hpp"
#include "dcsd/retrieval.hpp"

namespace dcsd {

enum class Variant { static_conv, dcsd };

struct RunConfig {
  std::uint64_t seed = 1;
  Variant variant = Variant::dcsd;
  bool use_sample = true;
  bool use_domain = true;
  bool use_camera = true;
  bool stop_gradient = true;
  // raw products train poorly at desk scale; "none" stays selectable
  KernelNormalization kernel_normalization = KernelNormalization::softmax_over_k2;
  std::size_t epochs = 30;
  StepSchedule schedule{3.5e-4, {15, 25}, 10.0};
  double margin = 0.3;
  double label_smoothing = 0.0;
  std::size_t batch_p = 16;
  std::size_t batch_k = 4;
  // 0: ceil(train images / (P*K))
  std::size_t iterations_per_epoch = 0;
  bool balance_domains = false;
  SynthOptions image;
  BlobFormat blob_format = BlobFormat::tensor;
  std::vector<DomainSpec> domains;
  std::string out;  // output directory; the --out flag overrides it
  // experiment extras
  bool ablation = true;
  std::size_t export_per_domain = 20;

  void validate() const;  // throws ConfigError
};

// Three-domain corpus at conflict 0.8 with the desk-scale schedule.
RunConfig default_run_config();

RunConfig config_from_json(const std::string& text);
std::string config_to_json(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);

// Hex FNV-1a 64 of the text.
std::string fnv1a_hex(const std::string& text);

// TinyNet for the corpus: classifier over the train pids, DCSD sized to the
// corpus' domains and global cameras.
ModelSpec model_spec_for(const RunConfig& config, const Corpus& corpus);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t iterations = 0;
  double loss = 0.0;
  double triplet = 0.0;
  double ce = 0.0;
  double domain_ce = 0.0;  // per-module average; only with DCSD layers
  double camera_ce = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  bool has_aux = false;
};

// Minimizes triplet + identity CE (+ B-averaged domain/camera CE when the
// model has DCSD layers) over PK batches from the corpus' train split.
TrainResult train(const RunConfig& config, const Corpus& corpus);

std::string train_log_csv(const TrainResult& result);

struct DomainReport {
  std::int64_t domain = 0;
  RetrievalReport report;
};

// One report per domain on that domain's query/gallery split. cross_camera is
// forced off for single-camera domains unless overridden.
std::vector<DomainReport> evaluate_domains(Model& model, const Corpus& corpus, std::optional<bool> cross_camera = {});

// Eval-mode forward with kernel retention over `per_domain` test images per
// domain (query then gallery order). Throws VariantError for static models and
// IndexError for a module index >= B.
std::vector<KernelExportRow> export_kernels(Model& model, const Corpus& corpus, std::size_t module,
                                            std::size_t per_domain);

struct Separability {
  double intra = 0.0;  // mean pairwise distance within a domain
  double inter = 0.0;  // mean pairwise distance across domains
};
Separability kernel_separability(const std::vector<KernelExportRow>& rows);

struct ExperimentSummary {
  std::string csv;
  std::string json;
  // mean over domains of joint minus single
  double static_mean_map_gain = 0.0;
  double dcsd_mean_map_gain = 0.0;
  std::vector<double> static_rank1_gain;
  std::vector<double> dcsd_rank1_gain;
  std::vector<Separability> separability;  // per DCSD module of the joint model
  bool ablation_finite = true;
};

// Trains static/DCSD x single-domain/joint (plus the factor ablation grid)
// and writes every artifact under out.
ExperimentSummary run_experiment(const RunConfig& config, const std::filesystem::path& out);

}  // namespace dcsd
