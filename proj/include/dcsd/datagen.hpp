#pragma once

// Synthetic multi-domain person-retrieval corpora, manifest I/O, global
// camera numbering and PK batch sampling.
//
// Image recipe (values in [0,1], layout [3,H,W]):
//   identity  four horizontal colour bands keyed by (identity_seed, pid),
//             band edges jittered by up to one row per image
//   distractor four bands of per-image random colours
//   domain    out[c] = a_c * identity[perm_d(c)] + b_c * distractor[c]
//             + brightness + texture_amplitude * texture_d
//             with a_c = (1-s) + s*[c == d mod 3], b_c = s*[c != d mod 3],
//             perm_d the cyclic channel shift by d and s = conflict_strength
//   camera    per-global-camera gamma in [0.7, 1.4] and hue rotation
//   noise     additive Gaussian, then clamp to [0,1]

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcsd/tensor.hpp"

namespace dcsd {

struct DomainSpec {
  std::int64_t domain_id = 0;
  std::size_t num_cameras = 2;
  std::size_t num_identities = 40;
  std::size_t images_per_identity_per_camera = 3;
  double conflict_strength = 0.0;
  double brightness_offset = 0.0;
  std::uint64_t texture_seed = 0;
  double texture_amplitude = 0.05;
  // Seeds the pid -> band colour hash. Equal seeds give equal patterns.
  std::uint64_t identity_seed = 0;

  void validate() const;  // throws ConfigError
};

struct SynthOptions {
  std::size_t height = 32;
  std::size_t width = 16;
  double noise_stddev = 0.02;
  double hue_max_radians = 0.25;
  // Identities held out for query/gallery, per domain.
  double test_identity_fraction = 0.5;
};

enum class Split { train, query, gallery };
std::string split_name(Split s);
Split parse_split(const std::string& s);

struct Sample {
  Tensor image;  // [3,H,W]
  std::int64_t pid = 0;
  std::int64_t domain = 0;
  std::int64_t local_camera = 0;
  std::int64_t global_camera = 0;
  Split split = Split::train;
};

struct Corpus {
  std::vector<Sample> samples;
  std::vector<std::size_t> camera_counts;    // per domain, indexed by position
  std::vector<std::size_t> camera_offsets;   // per domain
  std::size_t num_global_cameras() const;
  std::size_t num_domains() const { return camera_counts.size(); }
  std::vector<std::size_t> indices(Split split) const;
  std::vector<std::size_t> indices(Split split, std::int64_t domain) const;
};

// offset(d) = sum of camera counts of the domains before d.
std::vector<std::size_t> assign_global_camera_ids(const std::vector<std::size_t>& camera_counts);

// Domains are numbered by their position in `domains`; domain_id fields must
// equal that position. pids are disjoint across domains.
Corpus generate_synthetic(const std::vector<DomainSpec>& domains, const SynthOptions& options, std::uint64_t seed);

// The clean identity pattern of a pid (before any domain/camera transform).
Tensor identity_pattern(std::uint64_t identity_seed, std::int64_t pid, std::size_t height, std::size_t width);

// --- manifests ----------------------------------------------------------------

enum class BlobFormat { tensor, ppm };

struct ManifestRow {
  std::string path;  // relative to the manifest's directory
  std::int64_t pid = 0;
  std::int64_t domain = 0;
  std::int64_t camera = 0;  // local camera id
  Split split = Split::train;
};

// Writes blobs under dir/blobs and dir/manifest.csv. Returns the rows.
std::vector<ManifestRow> write_corpus(const Corpus& corpus, const std::filesystem::path& dir, BlobFormat format);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest);
void write_manifest(const std::filesystem::path& manifest, const std::vector<ManifestRow>& rows);

// Loads every blob of a manifest. Camera counts per domain are max(local)+1.
Corpus load_corpus(const std::filesystem::path& manifest);

// Concatenates corpora, shifting pids and domain ids so namespaces stay
// disjoint, and renumbers global cameras.
Corpus merge_corpora(const std::vector<Corpus>& parts);

// Keeps one domain (renumbered to domain 0 with its own cameras from 0).
Corpus select_domain(const Corpus& corpus, std::int64_t domain);

void write_tensor_blob(const std::filesystem::path& path, const Tensor& image);
Tensor read_tensor_blob(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

// --- PK sampling --------------------------------------------------------------

struct Batch {
  std::vector<std::size_t> indices;  // into the pool's corpus
  std::vector<std::int64_t> pids;
};

class PkSampler {
 public:
  // pool: indices into corpus (usually the train split). With balance_domains
  // the P identities are spread evenly over domains.
  PkSampler(const Corpus& corpus, std::vector<std::size_t> pool, bool balance_domains = false);

  // P distinct pids x K images, with replacement when a pid has fewer than K
  // images. The stream is a pure function of (seed, position).
  Batch sample(std::size_t p, std::size_t k, std::uint64_t seed, std::uint64_t position) const;

  std::size_t num_pids() const { return pids_.size(); }
  std::size_t pool_size() const { return pool_size_; }

 private:
  std::vector<std::int64_t> pids_;
  std::vector<std::int64_t> pid_domain_;
  std::vector<std::vector<std::size_t>> images_;
  std::size_t pool_size_ = 0;
  bool balance_ = false;
};

// Stacks images [3,H,W] into [N,3,H,W].
Tensor stack_images(const Corpus& corpus, const std::vector<std::size_t>& indices);

// Mixes values into a 64-bit seed (splitmix64 finalizer chain).
std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> values);

}  // namespace dcsd
