#include "dcsd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dcsd/checkpoint.hpp"
#include "dcsd/error.hpp"

namespace dcsd {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::size_t kBands = 4;

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> values) {
  std::uint64_t h = splitmix(seed);
  for (std::uint64_t v : values) h = splitmix(h ^ splitmix(v + 0x632BE59BD9B4E019ull));
  return h;
}

void DomainSpec::validate() const {
  const std::string where = "domain " + std::to_string(domain_id) + ": ";
  if (num_cameras < 1) throw ConfigError(where + "num_cameras must be >= 1");
  if (num_identities < 2) throw ConfigError(where + "num_identities must be >= 2");
  if (images_per_identity_per_camera < 1) throw ConfigError(where + "images_per_identity_per_camera must be >= 1");
  if (!(conflict_strength >= 0.0 && conflict_strength <= 1.0))
    throw ConfigError(where + "conflict_strength must lie in [0,1]");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::query:
      return "query";
    case Split::gallery:
      return "gallery";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw ConfigError("unknown split '" + s + "'");
}

std::size_t Corpus::num_global_cameras() const {
  return std::accumulate(camera_counts.begin(), camera_counts.end(), std::size_t{0});
}

std::vector<std::size_t> Corpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::size_t> Corpus::indices(Split split, std::int64_t domain) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split && samples[i].domain == domain) out.push_back(i);
  return out;
}

std::vector<std::size_t> assign_global_camera_ids(const std::vector<std::size_t>& camera_counts) {
  std::vector<std::size_t> offsets(camera_counts.size(), 0);
  for (std::size_t d = 1; d < camera_counts.size(); ++d) offsets[d] = offsets[d - 1] + camera_counts[d - 1];
  return offsets;
}

// --- synthesis ----------------------------------------------------------------

namespace {

std::array<double, 3> band_colour(std::uint64_t identity_seed, std::int64_t pid, std::size_t band) {
  Rng r(mix_seed(identity_seed, {static_cast<std::uint64_t>(pid), band}));
  return {r.uniform(0.05, 0.95), r.uniform(0.05, 0.95), r.uniform(0.05, 0.95)};
}

// Writes four bands into img ([3,H,W]); edges[b] is the first row of band b+1.
void paint_bands(std::span<double> img, std::size_t h, std::size_t w, const std::array<std::array<double, 3>, kBands>& colours,
                 const std::array<std::size_t, kBands - 1>& edges) {
  for (std::size_t y = 0; y < h; ++y) {
    std::size_t band = 0;
    while (band < kBands - 1 && y >= edges[band]) ++band;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t x = 0; x < w; ++x) img[(c * h + y) * w + x] = colours[band][c];
  }
}

std::array<std::size_t, kBands - 1> nominal_edges(std::size_t h) {
  return {h / 4, h / 2, 3 * h / 4};
}

struct CameraLook {
  double gamma;
  std::array<double, 9> hue;  // row-major rotation about the grey axis
};

CameraLook camera_look(std::uint64_t seed, std::size_t global_camera, double hue_max) {
  Rng r(mix_seed(seed, {0xCA3E8A, global_camera}));
  CameraLook look;
  look.gamma = r.uniform(0.7, 1.4);
  const double theta = r.uniform(-hue_max, hue_max);
  const double c = std::cos(theta), s = std::sin(theta), t = (1.0 - c) / 3.0, k = s / std::sqrt(3.0);
  // Rodrigues rotation with unit axis (1,1,1)/sqrt(3)
  look.hue = {c + t, t - k, t + k, t + k, c + t, t - k, t - k, t + k, c + t};
  return look;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

Tensor identity_pattern(std::uint64_t identity_seed, std::int64_t pid, std::size_t height, std::size_t width) {
  Tensor t({3, height, width}, 0.0);
  std::array<std::array<double, 3>, kBands> colours;
  for (std::size_t b = 0; b < kBands; ++b) colours[b] = band_colour(identity_seed, pid, b);
  paint_bands(t.mutable_data(), height, width, colours, nominal_edges(height));
  return t;
}

Corpus generate_synthetic(const std::vector<DomainSpec>& domains, const SynthOptions& opt, std::uint64_t seed) {
  if (domains.empty()) throw ConfigError("synthetic corpus needs at least one domain");
  if (opt.height < 8 || opt.width < 4)
    throw ConfigError("image too small for the band pattern: need H >= 8 and W >= 4, got " + std::to_string(opt.height) +
                      "x" + std::to_string(opt.width));
  if (!(opt.test_identity_fraction >= 0.0 && opt.test_identity_fraction < 1.0))
    throw ConfigError("test_identity_fraction must lie in [0,1)");
  for (std::size_t d = 0; d < domains.size(); ++d) {
    domains[d].validate();
    if (domains[d].domain_id != static_cast<std::int64_t>(d))
      throw ConfigError("domain ids must equal their position; domain at " + std::to_string(d) + " has id " +
                        std::to_string(domains[d].domain_id));
  }

  Corpus corpus;
  for (const auto& d : domains) corpus.camera_counts.push_back(d.num_cameras);
  corpus.camera_offsets = assign_global_camera_ids(corpus.camera_counts);

  const std::size_t h = opt.height, w = opt.width, plane = h * w;
  std::int64_t pid_offset = 0;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const DomainSpec& ds = domains[d];
    const double s = ds.conflict_strength;
    std::array<double, 3> a{}, b{};
    std::array<std::size_t, 3> perm{};
    for (std::size_t c = 0; c < 3; ++c) {
      const bool home = c == d % 3;
      a[c] = (1.0 - s) + (home ? s : 0.0);
      b[c] = home ? 0.0 : s;
      perm[c] = (c + d) % 3;
    }
    std::vector<double> texture(3 * plane);
    {
      Rng tr(mix_seed(ds.texture_seed, {0x7E47u}));
      for (double& v : texture) v = tr.uniform(-1.0, 1.0);
    }
    const std::size_t n_test = static_cast<std::size_t>(std::floor(ds.num_identities * opt.test_identity_fraction));
    const std::size_t n_train = ds.num_identities - n_test;
    const std::size_t ipc = ds.images_per_identity_per_camera;

    for (std::size_t j = 0; j < ds.num_identities; ++j) {
      const bool test_id = j >= n_train;
      std::array<std::array<double, 3>, kBands> colours;
      for (std::size_t band = 0; band < kBands; ++band) colours[band] = band_colour(ds.identity_seed, static_cast<std::int64_t>(j), band);
      for (std::size_t cam = 0; cam < ds.num_cameras; ++cam) {
        const std::size_t g = corpus.camera_offsets[d] + cam;
        const CameraLook look = camera_look(seed, g, opt.hue_max_radians);
        for (std::size_t i = 0; i < ipc; ++i) {
          Rng r(mix_seed(seed, {d, j, cam, i}));
          std::array<std::size_t, kBands - 1> edges = nominal_edges(h);
          for (auto& e : edges) e = e + r.index(3) - 1;
          std::vector<double> ident(3 * plane), distract(3 * plane);
          paint_bands(ident, h, w, colours, edges);
          std::array<std::array<double, 3>, kBands> junk;
          for (auto& col : junk)
            for (double& v : col) v = r.uniform(0.05, 0.95);
          paint_bands(distract, h, w, junk, nominal_edges(h));

          Tensor img({3, h, w}, 0.0);
          auto px = img.mutable_data();
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t q = 0; q < plane; ++q)
              px[c * plane + q] = a[c] * ident[perm[c] * plane + q] + b[c] * distract[c * plane + q] +
                                  ds.brightness_offset + ds.texture_amplitude * texture[c * plane + q];
          for (std::size_t q = 0; q < plane; ++q) {
            const double rgb[3] = {px[q], px[plane + q], px[2 * plane + q]};
            for (std::size_t c = 0; c < 3; ++c) {
              const double rot = look.hue[3 * c] * rgb[0] + look.hue[3 * c + 1] * rgb[1] + look.hue[3 * c + 2] * rgb[2];
              px[c * plane + q] = std::pow(clamp01(rot), look.gamma);
            }
          }
          for (double& v : px) v = clamp01(v + r.normal(0.0, opt.noise_stddev));

          Sample smp;
          smp.image = std::move(img);
          smp.pid = pid_offset + static_cast<std::int64_t>(j);
          smp.domain = static_cast<std::int64_t>(d);
          smp.local_camera = static_cast<std::int64_t>(cam);
          smp.global_camera = static_cast<std::int64_t>(g);
          if (!test_id) smp.split = Split::train;
          else if (ipc >= 2) smp.split = i == 0 ? Split::query : Split::gallery;
          else smp.split = cam == 0 ? Split::query : Split::gallery;
          corpus.samples.push_back(std::move(smp));
        }
      }
    }
    pid_offset += static_cast<std::int64_t>(ds.num_identities);
  }
  return corpus;
}

// --- blobs ----------------------------------------------------------------------

void write_tensor_blob(const std::filesystem::path& path, const Tensor& image) {
  save_checkpoint(path, {{"image", image}});
}

Tensor read_tensor_blob(const std::filesystem::path& path) {
  auto entries = load_checkpoint(path);
  if (entries.size() != 1) throw IoError("image blob " + path.string() + " must hold exactly one tensor");
  return entries[0].tensor;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("ppm needs a [3,H,W] image");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t q = 0; q < plane; ++q)
    for (std::size_t c = 0; c < 3; ++c)
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(clamp01(image[c * plane + q]) * 255.0))));
  write_file_atomic(path, bytes);
}

Tensor read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw IoError(path.string() + " is not an 8-bit P6 image");
  in.get();
  const std::size_t start = static_cast<std::size_t>(in.tellg()), plane = h * w;
  if (bytes.size() != start + 3 * plane) throw IoError(path.string() + ": pixel data size mismatch");
  Tensor t({3, h, w}, 0.0);
  auto px = t.mutable_data();
  for (std::size_t q = 0; q < plane; ++q)
    for (std::size_t c = 0; c < 3; ++c)
      px[c * plane + q] = static_cast<unsigned char>(bytes[start + 3 * q + c]) / 255.0;
  return t;
}

// --- manifests ------------------------------------------------------------------

void write_manifest(const std::filesystem::path& manifest, const std::vector<ManifestRow>& rows) {
  std::ostringstream os;
  os << "path,pid,domain,camera,split\n";
  for (const auto& r : rows) {
    if (r.path.find(',') != std::string::npos || r.path.find('\n') != std::string::npos)
      throw ConfigError("manifest paths may not contain commas or newlines: " + r.path);
    os << r.path << ',' << r.pid << ',' << r.domain << ',' << r.camera << ',' << split_name(r.split) << '\n';
  }
  write_file_atomic(manifest, os.str());
}

std::vector<ManifestRow> write_corpus(const Corpus& corpus, const std::filesystem::path& dir, BlobFormat format) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "blobs", ec);
  if (ec) throw IoError("cannot create " + (dir / "blobs").string() + ": " + ec.message());
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const Sample& s = corpus.samples[i];
    std::ostringstream name;
    name << "blobs/" << std::setw(6) << std::setfill('0') << i << "_d" << s.domain << "_p" << s.pid << "_c"
         << s.local_camera << (format == BlobFormat::ppm ? ".ppm" : ".bin");
    if (format == BlobFormat::ppm) write_ppm(dir / name.str(), s.image);
    else write_tensor_blob(dir / name.str(), s.image);
    rows.push_back({name.str(), s.pid, s.domain, s.local_camera, s.split});
  }
  write_manifest(dir / "manifest.csv", rows);
  return rows;
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest) {
  std::istringstream in(read_file(manifest));
  std::string line;
  if (!std::getline(in, line) || line != "path,pid,domain,camera,split")
    throw ConfigError(manifest.string() + ": expected header path,pid,domain,camera,split");
  std::vector<ManifestRow> rows;
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    const std::string where = manifest.string() + ":" + std::to_string(lineno);
    if (f.size() != 5) throw ConfigError(where + ": expected 5 fields");
    ManifestRow r;
    r.path = f[0];
    try {
      std::size_t used = 0;
      r.pid = std::stoll(f[1], &used);
      r.domain = std::stoll(f[2]);
      r.camera = std::stoll(f[3]);
    } catch (const std::exception&) {
      throw ConfigError(where + ": pid, domain and camera must be integers");
    }
    if (r.pid < 0 || r.domain < 0 || r.camera < 0) throw ConfigError(where + ": ids must be >= 0");
    r.split = parse_split(f[4]);
    if (!seen.insert(r.path).second) throw ConfigError(where + ": image listed twice: " + r.path);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

void finish_cameras(Corpus& c) {
  std::int64_t max_domain = -1;
  for (const auto& s : c.samples) max_domain = std::max(max_domain, s.domain);
  c.camera_counts.assign(static_cast<std::size_t>(max_domain + 1), 0);
  for (const auto& s : c.samples) {
    auto& n = c.camera_counts[static_cast<std::size_t>(s.domain)];
    n = std::max(n, static_cast<std::size_t>(s.local_camera + 1));
  }
  for (std::size_t d = 0; d < c.camera_counts.size(); ++d)
    if (c.camera_counts[d] == 0) throw ConfigError("domain ids must be contiguous from 0; domain " + std::to_string(d) + " is empty");
  c.camera_offsets = assign_global_camera_ids(c.camera_counts);
  for (auto& s : c.samples)
    s.global_camera = static_cast<std::int64_t>(c.camera_offsets[static_cast<std::size_t>(s.domain)]) + s.local_camera;
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& manifest) {
  const auto rows = read_manifest(manifest);
  const auto base = manifest.parent_path();
  Corpus c;
  for (const auto& r : rows) {
    const auto p = base / r.path;
    if (!std::filesystem::exists(p)) throw IoError("manifest references missing blob " + p.string());
    Sample s;
    s.image = p.extension() == ".ppm" ? read_ppm(p) : read_tensor_blob(p);
    if (s.image.rank() != 3 || s.image.dim(0) != 3) throw ShapeError("blob " + p.string() + " is not a [3,H,W] image");
    s.pid = r.pid;
    s.domain = r.domain;
    s.local_camera = r.camera;
    s.split = r.split;
    c.samples.push_back(std::move(s));
  }
  if (c.samples.empty()) throw ConfigError(manifest.string() + " lists no images");
  finish_cameras(c);
  return c;
}

Corpus merge_corpora(const std::vector<Corpus>& parts) {
  Corpus out;
  std::int64_t pid_shift = 0, domain_shift = 0;
  for (const auto& part : parts) {
    std::int64_t max_pid = -1;
    for (const auto& s : part.samples) {
      Sample t = s;
      t.pid += pid_shift;
      t.domain += domain_shift;
      max_pid = std::max(max_pid, s.pid);
      out.samples.push_back(std::move(t));
    }
    pid_shift += max_pid + 1;
    domain_shift += static_cast<std::int64_t>(part.camera_counts.size());
  }
  out.camera_counts.clear();
  for (const auto& part : parts) out.camera_counts.insert(out.camera_counts.end(), part.camera_counts.begin(), part.camera_counts.end());
  out.camera_offsets = assign_global_camera_ids(out.camera_counts);
  for (auto& s : out.samples)
    s.global_camera = static_cast<std::int64_t>(out.camera_offsets[static_cast<std::size_t>(s.domain)]) + s.local_camera;
  return out;
}

Corpus select_domain(const Corpus& corpus, std::int64_t domain) {
  if (domain < 0 || static_cast<std::size_t>(domain) >= corpus.num_domains())
    throw IndexError("domain " + std::to_string(domain) + " out of range");
  Corpus out;
  out.camera_counts = {corpus.camera_counts[static_cast<std::size_t>(domain)]};
  out.camera_offsets = {0};
  for (const auto& s : corpus.samples) {
    if (s.domain != domain) continue;
    Sample t = s;
    t.domain = 0;
    t.global_camera = t.local_camera;
    out.samples.push_back(std::move(t));
  }
  return out;
}

// --- sampling --------------------------------------------------------------------

PkSampler::PkSampler(const Corpus& corpus, std::vector<std::size_t> pool, bool balance_domains)
    : pool_size_(pool.size()), balance_(balance_domains) {
  std::map<std::int64_t, std::vector<std::size_t>> by_pid;
  std::map<std::int64_t, std::int64_t> domain_of;
  for (std::size_t i : pool) {
    if (i >= corpus.samples.size()) throw IndexError("sampler pool index " + std::to_string(i) + " out of range");
    by_pid[corpus.samples[i].pid].push_back(i);
    domain_of[corpus.samples[i].pid] = corpus.samples[i].domain;
  }
  for (auto& [pid, imgs] : by_pid) {
    pids_.push_back(pid);
    pid_domain_.push_back(domain_of[pid]);
    images_.push_back(std::move(imgs));
  }
}

Batch PkSampler::sample(std::size_t p, std::size_t k, std::uint64_t seed, std::uint64_t position) const {
  if (pids_.size() < 2)
    throw SamplerError("PK sampling needs at least 2 distinct pids, pool has " + std::to_string(pids_.size()));
  if (p < 2 || k < 1) throw SamplerError("PK sampling needs P >= 2 and K >= 1");
  if (p > pids_.size())
    throw SamplerError("P=" + std::to_string(p) + " exceeds the " + std::to_string(pids_.size()) + " pids in the pool");
  Rng rng(mix_seed(seed, {0x9C5A, position}));

  std::vector<std::size_t> chosen;
  if (!balance_) {
    std::vector<std::size_t> order(pids_.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < p; ++i) {
      std::swap(order[i], order[i + rng.index(order.size() - i)]);
      chosen.push_back(order[i]);
    }
  } else {
    std::map<std::int64_t, std::vector<std::size_t>> by_domain;
    for (std::size_t i = 0; i < pids_.size(); ++i) by_domain[pid_domain_[i]].push_back(i);
    std::vector<std::vector<std::size_t>> queues;
    for (auto& [d, v] : by_domain) {
      for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
      queues.push_back(std::move(v));
    }
    std::vector<std::size_t> cursor(queues.size(), 0);
    for (std::size_t q = 0; chosen.size() < p; q = (q + 1) % queues.size())
      if (cursor[q] < queues[q].size()) chosen.push_back(queues[q][cursor[q]++]);
  }

  Batch b;
  for (std::size_t slot : chosen) {
    std::vector<std::size_t> imgs = images_[slot];
    for (std::size_t i = imgs.size(); i > 1; --i) std::swap(imgs[i - 1], imgs[rng.index(i)]);
    for (std::size_t j = 0; j < k; ++j) {
      // every image once before any repeat; repeats drawn with replacement
      b.indices.push_back(j < imgs.size() ? imgs[j] : imgs[rng.index(imgs.size())]);
      b.pids.push_back(pids_[slot]);
    }
  }
  return b;
}

Tensor stack_images(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ShapeError("cannot stack an empty image list");
  const Shape is = corpus.samples.at(indices[0]).image.shape();
  const std::size_t per = numel(is);
  Tensor out({indices.size(), is[0], is[1], is[2]}, 0.0);
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = corpus.samples.at(indices[i]).image;
    if (img.shape() != is) throw ShapeError("images of different shapes cannot be stacked");
    std::copy(img.data().begin(), img.data().end(), dst.begin() + i * per);
  }
  return out;
}

}  // namespace dcsd
