#include "dcsd/harness.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "dcsd/checkpoint.hpp"
#include "dcsd/error.hpp"
#include "dcsd/losses.hpp"
#include "json.hpp"

namespace dcsd {

using nlohmann::json;
using nlohmann::ordered_json;

void RunConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  for (std::size_t i = 0; i < schedule.decay_epochs.size(); ++i) {
    if (i > 0 && schedule.decay_epochs[i] <= schedule.decay_epochs[i - 1])
      throw ConfigError("lr.decay_epochs must be strictly increasing");
    if (schedule.decay_epochs[i] >= epochs) throw ConfigError("lr.decay_epochs must be < epochs");
  }
  if (!(schedule.initial > 0.0)) throw ConfigError("lr.initial must be > 0");
  if (!(schedule.factor > 0.0)) throw ConfigError("lr.factor must be > 0");
  if (variant == Variant::dcsd && !use_sample && !use_domain && !use_camera)
    throw ConfigError("dcsd variant needs at least one of factors.sample/domain/camera");
  if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0,1)");
  if (batch_p < 2) throw ConfigError("batch.p must be >= 2");
  if (batch_k < 2) throw ConfigError("batch.k must be >= 2 for triplet positives");
  if (image.height < 4 || image.width < 4) throw ConfigError("image height and width must be >= 4");
  if (!(image.test_identity_fraction >= 0.0 && image.test_identity_fraction < 1.0))
    throw ConfigError("image.test_identity_fraction must lie in [0,1)");
  if (domains.empty()) throw ConfigError("at least one domain is required");
  for (const auto& d : domains) d.validate();
}

RunConfig default_run_config() {
  RunConfig c;
  const std::size_t cams[3] = {2, 3, 4};
  const double brightness[3] = {-0.1, 0.0, 0.1};
  for (std::size_t d = 0; d < 3; ++d) {
    DomainSpec s;
    s.domain_id = static_cast<std::int64_t>(d);
    s.num_cameras = cams[d];
    s.num_identities = 40;
    s.images_per_identity_per_camera = 3;
    s.conflict_strength = 0.8;
    s.brightness_offset = brightness[d];
    s.texture_seed = 101 + d;
    s.identity_seed = 11 + d;
    c.domains.push_back(s);
  }
  return c;
}

namespace {

const char* variant_name(Variant v) { return v == Variant::dcsd ? "dcsd" : "static"; }

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw ConfigError("unknown config key '" + where + item.key() + "'");
  }
}

}  // namespace

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"seed", "variant", "factors", "stop_gradient", "kernel_normalization", "epochs", "lr", "margin",
                  "label_smoothing", "batch", "iterations_per_epoch", "balance_domains", "image", "blob_format",
                  "domains", "out", "experiment"},
                 "");
  RunConfig c = default_run_config();
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  const std::string variant = get_or<std::string>(j, "variant", variant_name(c.variant));
  if (variant == "dcsd") c.variant = Variant::dcsd;
  else if (variant == "static") c.variant = Variant::static_conv;
  else throw ConfigError("variant must be 'static' or 'dcsd', got '" + variant + "'");
  if (j.contains("factors")) {
    const json& f = j["factors"];
    reject_unknown(f, {"sample", "domain", "camera"}, "factors.");
    c.use_sample = get_or<bool>(f, "sample", c.use_sample);
    c.use_domain = get_or<bool>(f, "domain", c.use_domain);
    c.use_camera = get_or<bool>(f, "camera", c.use_camera);
  }
  c.stop_gradient = get_or<bool>(j, "stop_gradient", c.stop_gradient);
  const std::string norm = get_or<std::string>(j, "kernel_normalization", "softmax");
  if (norm == "none") c.kernel_normalization = KernelNormalization::none;
  else if (norm == "softmax") c.kernel_normalization = KernelNormalization::softmax_over_k2;
  else throw ConfigError("kernel_normalization must be 'none' or 'softmax'");
  c.epochs = get_or<std::size_t>(j, "epochs", c.epochs);
  if (j.contains("lr")) {
    const json& l = j["lr"];
    reject_unknown(l, {"initial", "decay_epochs", "factor"}, "lr.");
    c.schedule.initial = get_or<double>(l, "initial", c.schedule.initial);
    c.schedule.decay_epochs = get_or<std::vector<std::size_t>>(l, "decay_epochs", c.schedule.decay_epochs);
    c.schedule.factor = get_or<double>(l, "factor", c.schedule.factor);
  }
  c.margin = get_or<double>(j, "margin", c.margin);
  c.label_smoothing = get_or<double>(j, "label_smoothing", c.label_smoothing);
  if (j.contains("batch")) {
    const json& b = j["batch"];
    reject_unknown(b, {"p", "k"}, "batch.");
    c.batch_p = get_or<std::size_t>(b, "p", c.batch_p);
    c.batch_k = get_or<std::size_t>(b, "k", c.batch_k);
  }
  c.iterations_per_epoch = get_or<std::size_t>(j, "iterations_per_epoch", c.iterations_per_epoch);
  c.balance_domains = get_or<bool>(j, "balance_domains", c.balance_domains);
  if (j.contains("image")) {
    const json& im = j["image"];
    reject_unknown(im, {"height", "width", "noise_stddev", "hue_max_radians", "test_identity_fraction"}, "image.");
    c.image.height = get_or<std::size_t>(im, "height", c.image.height);
    c.image.width = get_or<std::size_t>(im, "width", c.image.width);
    c.image.noise_stddev = get_or<double>(im, "noise_stddev", c.image.noise_stddev);
    c.image.hue_max_radians = get_or<double>(im, "hue_max_radians", c.image.hue_max_radians);
    c.image.test_identity_fraction = get_or<double>(im, "test_identity_fraction", c.image.test_identity_fraction);
  }
  const std::string blob = get_or<std::string>(j, "blob_format", "tensor");
  if (blob == "tensor") c.blob_format = BlobFormat::tensor;
  else if (blob == "ppm") c.blob_format = BlobFormat::ppm;
  else throw ConfigError("blob_format must be 'tensor' or 'ppm'");
  if (j.contains("domains")) {
    if (!j["domains"].is_array()) throw ConfigError("domains must be an array");
    c.domains.clear();
    for (const json& dj : j["domains"]) {
      reject_unknown(dj,
                     {"num_cameras", "num_identities", "images_per_identity_per_camera", "conflict_strength",
                      "brightness_offset", "texture_seed", "texture_amplitude", "identity_seed"},
                     "domains[].");
      DomainSpec d;
      d.domain_id = static_cast<std::int64_t>(c.domains.size());
      d.num_cameras = get_or<std::size_t>(dj, "num_cameras", d.num_cameras);
      d.num_identities = get_or<std::size_t>(dj, "num_identities", d.num_identities);
      d.images_per_identity_per_camera =
          get_or<std::size_t>(dj, "images_per_identity_per_camera", d.images_per_identity_per_camera);
      d.conflict_strength = get_or<double>(dj, "conflict_strength", d.conflict_strength);
      d.brightness_offset = get_or<double>(dj, "brightness_offset", d.brightness_offset);
      d.texture_seed = get_or<std::uint64_t>(dj, "texture_seed", d.texture_seed);
      d.texture_amplitude = get_or<double>(dj, "texture_amplitude", d.texture_amplitude);
      d.identity_seed = get_or<std::uint64_t>(dj, "identity_seed", d.identity_seed);
      c.domains.push_back(d);
    }
  }
  c.out = get_or<std::string>(j, "out", c.out);
  if (j.contains("experiment")) {
    const json& e = j["experiment"];
    reject_unknown(e, {"ablation", "export_per_domain"}, "experiment.");
    c.ablation = get_or<bool>(e, "ablation", c.ablation);
    c.export_per_domain = get_or<std::size_t>(e, "export_per_domain", c.export_per_domain);
  }
  c.validate();
  return c;
}

std::string config_to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["variant"] = variant_name(c.variant);
  j["factors"] = {{"sample", c.use_sample}, {"domain", c.use_domain}, {"camera", c.use_camera}};
  j["stop_gradient"] = c.stop_gradient;
  j["kernel_normalization"] = c.kernel_normalization == KernelNormalization::none ? "none" : "softmax";
  j["epochs"] = c.epochs;
  j["lr"] = {{"initial", c.schedule.initial}, {"decay_epochs", c.schedule.decay_epochs}, {"factor", c.schedule.factor}};
  j["margin"] = c.margin;
  j["label_smoothing"] = c.label_smoothing;
  j["batch"] = {{"p", c.batch_p}, {"k", c.batch_k}};
  j["iterations_per_epoch"] = c.iterations_per_epoch;
  j["balance_domains"] = c.balance_domains;
  j["image"] = {{"height", c.image.height},
                {"width", c.image.width},
                {"noise_stddev", c.image.noise_stddev},
                {"hue_max_radians", c.image.hue_max_radians},
                {"test_identity_fraction", c.image.test_identity_fraction}};
  j["blob_format"] = c.blob_format == BlobFormat::tensor ? "tensor" : "ppm";
  j["domains"] = ordered_json::array();
  for (const auto& d : c.domains)
    j["domains"].push_back({{"num_cameras", d.num_cameras},
                            {"num_identities", d.num_identities},
                            {"images_per_identity_per_camera", d.images_per_identity_per_camera},
                            {"conflict_strength", d.conflict_strength},
                            {"brightness_offset", d.brightness_offset},
                            {"texture_seed", d.texture_seed},
                            {"texture_amplitude", d.texture_amplitude},
                            {"identity_seed", d.identity_seed}});
  j["out"] = c.out;
  j["experiment"] = {{"ablation", c.ablation}, {"export_per_domain", c.export_per_domain}};
  return j.dump(2) + "\n";
}

RunConfig load_config(const std::filesystem::path& path) { return config_from_json(read_file(path)); }

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

namespace {

std::vector<std::int64_t> train_pids(const Corpus& corpus) {
  std::vector<std::int64_t> pids;
  for (const auto& s : corpus.samples)
    if (s.split == Split::train) pids.push_back(s.pid);
  std::sort(pids.begin(), pids.end());
  pids.erase(std::unique(pids.begin(), pids.end()), pids.end());
  return pids;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ModelSpec model_spec_for(const RunConfig& config, const Corpus& corpus) {
  if (corpus.samples.empty()) throw ConfigError("corpus is empty");
  const Shape& s = corpus.samples.front().image.shape();
  ModelSpec spec = tinynet_spec(config.variant == Variant::dcsd, train_pids(corpus).size(),
                                std::max<std::size_t>(1, corpus.num_domains()),
                                std::max<std::size_t>(1, corpus.num_global_cameras()), {s[0], s[1], s[2]});
  spec.dcsd.kernel_normalization = config.kernel_normalization;
  spec.dcsd.use_sample = config.use_sample;
  spec.dcsd.use_domain = config.use_domain;
  spec.dcsd.use_camera = config.use_camera;
  spec.dcsd.stop_gradient = config.stop_gradient;
  return spec;
}

TrainResult train(const RunConfig& config, const Corpus& corpus) {
  config.validate();
  const auto pool = corpus.indices(Split::train);
  if (pool.empty()) throw ConfigError("train split is empty");
  const auto pids = train_pids(corpus);
  std::map<std::int64_t, Label> label_of;
  for (std::size_t i = 0; i < pids.size(); ++i) label_of[pids[i]] = static_cast<Label>(i);

  TrainResult result{Model(model_spec_for(config, corpus), mix_seed(config.seed, {2})), {}, false};
  Model& model = result.model;
  result.has_aux = model.num_dcsd() > 0;
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  Adam adam(params, AdamConfig{config.schedule.initial});
  const PkSampler sampler(corpus, pool, config.balance_domains);
  const std::uint64_t sample_seed = mix_seed(config.seed, {1});
  const std::size_t per_batch = config.batch_p * config.batch_k;
  const std::size_t iters =
      config.iterations_per_epoch > 0 ? config.iterations_per_epoch : (pool.size() + per_batch - 1) / per_batch;

  std::uint64_t position = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = config.schedule.lr_at(epoch);
    log.iterations = iters;
    adam.set_lr(log.lr);
    for (std::size_t it = 0; it < iters; ++it, ++position) {
      const Batch batch = sampler.sample(config.batch_p, config.batch_k, sample_seed, position);
      std::vector<Label> labels, domains, cameras;
      for (std::size_t i : batch.indices) {
        const Sample& s = corpus.samples[i];
        labels.push_back(label_of.at(s.pid));
        domains.push_back(s.domain);
        cameras.push_back(s.global_camera);
      }
      const ModelOutput out = model.forward(stack_images(corpus, batch.indices), Mode::train);
      LossParts parts;
      parts.margin = config.margin;
      parts.l_tri = triplet_batch_hard(out.embedding, batch.pids, config.margin);
      parts.l_ce_sample = cross_entropy(out.logits, labels, config.label_smoothing);
      for (std::size_t m = 0; m < out.domain_logits.size(); ++m) {
        parts.l_ce_domain_per_module.push_back(cross_entropy(out.domain_logits[m], domains));
        parts.l_ce_camera_per_module.push_back(cross_entropy(out.camera_logits[m], cameras));
      }
      const Tensor loss = result.has_aux ? total_loss(parts) : reid_loss(parts);
      backward(loss);
      adam.step();
      adam.zero_grad();
      log.loss += loss.item();
      log.triplet += parts.l_tri.item();
      log.ce += parts.l_ce_sample.item();
      for (const auto& t : parts.l_ce_domain_per_module) log.domain_ce += t.item() / out.domain_logits.size();
      for (const auto& t : parts.l_ce_camera_per_module) log.camera_ce += t.item() / out.camera_logits.size();
    }
    for (double* v : {&log.loss, &log.triplet, &log.ce, &log.domain_ce, &log.camera_ce}) *v /= iters;
    if (!std::isfinite(log.loss)) throw StateError("non-finite loss at epoch " + std::to_string(epoch));
    result.log.push_back(log);
  }
  return result;
}

std::string train_log_csv(const TrainResult& result) {
  std::ostringstream os;
  os << "epoch,lr,iterations,loss,triplet,ce";
  if (result.has_aux) os << ",domain_ce,camera_ce";
  os << '\n';
  for (const auto& e : result.log) {
    os << e.epoch << ',' << fmt(e.lr) << ',' << e.iterations << ',' << fmt(e.loss) << ',' << fmt(e.triplet) << ','
       << fmt(e.ce);
    if (result.has_aux) os << ',' << fmt(e.domain_ce) << ',' << fmt(e.camera_ce);
    os << '\n';
  }
  return os.str();
}

std::vector<DomainReport> evaluate_domains(Model& model, const Corpus& corpus, std::optional<bool> cross_camera) {
  if (!corpus.samples.empty()) {
    const auto& in = model.spec().input_shape;
    const Shape& s = corpus.samples.front().image.shape();
    if (s.size() != 3 || s[0] != in[0] || s[1] != in[1] || s[2] != in[2])
      throw CheckpointError("model input shape does not match the manifest images");
  }
  std::vector<DomainReport> reports;
  for (std::size_t d = 0; d < corpus.num_domains(); ++d) {
    const auto q = corpus.indices(Split::query, static_cast<std::int64_t>(d));
    const auto g = corpus.indices(Split::gallery, static_cast<std::int64_t>(d));
    if (q.empty() || g.empty()) continue;
    const bool cross = corpus.camera_counts[d] > 1 && cross_camera.value_or(true);
    const Tensor qe = extract_embeddings(model, corpus, q);
    const Tensor ge = extract_embeddings(model, corpus, g);
    reports.push_back(
        {static_cast<std::int64_t>(d), evaluate(qe, retrieval_items(corpus, q), ge, retrieval_items(corpus, g), cross)});
  }
  return reports;
}

std::vector<KernelExportRow> export_kernels(Model& model, const Corpus& corpus, std::size_t module,
                                            std::size_t per_domain) {
  if (model.num_dcsd() == 0) throw VariantError("kernel export needs a dcsd checkpoint; this model has no DCSD layers");
  if (module >= model.num_dcsd())
    throw IndexError("module " + std::to_string(module) + " out of range, model has " +
                     std::to_string(model.num_dcsd()) + " DCSD layers");
  std::vector<std::vector<std::size_t>> picks(corpus.num_domains());
  std::size_t n = per_domain;
  for (std::size_t d = 0; d < corpus.num_domains(); ++d) {
    auto idx = corpus.indices(Split::query, static_cast<std::int64_t>(d));
    const auto g = corpus.indices(Split::gallery, static_cast<std::int64_t>(d));
    idx.insert(idx.end(), g.begin(), g.end());
    picks[d] = idx;
    n = std::min(n, idx.size());
  }
  NoGradGuard no_grad;
  const bool retained = model.retain_kernels();
  model.set_retain_kernels(true);
  std::vector<KernelExportRow> rows;
  for (auto& idx : picks) {
    idx.resize(n);
    if (idx.empty()) continue;
    const ModelOutput out = model.forward(stack_images(corpus, idx), Mode::eval);
    std::vector<std::int64_t> domains, cameras;
    for (std::size_t i : idx) {
      domains.push_back(corpus.samples[i].domain);
      cameras.push_back(corpus.samples[i].global_camera);
    }
    auto part = kernel_rows(module, out.dcsd.at(module), idx, domains, cameras);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  model.set_retain_kernels(retained);
  return rows;
}

Separability kernel_separability(const std::vector<KernelExportRow>& rows) {
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < rows[i].values.size(); ++k) {
        const double diff = rows[i].values[k] - rows[j].values[k];
        s += diff * diff;
      }
      if (rows[i].domain == rows[j].domain) {
        intra += std::sqrt(s);
        ++n_intra;
      } else {
        inter += std::sqrt(s);
        ++n_inter;
      }
    }
  return {n_intra ? intra / n_intra : 0.0, n_inter ? inter / n_inter : 0.0};
}

namespace {

struct Condition {
  std::string name;
  std::vector<DomainReport> reports;  // indexed by original domain
};

// Trains on `corpus`, stores checkpoint, log and per-domain reports under dir.
Condition run_condition(const std::string& name, const RunConfig& config, const Corpus& train_corpus,
                        const std::filesystem::path& dir, std::int64_t domain_shift, TrainResult* keep = nullptr) {
  std::filesystem::create_directories(dir);
  TrainResult r = train(config, train_corpus);
  save_model(r.model, (dir / "model.ckpt").string());
  write_file_atomic(dir / "train_log.csv", train_log_csv(r));
  Condition c{name, evaluate_domains(r.model, train_corpus)};
  for (auto& dr : c.reports) {
    dr.domain += domain_shift;
    write_file_atomic(dir / ("report_d" + std::to_string(dr.domain) + ".json"), report_to_json(dr.report));
  }
  if (keep) *keep = std::move(r);
  return c;
}

const RetrievalReport& report_for(const Condition& c, std::int64_t domain) {
  for (const auto& dr : c.reports)
    if (dr.domain == domain) return dr.report;
  throw StateError("condition " + c.name + " has no report for domain " + std::to_string(domain));
}

}  // namespace

ExperimentSummary run_experiment(const RunConfig& base, const std::filesystem::path& out) {
  base.validate();
  if (base.domains.size() < 2) throw ConfigError("experiment needs at least 2 domains");
  for (const auto& d : base.domains)
    if (!(d.conflict_strength > 0.0)) throw ConfigError("experiment needs conflict_strength > 0 on every domain");
  std::filesystem::create_directories(out);
  RunConfig recorded = base;
  recorded.out.clear();
  write_file_atomic(out / "config.json", config_to_json(recorded));
  const Corpus corpus = generate_synthetic(base.domains, base.image, base.seed);
  const std::size_t nd = base.domains.size();

  // results[variant]: per-domain single conditions and the joint condition
  std::map<std::string, std::vector<Condition>> singles;
  std::map<std::string, Condition> joints;
  TrainResult dcsd_joint{Model(model_spec_for(base, corpus), 0), {}, false};
  for (Variant v : {Variant::static_conv, Variant::dcsd}) {
    RunConfig cfg = base;
    cfg.variant = v;
    cfg.use_sample = cfg.use_domain = cfg.use_camera = true;
    const std::string vn = variant_name(v);
    for (std::size_t d = 0; d < nd; ++d) {
      const Corpus single = select_domain(corpus, static_cast<std::int64_t>(d));
      singles[vn].push_back(run_condition(vn + "_single", cfg, single, out / (vn + "_single_d" + std::to_string(d)),
                                          static_cast<std::int64_t>(d)));
    }
    joints[vn] = run_condition(vn + "_joint", cfg, corpus, out / (vn + "_joint"), 0,
                               v == Variant::dcsd ? &dcsd_joint : nullptr);
  }

  ExperimentSummary summary;
  ordered_json j;
  std::ostringstream csv;
  csv << "kind,variant,condition,domain,rank1,map\n";
  auto row = [&](const std::string& kind, const std::string& variant, const std::string& cond, const std::string& dom,
                 double r1, double map) {
    csv << kind << ',' << variant << ',' << cond << ',' << dom << ',' << fmt(r1) << ',' << fmt(map) << '\n';
    j["rows"].push_back(
        {{"kind", kind}, {"variant", variant}, {"condition", cond}, {"domain", dom}, {"rank1", r1}, {"map", map}});
  };
  j["rows"] = ordered_json::array();
  for (const std::string vn : {"static", "dcsd"}) {
    double mean_r1 = 0.0, mean_map = 0.0;
    for (std::size_t d = 0; d < nd; ++d) {
      const auto dd = static_cast<std::int64_t>(d);
      const auto& s = report_for(singles[vn][d], dd);
      const auto& jt = report_for(joints[vn], dd);
      row("result", vn, "single", std::to_string(d), s.rank(1), s.map);
      row("result", vn, "joint", std::to_string(d), jt.rank(1), jt.map);
      const double g1 = jt.rank(1) - s.rank(1), gm = jt.map - s.map;
      row("gain", vn, "joint-single", std::to_string(d), g1, gm);
      (vn == "static" ? summary.static_rank1_gain : summary.dcsd_rank1_gain).push_back(g1);
      mean_r1 += g1 / nd;
      mean_map += gm / nd;
    }
    row("gain", vn, "joint-single", "mean", mean_r1, mean_map);
    (vn == "static" ? summary.static_mean_map_gain : summary.dcsd_mean_map_gain) = mean_map;
  }

  // factor ablation on the joint corpus; S+D+C is the dcsd joint run above
  if (base.ablation) {
    struct Factors {
      const char* name;
      bool domain, camera;
    };
    for (const Factors f : {Factors{"S", false, false}, Factors{"S+D", true, false}, Factors{"S+C", false, true},
                            Factors{"S+D+C", true, true}}) {
      Condition c;
      if (f.domain && f.camera) {
        c = joints["dcsd"];
      } else {
        RunConfig cfg = base;
        cfg.variant = Variant::dcsd;
        cfg.use_sample = true;
        cfg.use_domain = f.domain;
        cfg.use_camera = f.camera;
        std::string dir = std::string("ablation_") + f.name;
        std::replace(dir.begin(), dir.end(), '+', '_');
        TrainResult tr{Model(model_spec_for(cfg, corpus), 0), {}, false};
        c = run_condition(dir, cfg, corpus, out / dir, 0, &tr);
        for (const auto& e : tr.log)
          summary.ablation_finite = summary.ablation_finite && std::isfinite(e.loss) && std::isfinite(e.triplet) &&
                                    std::isfinite(e.ce) && std::isfinite(e.domain_ce) && std::isfinite(e.camera_ce);
      }
      double mr1 = 0.0, mmap = 0.0;
      for (std::size_t d = 0; d < nd; ++d) {
        const auto& r = report_for(c, static_cast<std::int64_t>(d));
        summary.ablation_finite = summary.ablation_finite && std::isfinite(r.map);
        row("ablation", "dcsd", f.name, std::to_string(d), r.rank(1), r.map);
        mr1 += r.rank(1) / nd;
        mmap += r.map / nd;
      }
      row("ablation", "dcsd", f.name, "mean", mr1, mmap);
    }
  }

  // channel-branch kernels of the joint DCSD model
  std::filesystem::create_directories(out / "kernels");
  j["separability"] = ordered_json::array();
  for (std::size_t m = 0; m < dcsd_joint.model.num_dcsd(); ++m) {
    const auto rows = export_kernels(dcsd_joint.model, corpus, m, base.export_per_domain);
    std::ostringstream ks;
    write_kernel_csv(ks, rows);
    write_file_atomic(out / "kernels" / ("module" + std::to_string(m) + ".csv"), ks.str());
    const Separability s = kernel_separability(rows);
    summary.separability.push_back(s);
    j["separability"].push_back({{"module", m}, {"intra", s.intra}, {"inter", s.inter}});
  }
  j["static_mean_map_gain"] = summary.static_mean_map_gain;
  j["dcsd_mean_map_gain"] = summary.dcsd_mean_map_gain;
  j["ablation_finite"] = summary.ablation_finite;
  summary.csv = csv.str();
  summary.json = j.dump(2) + "\n";
  write_file_atomic(out / "summary.csv", summary.csv);
  write_file_atomic(out / "summary.json", summary.json);
  return summary;
}

}  // namespace dcsd
