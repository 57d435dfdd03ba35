#include "dcsd/cli.hpp"

#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "dcsd/checkpoint.hpp"
#include "dcsd/error.hpp"
#include "dcsd/harness.hpp"
#include "json.hpp"

namespace dcsd {

namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig c = g.config.empty() ? default_run_config() : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out = g.out;
  return c;
}

fs::path require_out(const RunConfig& c) {
  if (c.out.empty()) throw ConfigError("an output directory is required (--out or config \"out\")");
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory " + c.out + ": " + ec.message());
  return c.out;
}

Corpus load_manifests(const std::vector<std::string>& manifests) {
  if (manifests.empty()) throw ConfigError("at least one --manifest is required");
  std::vector<Corpus> parts;
  for (const auto& m : manifests) parts.push_back(load_corpus(m));
  return parts.size() == 1 ? std::move(parts.front()) : merge_corpora(parts);
}

Model load_checkpoint_model(const std::string& path) {
  try {
    return load_model(path);
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError("cannot load checkpoint " + path + ": " + e.what());
  }
}

void cmd_synth(const Globals& g, std::ostream& out) {
  const RunConfig c = resolve_config(g);
  const fs::path dir = require_out(c);
  const Corpus corpus = generate_synthetic(c.domains, c.image, c.seed);
  const auto rows = write_corpus(corpus, dir, c.blob_format);
  ordered_json data = ordered_json::parse(config_to_json(c));
  const std::string spec_text = data["domains"].dump() + data["image"].dump() + data["blob_format"].dump();
  ordered_json p;
  p["seed"] = c.seed;
  p["spec_hash"] = fnv1a_hex(spec_text);
  p["manifest_hash"] = fnv1a_hex(read_file(dir / "manifest.csv"));
  std::string blobs;
  for (const auto& r : rows) blobs += read_file(dir / r.path);
  p["blob_hash"] = fnv1a_hex(blobs);
  p["num_rows"] = rows.size();
  p["camera_counts"] = corpus.camera_counts;
  p["camera_offsets"] = corpus.camera_offsets;
  p["num_global_cameras"] = corpus.num_global_cameras();
  p["domains"] = data["domains"];
  p["image"] = data["image"];
  write_file_atomic(dir / "provenance.json", p.dump(2) + "\n");
  out << p.dump(2) << '\n';
}

void cmd_train(const Globals& g, const std::vector<std::string>& manifests, std::optional<std::int64_t> domain,
               std::ostream& out) {
  const RunConfig c = resolve_config(g);
  const fs::path dir = require_out(c);
  Corpus corpus = load_manifests(manifests);
  if (domain) corpus = select_domain(corpus, *domain);
  const TrainResult r = train(c, corpus);
  save_model(r.model, (dir / "model.ckpt").string());
  write_file_atomic(dir / "train_log.csv", train_log_csv(r));
  ordered_json j;
  j["checkpoint"] = (dir / "model.ckpt").string();
  j["epochs"] = r.log.size();
  j["final_loss"] = r.log.empty() ? 0.0 : r.log.back().loss;
  out << j.dump(2) << '\n';
}

void cmd_eval(const Globals& g, const std::string& checkpoint, const std::vector<std::string>& manifests,
              const std::string& cross, std::ostream& out) {
  std::optional<bool> override_cross;
  if (cross == "on") override_cross = true;
  else if (cross == "off") override_cross = false;
  else if (cross != "auto") throw ConfigError("--cross-camera must be auto, on or off");
  Model model = load_checkpoint_model(checkpoint);
  const Corpus corpus = load_manifests(manifests);
  const auto reports = evaluate_domains(model, corpus, override_cross);
  ordered_json j;
  j["checkpoint"] = checkpoint;
  j["domains"] = ordered_json::array();
  for (const auto& dr : reports) {
    ordered_json r = ordered_json::parse(report_to_json(dr.report));
    r["domain"] = dr.domain;
    j["domains"].push_back(r);
  }
  if (!g.out.empty()) {
    const fs::path dir = g.out;
    fs::create_directories(dir);
    for (const auto& dr : reports) {
      const std::string d = std::to_string(dr.domain);
      write_file_atomic(dir / ("report_d" + d + ".json"), report_to_json(dr.report));
      std::ostringstream pq;
      const auto q = corpus.indices(Split::query, dr.domain);
      write_per_query_csv(pq, dr.report, retrieval_items(corpus, q));
      write_file_atomic(dir / ("per_query_d" + d + ".csv"), pq.str());
    }
    write_file_atomic(dir / "report.json", j.dump(2) + "\n");
  }
  out << j.dump(2) << '\n';
}

void cmd_profile(const Globals& g, const std::string& spec_path, std::ostream& out) {
  const ModelSpec spec = load_spec(spec_path);
  const ProfileReport p = profile(spec);
  ordered_json j;
  j["name"] = spec.name;
  j["params"] = p.params;
  j["macs"] = p.macs;
  j["num_dcsd"] = count_dcsd_layers(spec);
  j["layers"] = ordered_json::array();
  for (const auto& l : p.layers)
    j["layers"].push_back({{"index", l.index}, {"type", layer_type_name(l.type)}, {"params", l.params}, {"macs", l.macs}});
  if (!g.out.empty()) {
    fs::create_directories(g.out);
    write_file_atomic(fs::path(g.out) / "profile.json", j.dump(2) + "\n");
  }
  out << j.dump(2) << '\n';
}

void cmd_export(const Globals& g, const std::string& checkpoint, const std::vector<std::string>& manifests,
                const std::vector<std::size_t>& modules, std::size_t per_domain, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("export-kernels needs --out");
  Model model = load_checkpoint_model(checkpoint);
  const Corpus corpus = load_manifests(manifests);
  std::vector<std::size_t> selected = modules;
  if (selected.empty())
    for (std::size_t m = 0; m < model.num_dcsd(); ++m) selected.push_back(m);
  if (model.num_dcsd() == 0) throw VariantError("kernel export needs a dcsd checkpoint; " + checkpoint + " is static");
  fs::create_directories(g.out);
  ordered_json j;
  j["files"] = ordered_json::array();
  for (std::size_t m : selected) {
    const auto rows = export_kernels(model, corpus, m, per_domain);
    std::ostringstream os;
    write_kernel_csv(os, rows);
    const fs::path file = fs::path(g.out) / ("kernels_module" + std::to_string(m) + ".csv");
    write_file_atomic(file, os.str());
    const Separability s = kernel_separability(rows);
    j["files"].push_back({{"module", m}, {"path", file.string()}, {"rows", rows.size()}, {"intra", s.intra},
                          {"inter", s.inter}});
  }
  out << j.dump(2) << '\n';
}

void cmd_experiment(const Globals& g, std::ostream& out) {
  const RunConfig c = resolve_config(g);
  const fs::path dir = require_out(c);
  const ExperimentSummary s = run_experiment(c, dir);
  out << s.json;
}

void print_error(std::ostream& err, const std::string& kind, const std::string& message) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  err << j.dump() << '\n';
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic-convolution person re-identification toolkit"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "run config JSON");
  auto* seed_opt = app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--out", g.out, "output directory");

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus (manifest, blobs, provenance)");

  std::vector<std::string> manifests;
  std::optional<std::int64_t> domain;
  auto* train_cmd = app.add_subcommand("train", "train a model on one or more manifests");
  train_cmd->add_option("--manifest", manifests, "manifest CSV (repeat to train jointly)")->required();
  train_cmd->add_option("--domain", domain, "train on this domain only");

  std::string checkpoint, cross = "auto";
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint per domain");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--manifest", manifests)->required();
  eval_cmd->add_option("--cross-camera", cross, "auto|on|off");

  std::string spec_path;
  auto* profile_cmd = app.add_subcommand("profile", "parameter and MAC count of a model spec");
  profile_cmd->add_option("spec", spec_path, "model spec JSON")->required();

  std::vector<std::size_t> modules;
  std::size_t per_domain = 20;
  auto* export_cmd = app.add_subcommand("export-kernels", "write channel-branch kernels per DCSD module");
  export_cmd->add_option("--checkpoint", checkpoint)->required();
  export_cmd->add_option("--manifest", manifests)->required();
  export_cmd->add_option("--modules", modules, "module indices (default: all)")->delimiter(',');
  export_cmd->add_option("--per-domain", per_domain, "samples per domain");

  auto* experiment = app.add_subcommand("experiment", "joint-vs-single experiment with factor ablation");
  auto* config_cmd = app.add_subcommand("config", "print the resolved run config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return 64;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (synth->parsed()) cmd_synth(g, out);
    else if (train_cmd->parsed()) cmd_train(g, manifests, domain, out);
    else if (eval_cmd->parsed()) cmd_eval(g, checkpoint, manifests, cross, out);
    else if (profile_cmd->parsed()) cmd_profile(g, spec_path, out);
    else if (export_cmd->parsed()) cmd_export(g, checkpoint, manifests, modules, per_domain, out);
    else if (experiment->parsed()) cmd_experiment(g, out);
    else if (config_cmd->parsed()) out << config_to_json(resolve_config(g));
  } catch (const Error& e) {
    print_error(err, e.kind(), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error(err, "internal", e.what());
    return 3;
  }
  return 0;
}

}  // namespace dcsd
