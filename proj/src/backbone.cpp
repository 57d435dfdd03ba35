#include "dcsd/backbone.hpp"

#include "json.hpp"

#include "dcsd/error.hpp"

namespace dcsd {

using Json = nlohmann::ordered_json;
using Dims = std::vector<std::size_t>;

namespace {

const std::pair<LayerType, const char*> kTypeNames[] = {
    {LayerType::conv, "conv"},       {LayerType::dcsd, "dcsd"}, {LayerType::bn, "bn"},
    {LayerType::relu, "relu"},       {LayerType::avgpool, "avgpool"}, {LayerType::maxpool, "maxpool"},
    {LayerType::gap, "gap"},         {LayerType::fc, "fc"},     {LayerType::bottleneck, "bottleneck"},
};

}  // namespace

std::string layer_type_name(LayerType t) {
  for (const auto& [type, name] : kTypeNames)
    if (type == t) return name;
  return "?";
}

LayerType parse_layer_type(const std::string& name) {
  for (const auto& [type, n] : kTypeNames)
    if (name == n) return type;
  throw SpecError("unknown layer type '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
  LayerSpec l;
  l.type = LayerType::conv;
  l.in = in, l.out = out, l.k = k, l.stride = stride, l.pad = pad;
  return l;
}
LayerSpec LayerSpec::dcsd(std::size_t channels, std::size_t k) {
  LayerSpec l;
  l.type = LayerType::dcsd;
  l.in = l.out = channels;
  l.k = k;
  l.pad = (k - 1) / 2;
  return l;
}
LayerSpec LayerSpec::bn(std::size_t channels) {
  LayerSpec l;
  l.type = LayerType::bn;
  l.in = l.out = channels;
  return l;
}
LayerSpec LayerSpec::relu() { return LayerSpec{}; }
LayerSpec LayerSpec::avgpool(std::size_t k) {
  LayerSpec l;
  l.type = LayerType::avgpool;
  l.k = l.stride = k;
  return l;
}
LayerSpec LayerSpec::maxpool(std::size_t k, std::size_t stride, std::size_t pad) {
  LayerSpec l;
  l.type = LayerType::maxpool;
  l.k = k, l.stride = stride, l.pad = pad;
  return l;
}
LayerSpec LayerSpec::gap() {
  LayerSpec l;
  l.type = LayerType::gap;
  return l;
}
LayerSpec LayerSpec::fc(std::size_t in, std::size_t out, bool bias) {
  LayerSpec l;
  l.type = LayerType::fc;
  l.in = in, l.out = out, l.bias = bias;
  return l;
}
LayerSpec LayerSpec::bottleneck(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride,
                                LayerType inner) {
  LayerSpec l;
  l.type = LayerType::bottleneck;
  l.in = in, l.mid = mid, l.out = out, l.stride = stride, l.k = 3, l.inner = inner;
  return l;
}

BottleneckParts expand_bottleneck(const LayerSpec& b) {
  BottleneckParts p;
  const bool dyn = b.inner == LayerType::dcsd;
  p.main.push_back(LayerSpec::conv(b.in, b.mid, 1, dyn ? b.stride : 1, 0));
  p.main.push_back(LayerSpec::bn(b.mid));
  p.main.push_back(LayerSpec::relu());
  p.main.push_back(dyn ? LayerSpec::dcsd(b.mid, b.k) : LayerSpec::conv(b.mid, b.mid, b.k, b.stride, (b.k - 1) / 2));
  p.main.push_back(LayerSpec::bn(b.mid));
  p.main.push_back(LayerSpec::relu());
  p.main.push_back(LayerSpec::conv(b.mid, b.out, 1, 1, 0));
  p.main.push_back(LayerSpec::bn(b.out));
  if (b.in != b.out || b.stride != 1) {
    p.shortcut.push_back(LayerSpec::conv(b.in, b.out, 1, b.stride, 0));
    p.shortcut.push_back(LayerSpec::bn(b.out));
  }
  return p;
}

// --- shape tracing ----------------------------------------------------------

namespace {

std::string dims_str(const Dims& d) { return shape_str(d); }

Dims step_shape(const LayerSpec& l, const Dims& in, const std::string& where) {
  auto fail = [&](const std::string& why) -> Dims {
    throw SpecError(where + " (" + layer_type_name(l.type) + "): " + why + "; input " + dims_str(in));
  };
  auto need_map = [&] {
    if (in.size() != 3) fail("needs a C,H,W activation");
  };
  auto window = [&](std::size_t extent, std::size_t k, std::size_t stride, std::size_t pad) -> std::size_t {
    if (stride == 0) fail("stride must be >= 1");
    if (extent + 2 * pad < k) fail("window larger than padded input");
    return (extent + 2 * pad - k) / stride + 1;
  };
  switch (l.type) {
    case LayerType::conv:
      need_map();
      if (in[0] != l.in) fail("expects " + std::to_string(l.in) + " input channels");
      if (l.out == 0) fail("output channels must be >= 1");
      if (l.k % 2 == 0) fail("kernel size must be odd");
      return {l.out, window(in[1], l.k, l.stride, l.pad), window(in[2], l.k, l.stride, l.pad)};
    case LayerType::dcsd:
      need_map();
      if (in[0] != l.in) fail("expects " + std::to_string(l.in) + " channels");
      if (l.in < 4 || l.in % 4 != 0) fail("channels must be a positive multiple of 4");
      if (l.k % 2 == 0) fail("kernel size must be odd");
      return in;
    case LayerType::bn:
      if (in.size() != 3 && in.size() != 1) fail("needs C,H,W or flat input");
      if (in[0] != l.in) fail("expects " + std::to_string(l.in) + " channels");
      return in;
    case LayerType::relu:
      return in;
    case LayerType::avgpool:
      need_map();
      if (l.k == 0 || in[1] % l.k != 0 || in[2] % l.k != 0) fail("extents must divide by the window");
      return {in[0], in[1] / l.k, in[2] / l.k};
    case LayerType::maxpool:
      need_map();
      return {in[0], window(in[1], l.k, l.stride, l.pad), window(in[2], l.k, l.stride, l.pad)};
    case LayerType::gap:
      need_map();
      return {in[0]};
    case LayerType::fc: {
      const std::size_t flat = numel(in);
      if (flat != l.in) fail("expects " + std::to_string(l.in) + " input features, got " + std::to_string(flat));
      if (l.out == 0) fail("output features must be >= 1");
      return {l.out};
    }
    case LayerType::bottleneck: {
      need_map();
      if (in[0] != l.in) fail("expects " + std::to_string(l.in) + " input channels");
      if (l.inner != LayerType::conv && l.inner != LayerType::dcsd) fail("inner op must be conv or dcsd");
      const auto parts = expand_bottleneck(l);
      Dims main = in, skip = in;
      for (const auto& p : parts.main) main = step_shape(p, main, where);
      for (const auto& p : parts.shortcut) skip = step_shape(p, skip, where);
      if (main != skip) fail("main path " + dims_str(main) + " and shortcut " + dims_str(skip) + " differ");
      return main;
    }
  }
  return fail("unhandled layer");
}

}  // namespace

std::vector<Dims> trace_shapes(const ModelSpec& spec) {
  Dims cur(spec.input_shape.begin(), spec.input_shape.end());
  for (std::size_t e : cur)
    if (e == 0) throw SpecError("input_shape extents must be >= 1");
  std::vector<Dims> shapes;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    cur = step_shape(spec.layers[i], cur, "layer " + std::to_string(i));
    shapes.push_back(cur);
  }
  if (cur.size() != 1)
    throw SpecError("layer " + std::to_string(spec.layers.size()) + " (end): body must end in a flat feature (add gap or fc), got " +
                    dims_str(cur));
  if (cur[0] != spec.embedding_dim)
    throw SpecError("layer " + std::to_string(spec.layers.size()) + " (end): body width " + std::to_string(cur[0]) +
                    " differs from embedding_dim " + std::to_string(spec.embedding_dim));
  if (count_dcsd_layers(spec) > 0 && (spec.num_domains == 0 || spec.num_cameras == 0))
    throw SpecError("dcsd layers need num_domains and num_cameras >= 1");
  return shapes;
}

std::size_t count_dcsd_layers(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const auto& l : spec.layers)
    n += l.type == LayerType::dcsd || (l.type == LayerType::bottleneck && l.inner == LayerType::dcsd);
  return n;
}

ModelSpec to_dcsd_variant(const ModelSpec& spec) {
  ModelSpec out = spec;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    if (l.type == LayerType::bottleneck && l.k == 3) {
      l.inner = LayerType::dcsd;
    } else if (l.type == LayerType::conv && l.k == 3 && l.in == l.out) {
      if (l.stride != 1) throw SpecError("layer " + std::to_string(i) + " (conv): strided 3x3 has no DCSD form");
      l = LayerSpec::dcsd(l.in, 3);
    }
  }
  if (out.name.find("dcsd") == std::string::npos) out.name += "_dcsd";
  return out;
}

ModelSpec tinynet_spec(bool dcsd, std::size_t num_pids, std::size_t num_domains, std::size_t num_cameras,
                       std::array<std::size_t, 3> input_shape) {
  ModelSpec s;
  s.name = dcsd ? "tinynet_dcsd" : "tinynet";
  s.input_shape = input_shape;
  s.num_pids = num_pids;
  s.num_domains = num_domains;
  s.num_cameras = num_cameras;
  s.bnneck = true;
  const std::size_t widths[] = {16, 32, 64};
  s.layers = {LayerSpec::conv(input_shape[0], 16, 3, 1, 1), LayerSpec::bn(16), LayerSpec::relu()};
  std::size_t prev = 16;
  for (std::size_t st = 0; st < 3; ++st) {
    const std::size_t c = widths[st];
    s.layers.push_back(LayerSpec::conv(prev, c, 1, 1, 0));
    s.layers.push_back(dcsd ? LayerSpec::dcsd(c, 3) : LayerSpec::conv(c, c, 3, 1, 1));
    s.layers.push_back(LayerSpec::relu());
    s.layers.push_back(LayerSpec::bn(c));
    if (st < 2) s.layers.push_back(LayerSpec::avgpool(2));
    prev = c;
  }
  s.layers.push_back(LayerSpec::gap());
  s.embedding_dim = prev;
  return s;
}

ModelSpec resnet50_spec(bool dcsd, std::array<std::size_t, 3> input_shape) {
  ModelSpec s;
  s.name = dcsd ? "resnet50_dcsd" : "resnet50";
  s.input_shape = input_shape;
  s.bnneck = false;
  s.num_pids = 0;
  s.num_domains = 5;
  s.num_cameras = 32;
  s.layers = {LayerSpec::conv(input_shape[0], 64, 7, 2, 3), LayerSpec::bn(64), LayerSpec::relu(),
              LayerSpec::maxpool(3, 2, 1)};
  const std::size_t blocks[] = {3, 4, 6, 3};
  std::size_t in = 64;
  for (std::size_t st = 0; st < 4; ++st) {
    const std::size_t mid = 64u << st, out = mid * 4;
    for (std::size_t b = 0; b < blocks[st]; ++b) {
      const std::size_t stride = (b == 0 && st > 0) ? 2 : 1;
      s.layers.push_back(LayerSpec::bottleneck(in, mid, out, stride, dcsd ? LayerType::dcsd : LayerType::conv));
      in = out;
    }
  }
  s.layers.push_back(LayerSpec::gap());
  s.layers.push_back(LayerSpec::fc(in, 1000, true));
  s.embedding_dim = 1000;
  return s;
}

// --- JSON -----------------------------------------------------------------------

namespace {

Json layer_to_json(const LayerSpec& l) {
  Json j;
  j["type"] = layer_type_name(l.type);
  switch (l.type) {
    case LayerType::conv:
      j["in"] = l.in, j["out"] = l.out, j["k"] = l.k, j["stride"] = l.stride, j["pad"] = l.pad;
      break;
    case LayerType::dcsd:
      j["channels"] = l.in, j["k"] = l.k;
      break;
    case LayerType::bn:
      j["channels"] = l.in;
      break;
    case LayerType::avgpool:
      j["k"] = l.k;
      break;
    case LayerType::maxpool:
      j["k"] = l.k, j["stride"] = l.stride, j["pad"] = l.pad;
      break;
    case LayerType::fc:
      j["in"] = l.in, j["out"] = l.out, j["bias"] = l.bias;
      break;
    case LayerType::bottleneck:
      j["in"] = l.in, j["mid"] = l.mid, j["out"] = l.out, j["stride"] = l.stride;
      j["op"] = layer_type_name(l.inner);
      break;
    case LayerType::relu:
    case LayerType::gap:
      break;
  }
  return j;
}

std::size_t req(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw SpecError(where + ": missing field '" + key + "'");
  if (!j[key].is_number_unsigned()) throw SpecError(where + ": field '" + key + "' must be a non-negative integer");
  return j[key].get<std::size_t>();
}

std::size_t opt(const Json& j, const char* key, std::size_t fallback, const std::string& where) {
  return j.contains(key) ? req(j, key, where) : fallback;
}

LayerSpec layer_from_json(const Json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw SpecError(where + ": layer must be an object with a string 'type'");
  LayerType t;
  try {
    t = parse_layer_type(j["type"].get<std::string>());
  } catch (const SpecError& e) {
    throw SpecError(where + ": " + e.what());
  }
  switch (t) {
    case LayerType::conv: {
      const std::size_t k = req(j, "k", where);
      return LayerSpec::conv(req(j, "in", where), req(j, "out", where), k, opt(j, "stride", 1, where),
                             opt(j, "pad", (k - 1) / 2, where));
    }
    case LayerType::dcsd:
      return LayerSpec::dcsd(req(j, "channels", where), opt(j, "k", 3, where));
    case LayerType::bn:
      return LayerSpec::bn(req(j, "channels", where));
    case LayerType::relu:
      return LayerSpec::relu();
    case LayerType::avgpool:
      return LayerSpec::avgpool(opt(j, "k", 2, where));
    case LayerType::maxpool:
      return LayerSpec::maxpool(req(j, "k", where), opt(j, "stride", 2, where), opt(j, "pad", 0, where));
    case LayerType::gap:
      return LayerSpec::gap();
    case LayerType::fc:
      return LayerSpec::fc(req(j, "in", where), req(j, "out", where), j.value("bias", false));
    case LayerType::bottleneck: {
      const LayerType inner = parse_layer_type(j.value("op", std::string("conv")));
      return LayerSpec::bottleneck(req(j, "in", where), req(j, "mid", where), req(j, "out", where),
                                   opt(j, "stride", 1, where), inner);
    }
  }
  throw SpecError(where + ": unhandled layer type");
}

}  // namespace

std::string spec_to_json(const ModelSpec& spec) {
  Json j;
  j["name"] = spec.name;
  j["input_shape"] = spec.input_shape;
  j["embedding_dim"] = spec.embedding_dim;
  j["num_pids"] = spec.num_pids;
  j["bnneck"] = spec.bnneck;
  j["num_domains"] = spec.num_domains;
  j["num_cameras"] = spec.num_cameras;
  j["dcsd"] = {{"kernel_normalization",
                spec.dcsd.kernel_normalization == KernelNormalization::none ? "none" : "softmax"},
               {"use_sample", spec.dcsd.use_sample},
               {"use_domain", spec.dcsd.use_domain},
               {"use_camera", spec.dcsd.use_camera},
               {"stop_gradient", spec.dcsd.stop_gradient}};
  j["layers"] = Json::array();
  for (const auto& l : spec.layers) j["layers"].push_back(layer_to_json(l));
  return j.dump(2) + "\n";
}

ModelSpec spec_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("model spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SpecError("model spec must be a JSON object");
  ModelSpec s;
  try {
    s.name = j.value("name", std::string("model"));
    if (j.contains("input_shape")) s.input_shape = j["input_shape"].get<std::array<std::size_t, 3>>();
    s.embedding_dim = req(j, "embedding_dim", "spec");
    s.num_pids = opt(j, "num_pids", 0, "spec");
    s.bnneck = j.value("bnneck", true);
    s.num_domains = opt(j, "num_domains", 1, "spec");
    s.num_cameras = opt(j, "num_cameras", 1, "spec");
    if (j.contains("dcsd")) {
      const Json& d = j["dcsd"];
      const std::string norm = d.value("kernel_normalization", std::string("none"));
      if (norm != "none" && norm != "softmax") throw SpecError("dcsd.kernel_normalization must be none or softmax");
      s.dcsd.kernel_normalization =
          norm == "none" ? KernelNormalization::none : KernelNormalization::softmax_over_k2;
      s.dcsd.use_sample = d.value("use_sample", true);
      s.dcsd.use_domain = d.value("use_domain", true);
      s.dcsd.use_camera = d.value("use_camera", true);
      s.dcsd.stop_gradient = d.value("stop_gradient", true);
    }
    if (!j.contains("layers") || !j["layers"].is_array()) throw SpecError("model spec needs a 'layers' array");
    for (std::size_t i = 0; i < j["layers"].size(); ++i)
      s.layers.push_back(layer_from_json(j["layers"][i], "layer " + std::to_string(i)));
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("model spec field has the wrong type: ") + e.what());
  }
  return s;
}

ModelSpec load_spec(const std::string& path) { return spec_from_json(read_file(path)); }

void save_spec(const ModelSpec& spec, const std::string& path) { write_file_atomic(path, spec_to_json(spec)); }

// --- profiler ---------------------------------------------------------------------

std::uint64_t dcsd_param_count(std::size_t channels, std::size_t k, std::size_t domains, std::size_t cameras) {
  const std::uint64_t c = channels, h = channels / 4, kk = k * k;
  const std::uint64_t mlp = (c * h + h) + (h * c + c);
  const std::uint64_t heads = (c * domains + domains) + (c * cameras + cameras);
  const std::uint64_t spatial = c * kk;
  const std::uint64_t channel = (c * h + h) + (h * kk * c + kk * c);
  return 2 * mlp + heads + spatial + channel;
}

namespace {

void profile_layer(const LayerSpec& l, const Dims& in, const ModelSpec& spec, std::uint64_t& params,
                   std::uint64_t& macs) {
  const Dims out = step_shape(l, in, "profile");
  switch (l.type) {
    case LayerType::conv: {
      const std::uint64_t p = static_cast<std::uint64_t>(l.k) * l.k * l.in * l.out;
      params += p;
      macs += p * out[1] * out[2];
      break;
    }
    case LayerType::dcsd: {
      const std::uint64_t c = l.in, h = c / 4, kk = l.k * l.k, hw = in[1] * in[2];
      params += dcsd_param_count(l.in, l.k, spec.num_domains, spec.num_cameras);
      macs += 2 * (c * h + h * c);                       // domain and camera MLPs
      macs += c * (spec.num_domains + spec.num_cameras);  // heads
      macs += c * kk * hw;                                // spatial 1x1 branch
      macs += c * h + h * kk * c;                         // channel branch
      macs += kk * c * hw;                                // kernel products
      macs += kk * c * hw;                                // depthwise application
      break;
    }
    case LayerType::bn:
      params += 2 * l.in;
      break;
    case LayerType::fc:
      params += static_cast<std::uint64_t>(l.in) * l.out + (l.bias ? l.out : 0);
      macs += static_cast<std::uint64_t>(l.in) * l.out;
      break;
    case LayerType::bottleneck: {
      const auto parts = expand_bottleneck(l);
      Dims cur = in;
      for (const auto& p : parts.main) {
        profile_layer(p, cur, spec, params, macs);
        cur = step_shape(p, cur, "profile");
      }
      cur = in;
      for (const auto& p : parts.shortcut) {
        profile_layer(p, cur, spec, params, macs);
        cur = step_shape(p, cur, "profile");
      }
      break;
    }
    case LayerType::relu:
    case LayerType::avgpool:
    case LayerType::maxpool:
    case LayerType::gap:
      break;
  }
}

}  // namespace

ProfileReport profile(const ModelSpec& spec) {
  const auto shapes = trace_shapes(spec);
  ProfileReport r;
  Dims cur(spec.input_shape.begin(), spec.input_shape.end());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerProfile lp{i, spec.layers[i].type, 0, 0};
    profile_layer(spec.layers[i], cur, spec, lp.params, lp.macs);
    r.params += lp.params;
    r.macs += lp.macs;
    r.layers.push_back(lp);
    cur = shapes[i];
  }
  if (spec.bnneck) r.params += 2 * spec.embedding_dim;
  if (spec.num_pids > 0) {
    r.params += static_cast<std::uint64_t>(spec.embedding_dim) * spec.num_pids;
    r.macs += static_cast<std::uint64_t>(spec.embedding_dim) * spec.num_pids;
  }
  return r;
}

// --- model ------------------------------------------------------------------------

struct Model::Unit {
  LayerSpec spec;
  Conv conv;
  std::shared_ptr<DcsdLayer> dcsd;
  std::shared_ptr<BatchNormState> bn;
  Linear fc;
  std::vector<Unit> main;
  std::vector<Unit> shortcut;
};

namespace {

using Unit = Model::Unit;

Unit build_unit(const LayerSpec& l, const ModelSpec& spec, Rng& rng) {
  Unit u;
  u.spec = l;
  switch (l.type) {
    case LayerType::conv:
      u.conv = Conv::make(l.in, l.out, l.k, l.stride, l.pad, rng);
      break;
    case LayerType::dcsd: {
      DcsdConfig cfg;
      cfg.channels = l.in;
      cfg.kernel_size = l.k;
      cfg.num_domains = spec.num_domains;
      cfg.num_global_cameras = spec.num_cameras;
      cfg.kernel_normalization = spec.dcsd.kernel_normalization;
      cfg.use_sample = spec.dcsd.use_sample;
      cfg.use_domain = spec.dcsd.use_domain;
      cfg.use_camera = spec.dcsd.use_camera;
      cfg.stop_gradient = spec.dcsd.stop_gradient;
      u.dcsd = std::make_shared<DcsdLayer>(cfg, rng);
      break;
    }
    case LayerType::bn:
      u.bn = std::make_shared<BatchNormState>(BatchNormState::make(l.in));
      break;
    case LayerType::fc:
      u.fc = Linear::make(l.in, l.out, l.bias, rng);
      break;
    case LayerType::bottleneck: {
      const auto parts = expand_bottleneck(l);
      for (const auto& p : parts.main) u.main.push_back(build_unit(p, spec, rng));
      for (const auto& p : parts.shortcut) u.shortcut.push_back(build_unit(p, spec, rng));
      break;
    }
    case LayerType::relu:
    case LayerType::avgpool:
    case LayerType::maxpool:
    case LayerType::gap:
      break;
  }
  return u;
}

struct ForwardCtx {
  Mode mode;
  bool retain;
  ModelOutput* out;
};

Tensor run_unit(const Unit& u, const Tensor& x, ForwardCtx& ctx) {
  switch (u.spec.type) {
    case LayerType::conv:
      return u.conv.forward(x);
    case LayerType::dcsd: {
      DcsdForwardOutput o = u.dcsd->forward(x);
      ctx.out->domain_logits.push_back(o.domain_logits);
      ctx.out->camera_logits.push_back(o.camera_logits);
      Tensor f = o.feature;
      if (ctx.retain) ctx.out->dcsd.push_back(std::move(o));
      return f;
    }
    case LayerType::bn:
      return batch_norm(x, *u.bn, ctx.mode);
    case LayerType::relu:
      return relu(x);
    case LayerType::avgpool:
      return avg_pool2d(x, u.spec.k);
    case LayerType::maxpool:
      return max_pool2d(x, u.spec.k, u.spec.stride, u.spec.pad);
    case LayerType::gap:
      return global_avg_pool(x);
    case LayerType::fc:
      return u.fc.forward(x.rank() == 2 ? x : reshape(x, {x.dim(0), numel(x.shape()) / x.dim(0)}));
    case LayerType::bottleneck: {
      Tensor m = x, s = x;
      for (const auto& sub : u.main) m = run_unit(sub, m, ctx);
      for (const auto& sub : u.shortcut) s = run_unit(sub, s, ctx);
      return relu(add(m, s));
    }
  }
  throw SpecError("unhandled layer");
}

// A parameter (tensor) or BN running statistic (buffer) with its state name.
struct Slot {
  std::string name;
  Tensor tensor;
  std::vector<double>* buffer = nullptr;
};

void unit_slots(const Unit& u, const std::string& prefix, bool buffers, std::vector<Slot>& out) {
  std::vector<NamedTensor> named;
  switch (u.spec.type) {
    case LayerType::conv:
      u.conv.collect(named, prefix + ".conv");
      break;
    case LayerType::dcsd:
      u.dcsd->collect(named, prefix + ".dcsd");
      break;
    case LayerType::bn:
      collect_batch_norm(*u.bn, named, prefix + ".bn");
      break;
    case LayerType::fc:
      u.fc.collect(named, prefix + ".fc");
      break;
    default:
      break;
  }
  for (auto& nt : named) out.push_back({nt.name, nt.tensor, nullptr});
  if (buffers && u.bn) {
    out.push_back({prefix + ".bn.running_mean", Tensor(), &u.bn->running_mean});
    out.push_back({prefix + ".bn.running_var", Tensor(), &u.bn->running_var});
  }
  for (std::size_t i = 0; i < u.main.size(); ++i)
    unit_slots(u.main[i], prefix + ".main." + std::to_string(i), buffers, out);
  for (std::size_t i = 0; i < u.shortcut.size(); ++i)
    unit_slots(u.shortcut[i], prefix + ".shortcut." + std::to_string(i), buffers, out);
}

std::vector<Slot> model_slots(const std::vector<Unit>& units, const std::shared_ptr<BatchNormState>& neck,
                              const Linear& classifier, bool buffers) {
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < units.size(); ++i) unit_slots(units[i], "layers." + std::to_string(i), buffers, slots);
  if (neck) {
    slots.push_back({"neck.gamma", neck->gamma, nullptr});
    slots.push_back({"neck.beta", neck->beta, nullptr});
    if (buffers) {
      slots.push_back({"neck.running_mean", Tensor(), &neck->running_mean});
      slots.push_back({"neck.running_var", Tensor(), &neck->running_var});
    }
  }
  if (classifier.weight.defined()) slots.push_back({"classifier.weight", classifier.weight, nullptr});
  return slots;
}

void count_dcsd_units(const Unit& u, std::size_t& n) {
  n += u.spec.type == LayerType::dcsd;
  for (const auto& s : u.main) count_dcsd_units(s, n);
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  trace_shapes(spec_);
  if (count_dcsd_layers(spec_) > 0 && !spec_.dcsd.use_sample && !spec_.dcsd.use_domain && !spec_.dcsd.use_camera)
    throw SpecError("dcsd: at least one of sample/domain/camera factors must be enabled");
  Rng rng(seed);
  for (const auto& l : spec_.layers) units_.push_back(build_unit(l, spec_, rng));
  if (spec_.bnneck) neck_ = std::make_shared<BatchNormState>(BatchNormState::make(spec_.embedding_dim));
  if (spec_.num_pids > 0) classifier_ = Linear::make(spec_.embedding_dim, spec_.num_pids, false, rng);
}

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

std::size_t Model::num_dcsd() const {
  std::size_t n = 0;
  for (const auto& u : units_) count_dcsd_units(u, n);
  return n;
}

ModelOutput Model::forward(const Tensor& images, Mode mode) {
  const auto& is = spec_.input_shape;
  if (images.rank() != 4 || images.dim(1) != is[0] || images.dim(2) != is[1] || images.dim(3) != is[2])
    throw ShapeError("model expects images [N," + std::to_string(is[0]) + "," + std::to_string(is[1]) + "," +
                     std::to_string(is[2]) + "], got " + shape_str(images.shape()));
  ModelOutput out;
  ForwardCtx ctx{mode, retain_kernels_, &out};
  Tensor x = images;
  for (const auto& u : units_) x = run_unit(u, x, ctx);
  if (x.rank() != 2) x = reshape(x, {x.dim(0), numel(x.shape()) / x.dim(0)});
  if (mode == Mode::eval) {
    out.embedding = neck_ ? batch_norm(x, *neck_, Mode::eval) : x;
    return out;
  }
  out.embedding = x;
  if (classifier_.weight.defined()) out.logits = classifier_.forward(neck_ ? batch_norm(x, *neck_, Mode::train) : x);
  else if (neck_) batch_norm(x, *neck_, Mode::train);  // keeps the neck's running statistics current
  return out;
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  for (auto& s : model_slots(units_, neck_, classifier_, false)) out.push_back({s.name, s.tensor});
  return out;
}

std::vector<NamedTensor> Model::state() const {
  std::vector<NamedTensor> out;
  for (auto& s : model_slots(units_, neck_, classifier_, true)) {
    if (s.buffer) out.push_back({s.name, Tensor({s.buffer->size()}, *s.buffer)});
    else out.push_back({s.name, s.tensor});
  }
  return out;
}

void Model::load_state(const std::vector<NamedTensor>& entries) {
  auto slots = model_slots(units_, neck_, classifier_, true);
  if (entries.size() != slots.size())
    throw CheckpointError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& e = entries[i];
    auto& s = slots[i];
    if (e.name != s.name) throw CheckpointError("checkpoint entry " + std::to_string(i) + " is '" + e.name +
                                                "', model expects '" + s.name + "'");
    const Shape want = s.buffer ? Shape{s.buffer->size()} : s.tensor.shape();
    if (e.tensor.shape() != want)
      throw CheckpointError("checkpoint entry '" + e.name + "' has shape " + shape_str(e.tensor.shape()) +
                            ", model expects " + shape_str(want));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto src = entries[i].tensor.data();
    if (slots[i].buffer) slots[i].buffer->assign(src.begin(), src.end());
    else std::copy(src.begin(), src.end(), slots[i].tensor.mutable_data().begin());
  }
}

void save_model(const Model& model, const std::string& path) {
  save_spec(model.spec(), path + ".json");
  save_checkpoint(path, model.state());
}

Model load_model(const std::string& path) {
  ModelSpec spec;
  try {
    spec = load_spec(path + ".json");
  } catch (const IoError& e) {
    throw CheckpointError("missing model spec next to checkpoint: " + std::string(e.what()));
  }
  Model m(spec, 0);
  m.load_state(load_checkpoint(path));
  return m;
}

}  // namespace dcsd
