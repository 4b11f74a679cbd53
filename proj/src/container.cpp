#include "sdfm/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "sdfm/error.hpp"

namespace sdfm {
namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'D', 'F', 'M'};

std::string dtype_name(DType t) { return t == DType::F32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw FormatError("unknown dtype '" + s + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw FormatError("malformed fingerprint '" + s + "'");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw FormatError("malformed fingerprint '" + s + "'");
  }
  return v;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (in.size() - pos < sizeof(T)) throw FormatError("container is truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

std::string to_string(ContainerKind k) {
  switch (k) {
    case ContainerKind::Dataset: return "dataset";
    case ContainerKind::Potential: return "potential";
    case ContainerKind::Model: return "model";
    case ContainerKind::Projection: return "projection";
  }
  return "unknown";
}

std::size_t Array::count() const {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

const Array* Container::find(const std::string& name) const {
  for (const Array& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const Array& Container::get(const std::string& name) const {
  const Array* a = find(name);
  if (!a) throw FormatError(to_string(kind) + " container has no array '" + name + "'");
  return *a;
}

void Container::add(std::string name, std::vector<std::size_t> shape, std::vector<double> data, DType dtype) {
  Array a{std::move(name), dtype, std::move(shape), std::move(data)};
  if (a.count() != a.data.size()) throw ConfigError("array '" + a.name + "' shape does not match its data");
  if (find(a.name)) throw ConfigError("duplicate array '" + a.name + "'");
  if (dtype == DType::F32) {
    for (double& v : a.data) v = static_cast<float>(v);
  }
  arrays.push_back(std::move(a));
}

void Container::add(std::string name, const DenseMatrix& m, DType dtype) {
  add(std::move(name), {m.rows(), m.cols()}, vec(m.flat()), dtype);
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  std::vector<std::uint8_t> payload;
  nlohmann::json table = nlohmann::json::array();
  for (const Array& a : c.arrays) {
    if (a.count() != a.data.size()) throw ConfigError("array '" + a.name + "' shape does not match its data");
    table.push_back({{"name", a.name}, {"dtype", dtype_name(a.dtype)}, {"shape", a.shape}});
    for (double v : a.data) {
      if (a.dtype == DType::F32) put(payload, static_cast<float>(v));
      else put(payload, v);
    }
  }
  nlohmann::json meta = c.meta;
  meta["arrays"] = std::move(table);
  meta["payload_fnv1a64"] = hex64(fnv1a64(payload.data(), payload.size()));
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put(out, kContainerVersion);
  put(out, static_cast<std::uint32_t>(c.kind));
  put(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Container decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an SDFM container");
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kContainerVersion) {
    throw FormatError("container version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kContainerVersion) + ")");
  }
  const auto kind = take<std::uint32_t>(bytes, pos);
  if (kind > 3) throw FormatError("unknown container kind " + std::to_string(kind));
  const auto meta_len = take<std::uint64_t>(bytes, pos);
  if (bytes.size() - pos < meta_len) throw FormatError("container metadata is truncated");
  Container c;
  c.kind = static_cast<ContainerKind>(kind);
  try {
    c.meta = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container metadata is not valid JSON: ") + e.what());
  }
  pos += meta_len;
  if (!c.meta.is_object() || !c.meta.contains("arrays") || !c.meta.contains("payload_fnv1a64")) {
    throw FormatError("container metadata lacks the array table");
  }
  const std::uint64_t expected = parse_hex64(c.meta["payload_fnv1a64"].get<std::string>());
  if (fnv1a64(bytes.data() + pos, bytes.size() - pos) != expected) {
    throw FormatError("container payload fingerprint mismatch");
  }
  try {
    for (const auto& entry : c.meta["arrays"]) {
      Array a;
      a.name = entry.at("name").get<std::string>();
      a.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      a.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const std::size_t n = a.count();
      a.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        a.data[i] = a.dtype == DType::F32 ? static_cast<double>(take<float>(bytes, pos)) : take<double>(bytes, pos);
      }
      c.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed array table: ") + e.what());
  }
  if (pos != bytes.size()) throw FormatError("container has trailing bytes");
  c.meta.erase("arrays");
  c.meta.erase("payload_fnv1a64");
  return c;
}

void write_container(const std::string& path, const Container& c) {
  const std::vector<std::uint8_t> bytes = encode_container(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + tmp + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("failed writing '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

Container read_container(const std::string& path, ContainerKind expected) {
  Container c = read_container(path);
  if (c.kind != expected) {
    throw FormatError(path + ": expected a " + to_string(expected) + " container, found " + to_string(c.kind));
  }
  return c;
}

DenseMatrix array_to_matrix(const Array& a) {
  if (a.shape.size() != 2) throw FormatError("array '" + a.name + "' is not a matrix");
  return DenseMatrix(a.shape[0], a.shape[1], a.data);
}

Container dataset_container(const Dataset& d) {
  Container c;
  c.kind = ContainerKind::Dataset;
  c.add("points", d.points);
  if (d.conditions) c.add("conditions", *d.conditions);
  if (!d.weights.empty()) c.add("weights", {d.weights.size()}, d.weights);
  return c;
}

Dataset dataset_from_container(const Container& c) {
  Dataset d;
  d.points = array_to_matrix(c.get("points"));
  if (const Array* z = c.find("conditions")) {
    d.conditions = array_to_matrix(*z);
    if (d.conditions->rows() != d.points.rows()) throw FormatError("condition rows do not match point rows");
  }
  if (const Array* w = c.find("weights")) {
    if (w->data.size() != d.points.rows()) throw FormatError("weight count does not match point rows");
    d.weights = w->data;
  }
  return d;
}

nlohmann::json cost_to_json(const CostConfig& cost) {
  return {{"kind", to_string(cost.kind)},     {"beta", cost.beta},         {"eps_raw", cost.eps_raw},
          {"eps_effective", cost.eps_effective}, {"cost_std", cost.cost_std}, {"rescaled", cost.rescaled},
          {"projected", cost.projection.has_value()}};
}

CostConfig cost_from_json(const nlohmann::json& j, std::optional<ProjectionMatrix> projection) {
  try {
    CostConfig c;
    c.kind = parse_cost_kind(j.at("kind").get<std::string>());
    c.beta = j.at("beta").get<double>();
    c.eps_raw = j.at("eps_raw").get<double>();
    c.eps_effective = j.at("eps_effective").get<double>();
    c.cost_std = j.at("cost_std").get<double>();
    c.rescaled = j.at("rescaled").get<bool>();
    if (j.at("projected").get<bool>() != projection.has_value()) {
      throw FormatError("projection presence does not match the cost metadata");
    }
    c.projection = std::move(projection);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cost metadata: ") + e.what());
  }
}

void add_projection(Container& c, const ProjectionMatrix& p, const std::string& prefix) {
  c.add(prefix + "basis", p.basis);
  c.add(prefix + "mean", {p.mean.size()}, p.mean);
  c.add(prefix + "explained_variance", {p.explained_variance.size()}, p.explained_variance);
  c.meta[prefix + "padded"] = p.padded;
}

std::optional<ProjectionMatrix> projection_from(const Container& c, const std::string& prefix) {
  const Array* basis = c.find(prefix + "basis");
  if (!basis) return std::nullopt;
  ProjectionMatrix p;
  p.basis = array_to_matrix(*basis);
  p.k = p.basis.rows();
  p.d_in = p.basis.cols();
  p.mean = c.get(prefix + "mean").data;
  p.explained_variance = c.get(prefix + "explained_variance").data;
  if (p.mean.size() != p.d_in || p.explained_variance.size() != p.k) throw FormatError("malformed projection arrays");
  p.padded = c.meta.value(prefix + "padded", false);
  return p;
}

Container projection_container(const ProjectionMatrix& p) {
  Container c;
  c.kind = ContainerKind::Projection;
  add_projection(c, p, "");
  return c;
}

Potential potential_from_container(const Container& c) {
  if (c.kind != ContainerKind::Potential) throw FormatError("expected a potential container");
  Potential pot;
  pot.g = c.get("g").data;
  try {
    pot.cost = cost_from_json(c.meta.at("cost"), projection_from(c, "projection_"));
    pot.target_fingerprint = parse_hex64(c.meta.at("target_fingerprint").get<std::string>());
    const auto& pv = c.meta.at("provenance");
    pot.provenance.optimizer = pv.at("optimizer").get<std::string>();
    pot.provenance.iterations = pv.at("iterations").get<std::size_t>();
    pot.provenance.final_chi2 = pv.at("final_chi2").get<double>();
    pot.provenance.averaging_window = pv.at("averaging_window").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed potential metadata: ") + e.what());
  }
  return pot;
}

// Wall time is left out so that reruns produce identical files.
Container potential_container(const Potential& pot) {
  Container c;
  c.kind = ContainerKind::Potential;
  c.meta["cost"] = cost_to_json(pot.cost);
  c.meta["target_fingerprint"] = hex64(pot.target_fingerprint);
  c.meta["provenance"] = {{"optimizer", pot.provenance.optimizer},
                          {"iterations", pot.provenance.iterations},
                          {"final_chi2", pot.provenance.final_chi2},
                          {"averaging_window", pot.provenance.averaging_window}};
  c.add("g", {pot.g.size()}, pot.g);
  if (pot.cost.projection) add_projection(c, *pot.cost.projection, "projection_");
  return c;
}

Container model_container(const FlowModel& model, const nlohmann::json& extra) {
  Container c;
  c.kind = ContainerKind::Model;
  c.meta = extra.is_object() ? extra : nlohmann::json::object();
  c.meta["dim"] = model.config().dim;
  c.meta["condition_dim"] = model.config().condition_dim;
  c.meta["hidden"] = model.config().hidden;
  c.add("theta", {model.num_parameters()}, vec(model.parameters()));
  return c;
}

FlowModel model_from_container(const Container& c) {
  if (c.kind != ContainerKind::Model) throw FormatError("expected a model container");
  MlpConfig cfg;
  try {
    cfg.dim = c.meta.at("dim").get<std::size_t>();
    cfg.condition_dim = c.meta.at("condition_dim").get<std::size_t>();
    cfg.hidden = c.meta.at("hidden").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model metadata: ") + e.what());
  }
  try {
    return FlowModel(cfg, c.get("theta").data);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

}  // namespace sdfm
