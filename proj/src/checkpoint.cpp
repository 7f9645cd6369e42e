#include "aggpose/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "aggpose/fileutil.hpp"

namespace aggpose {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'G', 'G', 'P', 'O', 'S', 'E', '1'};

template <typename U>
void to_little_endian(std::uint8_t* bytes, std::size_t count) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) std::reverse(bytes + i * sizeof(U), bytes + (i + 1) * sizeof(U));
  } else {
    (void)bytes;
    (void)count;
  }
}

}  // namespace

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : tensors) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::size_t Checkpoint::element_size() const {
  if (dtype == "float32") return 4;
  if (dtype == "float64") return 8;
  throw CheckpointError("unsupported checkpoint dtype '" + dtype + "'");
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

template <typename T>
void Checkpoint::add(const std::string& name, const Tensor<T>& t) {
  if (dtype != dtype_name<T>()) {
    throw CheckpointError("cannot add " + std::string(dtype_name<T>()) + " tensor '" + name + "' to a " + dtype +
                          " checkpoint");
  }
  if (find(name) != nullptr) throw CheckpointError("duplicate checkpoint entry '" + name + "'");
  Entry e{name, t.shape(), std::vector<std::uint8_t>(static_cast<std::size_t>(t.numel()) * sizeof(T))};
  std::memcpy(e.bytes.data(), t.ptr(), e.bytes.size());
  to_little_endian<T>(e.bytes.data(), static_cast<std::size_t>(t.numel()));
  tensors.push_back(std::move(e));
}

template <typename T>
Tensor<T> Checkpoint::tensor(const Entry& e) const {
  const std::size_t n = static_cast<std::size_t>(numel(e.shape));
  const std::size_t width = element_size();
  if (e.bytes.size() != n * width) throw CheckpointError("entry '" + e.name + "' has inconsistent size");
  std::vector<std::uint8_t> bytes = e.bytes;
  std::vector<T> values(n);
  if (width == 4) {
    to_little_endian<float>(bytes.data(), n);
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), bytes.data(), bytes.size());
    std::copy(tmp.begin(), tmp.end(), values.begin());
  } else {
    to_little_endian<double>(bytes.data(), n);
    std::vector<double> tmp(n);
    std::memcpy(tmp.data(), bytes.data(), bytes.size());
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(tmp[i]);
  }
  return Tensor<T>(e.shape, std::move(values));
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::size_t width = ckpt.element_size();
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.tensors) {
    if (e.bytes.size() != static_cast<std::size_t>(numel(e.shape)) * width) {
      throw CheckpointError("entry '" + e.name + "' has inconsistent size");
    }
    entries.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const json header = {{"dtype", ckpt.dtype},     {"config", ckpt.config}, {"config_hash", ckpt.config_hash},
                       {"step", ckpt.step},       {"metadata", ckpt.metadata}, {"tensors", entries}};
  const std::string text = header.dump();
  atomic_write(path, [&](const std::filesystem::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    std::uint8_t len[8];
    std::uint64_t n = text.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<std::uint8_t>(n >> (8 * i));
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    out.flush();
    if (!out) throw CheckpointError("failed writing checkpoint '" + path.string() + "'");
  });
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  std::uint8_t len[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw CheckpointError("'" + path.string() + "' is not an aggpose checkpoint");
  }
  if (!in.read(reinterpret_cast<char*>(len), 8)) throw CheckpointError("truncated checkpoint header");
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(len[i]) << (8 * i);
  if (n > (std::uint64_t{1} << 32)) throw CheckpointError("implausible checkpoint header length");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw CheckpointError("truncated checkpoint header");
  const auto data_start = static_cast<std::uint64_t>(in.tellg());

  Checkpoint ckpt;
  json header;
  try {
    header = json::parse(text);
    ckpt.dtype = header.at("dtype").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.metadata = header.value("metadata", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint header in '" + path.string() + "': " + e.what());
  }
  const std::size_t width = ckpt.element_size();
  for (const auto& t : header.at("tensors")) {
    Checkpoint::Entry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(numel(e.shape)) * width) {
      throw CheckpointError("entry '" + e.name + "' size does not match its shape");
    }
    if (ckpt.find(e.name) != nullptr) throw CheckpointError("duplicate checkpoint entry '" + e.name + "'");
    e.bytes.resize(nbytes);
    in.seekg(static_cast<std::streamoff>(data_start + offset));
    if (!in.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(nbytes))) {
      throw CheckpointError("truncated data for entry '" + e.name + "'");
    }
    ckpt.tensors.push_back(std::move(e));
  }
  return ckpt;
}

template <typename T>
Checkpoint make_checkpoint(const AggPoseModel<T>& model, std::int64_t step, const json& metadata) {
  Checkpoint ckpt;
  ckpt.dtype = dtype_name<T>();
  ckpt.config = model.config().to_json();
  ckpt.config_hash = model.config().hash();
  ckpt.step = step;
  ckpt.metadata = metadata;
  for (const auto& p : model.parameters()) ckpt.add(p.name, p.value);
  return ckpt;
}

template <typename T>
LoadReport load_partial(AggPoseModel<T>& model, const Checkpoint& ckpt, const LoadOptions& options) {
  std::map<std::string, const Checkpoint::Entry*> available;
  LoadReport report;
  for (const auto& e : ckpt.tensors) {
    if (e.name.rfind("optim.", 0) == 0) continue;
    std::string name = e.name;
    for (const auto& [from, to] : options.rename) {
      if (name.rfind(from, 0) == 0) {
        name = to + name.substr(from.size());
        break;
      }
    }
    if (options.policy != LoadPolicy::Strict && !options.prefixes.empty()) {
      const bool keep = std::any_of(options.prefixes.begin(), options.prefixes.end(),
                                    [&](const std::string& p) { return name.rfind(p, 0) == 0; });
      if (!keep) continue;
    }
    available[name] = &e;
  }

  std::vector<std::pair<const Parameter<T>*, const Checkpoint::Entry*>> plan;
  std::set<std::string> used;
  for (const auto& p : model.parameters()) {
    auto it = available.find(p.name);
    if (it == available.end()) {
      report.missing.push_back(p.name);
      continue;
    }
    if (it->second->shape != p.value.shape()) {
      throw CheckpointError("shape conflict for '" + p.name + "': checkpoint " + to_string(it->second->shape) +
                            ", model " + to_string(p.value.shape()));
    }
    plan.emplace_back(&p, it->second);
    used.insert(p.name);
  }
  for (const auto& [name, entry] : available) {
    if (!used.count(name)) report.unexpected.push_back(name);
  }
  if (options.policy == LoadPolicy::Strict && (!report.missing.empty() || !report.unexpected.empty())) {
    std::string msg = "strict load failed:";
    if (!report.missing.empty()) msg += " " + std::to_string(report.missing.size()) + " missing (first '" + report.missing[0] + "')";
    if (!report.unexpected.empty()) {
      msg += " " + std::to_string(report.unexpected.size()) + " unexpected (first '" + report.unexpected[0] + "')";
    }
    throw CheckpointError(msg);
  }
  for (auto& [param, entry] : plan) {
    const Tensor<T> values = ckpt.tensor<T>(*entry);
    Tensor<T> dst = param->value;
    std::copy(values.data().begin(), values.data().end(), dst.mutable_data().begin());
    report.loaded.push_back(param->name);
  }
  if (options.policy == LoadPolicy::PerLevelFrozen) model.set_frozen_levels(options.frozen_levels);
  return report;
}

template <typename T>
AggPoseModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = ModelConfig::from_json(ckpt.config);
  if (!ckpt.config_hash.empty() && cfg.hash() != ckpt.config_hash) {
    throw CheckpointError("checkpoint config hash mismatch (" + ckpt.config_hash + " vs " + cfg.hash() + ")");
  }
  AggPoseModel<T> model(cfg);
  load_partial(model, ckpt);
  return model;
}

#define AGGPOSE_INSTANTIATE_CHECKPOINT(T)                                                            \
  template const char* dtype_name<T>();                                                              \
  template void Checkpoint::add<T>(const std::string&, const Tensor<T>&);                            \
  template Tensor<T> Checkpoint::tensor<T>(const Entry&) const;                                      \
  template Checkpoint make_checkpoint<T>(const AggPoseModel<T>&, std::int64_t, const json&);         \
  template LoadReport load_partial<T>(AggPoseModel<T>&, const Checkpoint&, const LoadOptions&);      \
  template AggPoseModel<T> model_from_checkpoint<T>(const Checkpoint&);

AGGPOSE_INSTANTIATE_CHECKPOINT(float)
AGGPOSE_INSTANTIATE_CHECKPOINT(double)

}  // namespace aggpose
