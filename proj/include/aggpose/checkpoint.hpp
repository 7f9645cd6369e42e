#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aggpose/model.hpp"

namespace aggpose {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File layout: "AGGPOSE1", u64 little-endian header length, JSON header
/// {dtype, config, config_hash, step, metadata, tensors: [{name, shape,
/// offset, nbytes}]}, then the raw little-endian arrays.
struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<std::uint8_t> bytes;
  };

  std::string dtype = "float32";  // "float32" | "float64"
  nlohmann::json config;
  std::string config_hash;
  std::int64_t step = 0;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<Entry> tensors;

  const Entry* find(const std::string& name) const;
  std::size_t element_size() const;

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t);
  /// Converts to T when the stored dtype differs.
  template <typename T>
  Tensor<T> tensor(const Entry& e) const;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
const char* dtype_name();

/// All model parameters, in model order, plus config, hash and step.
template <typename T>
Checkpoint make_checkpoint(const AggPoseModel<T>& model, std::int64_t step = 0,
                           const nlohmann::json& metadata = nlohmann::json::object());

enum class LoadPolicy { Strict, ByPrefix, PerLevelFrozen };

struct LoadOptions {
  LoadPolicy policy = LoadPolicy::Strict;
  /// ByPrefix / PerLevelFrozen: only checkpoint names starting with one of
  /// these are considered (all when empty).
  std::vector<std::string> prefixes;
  /// Applied to checkpoint names before matching: leading `first` -> `second`.
  std::vector<std::pair<std::string, std::string>> rename;
  /// PerLevelFrozen: levels marked non-trainable after loading.
  std::set<int> frozen_levels;
};

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // model parameters left untouched
  std::vector<std::string> unexpected;  // checkpoint entries with no parameter
};

/// Copies checkpoint values into the model's parameters. Entries under
/// "optim." are optimizer state and never count as unexpected. Throws
/// CheckpointError on a shape conflict, or under Strict on any miss.
template <typename T>
LoadReport load_partial(AggPoseModel<T>& model, const Checkpoint& ckpt, const LoadOptions& options = {});

/// Builds the model described by the checkpoint's config and loads it strictly.
template <typename T>
AggPoseModel<T> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace aggpose
