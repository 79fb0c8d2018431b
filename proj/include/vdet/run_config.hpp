#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vdet/model.hpp"
#include "vdet/trainer.hpp"

namespace vdet {

/// Everything a training run needs, as read from a flat "key = value" file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path data_root;
  std::filesystem::path out_dir = "runs/vdet";
  double val_fraction = 0.2;

  /// Sets one key from its text form. Throws ConfigError naming the key when
  /// it is unknown or the value does not parse.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Applies model/train cross-field rules (input_size drives the model
  /// input) and validates both configs.
  void finalize();
};

struct KeyInfo {
  std::string key;
  std::string description;
};

/// Every recognised key in file order.
const std::vector<KeyInfo>& run_config_keys();

/// Reads "key = value" lines; '#' starts a comment.
RunConfig load_run_config(const std::filesystem::path& path);

/// Parses "key=value" override strings on top of `cfg`.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

/// Serializes every key with its current value.
std::string to_text(const RunConfig& cfg);

/// Annotated reference of all keys with their defaults.
std::string config_reference();

/// Key/value maps used inside checkpoints.
std::vector<std::pair<std::string, std::string>> model_entries(const ModelConfig& cfg);
std::vector<std::pair<std::string, std::string>> train_entries(const TrainConfig& cfg);
void set_model_entry(ModelConfig& cfg, const std::string& key, const std::string& value);
void set_train_entry(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace vdet
