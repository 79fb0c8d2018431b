#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vdet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitDataset = 2;
inline constexpr int kExitNonFinite = 3;
inline constexpr int kExitRuntime = 4;

struct TrainOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

struct PredictOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path images;
  std::filesystem::path out;
  std::optional<double> conf;     // defaults to the checkpoint's best threshold
  std::optional<double> nms_iou;  // defaults to the training setting
  // "train" or "val": restrict to stems of that split in <images>/../split.txt.
  std::optional<std::string> split;
  bool overlay = false;
  bool deterministic = false;
};

struct EvalOptions {
  std::filesystem::path predictions;
  std::filesystem::path labels;
  std::optional<std::filesystem::path> out;
  double iou_thresh = 0.3;
  double conf = 0.0;
  // Overlays need the images the predictions were made on.
  std::optional<std::filesystem::path> images;
};

struct SynthOptions {
  std::optional<std::filesystem::path> spec;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_images;
  std::optional<double> val_fraction;
};

int cmd_train(const TrainOptions& opt);
int cmd_predict(const PredictOptions& opt);
int cmd_eval(const EvalOptions& opt);
int cmd_synth(const SynthOptions& opt);

/// Parses the command line and dispatches to a subcommand.
int run(int argc, char** argv);

}  // namespace vdet::cli
