#pragma once

#include <filesystem>
#include <stdexcept>

#include "vdet/model.hpp"
#include "vdet/trainer.hpp"

namespace vdet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes a magic line, a JSON header with the configs and a tensor
/// directory, then the raw little-endian float32 payload.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointMeta& meta);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Rebuilds the model from the stored config and loads every tensor,
/// rejecting missing, extra or mis-shaped arrays.
Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace vdet
