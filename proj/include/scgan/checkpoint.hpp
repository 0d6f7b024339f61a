#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scgan/model.hpp"

namespace scgan {

// On-disk layout: <dir>/index.json + <dir>/blob.bin. The blob holds the
// little-endian float32 data of every tensor, concatenated in index order;
// "offset" and "length" in the index are byte counts into the blob.
struct NamedTensor {
  std::string name;
  nn::Shape shape;
  std::vector<float> data;
};

struct CheckpointData {
  nlohmann::json config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

inline constexpr int kCheckpointFormatVersion = 1;

void write_checkpoint(const std::filesystem::path& dir, const CheckpointData& checkpoint);
CheckpointData read_checkpoint(const std::filesystem::path& dir);

// Appends every parameter of `params` with `prefix` prepended to its name.
void append_params(CheckpointData& checkpoint, const std::string& prefix, const ParamMap<float>& params);
// Copies tensors named `prefix` + name into the matching entries of `params`,
// which must already have the right names and shapes.
void restore_params(const CheckpointData& checkpoint, const std::string& prefix, ParamMap<float>& params);

}  // namespace scgan
