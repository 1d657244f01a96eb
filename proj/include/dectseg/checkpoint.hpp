#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dectseg/unet.hpp"

namespace dectseg {

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  UNetConfig config;
  int stage = 1;
  double alpha_training = 0.6;
  std::int64_t iteration = 0;
  std::vector<double> loss_tail;  // last few training losses
  std::uint64_t seed = 0;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<StoredTensor> tensors;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Binary layout, little-endian:
//   "DSEG" | u32 version | u32 metadata bytes | metadata (JSON text)
//   | u32 tensor count | per tensor: u32 name bytes, name, u32 ndim,
//     ndim x u32 extents, numel x f32 values
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also throws ConfigError unless the stored config equals `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig& expected);

std::string metadata_json(const CheckpointMeta& meta);

Checkpoint make_checkpoint(const UNet<float>& net, CheckpointMeta meta);
/// Network with the checkpoint's config and weights.
UNet<float> restore_network(const Checkpoint& checkpoint);

}  // namespace dectseg
