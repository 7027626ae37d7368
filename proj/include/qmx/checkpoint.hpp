#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace qmx {

// On-disk layout (all integers little-endian):
//
//   bytes 0..7   magic "QMXCKPT1"
//   u32          format version (1)
//   u64          metadata length M
//   M bytes      UTF-8 JSON metadata (config record, RNG state, ...)
//   u32          entry count N
//   N entries:
//     u32        name length L, then L bytes of dotted name ("backbone.stages.0.blocks.1.mbconv.se.reduce.weight")
//     u8         kind: 0 = trainable parameter, 1 = buffer (e.g. batch-norm running stats)
//     u32        rank R, then R x i64 dimensions
//     f32[prod]  row-major values
//
// Integer buffers (batch-norm step counters) are not stored. Values are always
// written as 32-bit floats, so 64-bit models round on save.

enum class EntryKind : std::uint8_t { parameter = 0, buffer = 1 };

struct CheckpointEntry {
  std::string name;
  EntryKind kind = EntryKind::parameter;
  torch::Tensor values;  // float32, CPU, contiguous
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  std::int64_t parameter_count() const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Snapshot every parameter and floating-point buffer of `module`.
Checkpoint capture_state(const torch::nn::Module& module, nlohmann::json meta = nlohmann::json::object());

// Copy entries into `module`. Every floating-point parameter and buffer must be
// present with a matching shape; extra entries are an error.
void restore_state(torch::nn::Module& module, const Checkpoint& ckpt);

}  // namespace qmx
