#pragma once

#include <cstdint>
#include <string>

#include "smoe/config.hpp"
#include "smoe/train.hpp"

namespace smoe {

inline constexpr char kCheckpointMagic[4] = {'S', 'M', 'O', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Malformed, truncated or incompatible checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  TrainState state;
};

/// Layout: "SMOE", u32 version, u64 header length, JSON header (config,
/// step, Adam step, RNG state, shared heads, tensor directory), then raw
/// little-endian f32 payloads in directory order: parameters, first
/// moments, second moments.
std::string serialize_checkpoint(const TrainState& state, const RunConfig& config);
Checkpoint parse_checkpoint(const std::string& bytes);

/// Writes to a temporary file and renames it into place.
void save_checkpoint(const TrainState& state, const RunConfig& config, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Writes `contents` to `path` via a temporary sibling and rename.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace smoe
