#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "palm/model.hpp"

namespace palm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Model parameters plus free-form metadata (training step, vocabulary
/// fingerprint, ...) and extra named arrays such as optimizer moments.
struct Checkpoint {
  ModelParams<float> params;
  std::map<std::string, std::string> meta;
  std::map<std::string, Matrix<float>> state;
};

/// "PLMC", u32 version, u32 byte length + key=value header lines (model config and
/// metadata), u32 array count, then per array: u32 name length, name, u32 rank,
/// u32 dims, raw f32 values. All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Verifies every model array is present with the shape the stored config implies
/// and that the output projection is tied to the token embedding.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Header-only read of the stored model config and metadata.
std::map<std::string, std::string> read_checkpoint_header(const std::filesystem::path& path);

}  // namespace palm
