#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "simprop/model.hpp"

namespace simprop {

/// Corrupt, truncated or mismatching checkpoint.
class CheckpointError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline constexpr char kCheckpointMagic[] = "SPNKPT1\n";

/// Layout: magic, `key=value` header lines and a blank line, then per tensor
/// a name line, a shape line and raw little-endian float32 data, then a
/// little-endian CRC-32 of all float bytes.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& cfg);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Loads and checks that the stored configuration equals `expected`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

/// Header lines describing `cfg` (also used for logging).
std::vector<std::pair<std::string, std::string>> config_header(const ModelConfig& cfg);

}  // namespace simprop
