#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "gift/denoiser.hpp"

namespace gift {

using Params = DenoiserParams<double>;

inline constexpr int kCheckpointSchemaVersion = 1;

// Binary checkpoint: magic, schema version, a JSON header (arch, table rows, psi policy,
// provenance), then theta as raw little-endian doubles and psi_index as uint64.
struct CheckpointInfo {
  std::string provenance;  // config hash of the run that produced the checkpoint
  std::map<int, int> tokens;  // concept id -> table row that now generates it (attack tokens)
};

void save_checkpoint(const Params& params, const std::filesystem::path& path, const CheckpointInfo& info = {});
Params load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace gift
