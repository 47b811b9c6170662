// Binary checkpoint: magic, JSON header (model config, step, phase, optimizer
// hyper-parameters), then raw float32 blocks for student, teacher and Adam
// moments. Round-trips bit-exactly.
#pragma once

#include "mthd/hetero_net.hpp"
#include "mthd/optim.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>

namespace mthd {

inline constexpr int kCheckpointSchemaVersion = 1;

struct Checkpoint {
  Parameters<float> student;
  std::optional<Vector<float>> teacher;  // SSL phase only
  AdamState<float> optimizer;
  long step = 0;
  std::string phase = "supervised";
  std::string optimizer_name = "adam";
  nlohmann::json train_config = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

/// Throws std::runtime_error for a missing file, SchemaMismatch for a wrong
/// magic, schema version or truncated payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mthd
