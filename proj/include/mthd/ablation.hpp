// Ablation over the consistency ingredients: supervised only, intensity-only
// consistency, + geometric, full, and full without incomplete studies.
#pragma once

#include "mthd/config.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mthd {

/// Known row names, in table order.
const std::vector<std::string>& ablation_row_names();

/// The SSL train config a row uses; "supervised" returns the supervised one.
/// Throws ConfigError for an unknown row.
TrainConfig ablation_train_config(const std::string& row, const ExperimentConfig& config);

struct AblationRun {
  std::vector<std::pair<std::string, EvalResult>> rows;  // in requested order
  Checkpoint supervised;                                 // shared initialization
};

/// Trains the supervised initialization once, then each requested SSL row from
/// it, and evaluates every row's final model on `test`. Each row writes its
/// checkpoints and log to out_dir/<row> when out_dir is non-empty.
AblationRun run_ablation(const ExperimentConfig& config, const std::vector<Study>& studies,
                         const TrainingSplit& split, const std::vector<std::size_t>& test,
                         const std::filesystem::path& out_dir = {},
                         const std::function<void(const std::string&)>& progress = {});

}  // namespace mthd
