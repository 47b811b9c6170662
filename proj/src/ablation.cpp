#include "mthd/ablation.hpp"

#include <algorithm>

namespace mthd {

const std::vector<std::string>& ablation_row_names() {
  static const std::vector<std::string> names{"supervised", "intensity_only", "geometric", "full",
                                              "no_incomplete"};
  return names;
}

TrainConfig ablation_train_config(const std::string& row, const ExperimentConfig& config) {
  const auto& names = ablation_row_names();
  if (std::find(names.begin(), names.end(), row) == names.end())
    throw ConfigError("unknown ablation row: " + row);
  TrainConfig t = config.train;
  if (row == "supervised") {
    t.phase = TrainPhase::supervised;
    t.steps = config.ablation.supervised_steps;
    return t;
  }
  t.phase = TrainPhase::ssl;
  t.steps = config.ablation.ssl_steps;
  t.augment.intensity = true;
  t.augment.geometric = row != "intensity_only";
  t.augment.sequence_subset = row == "full" || row == "no_incomplete";
  return t;
}

AblationRun run_ablation(const ExperimentConfig& config, const std::vector<Study>& studies,
                         const TrainingSplit& split, const std::vector<std::size_t>& test,
                         const std::filesystem::path& out_dir,
                         const std::function<void(const std::string&)>& progress) {
  for (const auto& row : config.ablation.rows) ablation_train_config(row, config);
  auto row_dir = [&](const std::string& row) { return out_dir.empty() ? std::string() : (out_dir / row).string(); };
  auto note = [&](const std::string& text) {
    if (progress) progress(text);
  };

  AblationRun run;
  TrainConfig sup = ablation_train_config("supervised", config);
  sup.out_dir = row_dir("supervised");
  note("training supervised initialization");
  const FitResult base = fit(sup, config.model, studies, split);
  run.supervised.student = base.state.student;
  run.supervised.optimizer = base.state.optimizer;
  run.supervised.step = base.state.step;
  run.supervised.phase = "supervised";

  for (const auto& row : config.ablation.rows) {
    if (row == "supervised") {
      run.rows.emplace_back(row, evaluate(base.state.student, studies, test, sup.decode, config.eval));
      note("supervised: done");
      continue;
    }
    TrainConfig t = ablation_train_config(row, config);
    t.out_dir = row_dir(row);
    TrainingSplit s = split;
    if (row == "no_incomplete")
      std::erase_if(s.unlabeled, [&](std::size_t i) { return studies[i].split == SplitTag::unlabeled_incomplete; });
    note("training " + row);
    const FitResult r = fit(t, config.model, studies, s, run.supervised);
    const auto& params = t.evaluate_teacher ? r.state.teacher : r.state.student;
    run.rows.emplace_back(row, evaluate(params, studies, test, t.decode, config.eval));
    note(row + ": done");
  }
  return run;
}

}  // namespace mthd
