// mthd: generate data, train, evaluate, plot and run ablations.
#include "mthd/ablation.hpp"
#include "mthd/config.hpp"
#include "mthd/plot.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mthd;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::optional<double> labeled_fraction;
  std::string data;
  std::string out;
  bool force = false;
};

std::string default_data_root() {
  const char* env = std::getenv("MTHD_DATA_ROOT");
  return env && *env ? env : "data";
}

ExperimentConfig resolve_config(const Common& c) {
  auto cfg = load_experiment_config(c.config_path, c.overrides);
  if (c.seed) propagate_seed(cfg, *c.seed);
  if (c.labeled_fraction) cfg.split.labeled_fraction = *c.labeled_fraction;
  return cfg;
}

fs::path data_root(const Common& c) { return c.data.empty() ? fs::path(default_data_root()) : fs::path(c.data); }

void check_strides(ExperimentConfig& cfg, const DatasetSpec& data) {
  if (cfg.model.sequence_names.empty()) cfg.model.sequence_names = canonical_sequence_names(data.k_sequences);
  if (cfg.model.stride != data.stride || cfg.train.codec.stride != data.stride)
    throw ConfigError("model.stride and train.codec.stride must equal the dataset stride (" +
                      std::to_string(data.stride) + ")");
  cfg.train.decode.stride = data.stride;
}

int cmd_generate(const Common& c) {
  const auto cfg = resolve_config(c);
  const fs::path root = c.out.empty() ? data_root(c) : fs::path(c.out);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!c.force) {
      std::cerr << "error: " << root.string() << " exists and is not empty (use --force to overwrite)\n";
      return 1;
    }
    fs::remove_all(root);
  }
  const auto dataset = generate_dataset(cfg.data);
  save_dataset(dataset, root);
  std::cout << dataset.manifest.summary() << '\n';
  return 0;
}

void write_run_info(const fs::path& dir, const ExperimentConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run.json");
  out << json(cfg).dump(1) << '\n';
}

int cmd_train(const Common& c, TrainPhase phase, const std::string& init_path) {
  auto cfg = resolve_config(c);
  cfg.train.phase = phase;
  const auto dataset = load_dataset(data_root(c));
  check_strides(cfg, dataset.manifest.spec);
  const auto split = make_fold_split(dataset.manifest, cfg.split);
  const fs::path run_dir = c.out.empty() ? fs::path("runs") / std::string(to_string(phase)) : fs::path(c.out);
  cfg.train.out_dir = run_dir.string();

  std::optional<Checkpoint> init;
  if (!init_path.empty()) init = load_checkpoint(init_path);
  write_run_info(run_dir, cfg);
  std::cout << "training " << to_string(phase) << ": " << split.labeled.size() << " labeled, "
            << split.unlabeled.size() << " unlabeled, " << split.validation.size() << " validation studies\n";
  const auto result = fit(cfg.train, cfg.model, dataset.studies, split, init);
  for (const auto& e : result.evaluations) {
    std::cout << "step " << e.step << "  loss " << e.loss;
    if (!e.result.sensitivities.empty()) std::cout << "  val avg sensitivity " << e.result.average;
    std::cout << '\n';
  }
  std::cout << "checkpoint: " << (run_dir / "last.ckpt").string() << '\n';
  return 0;
}

std::vector<std::size_t> split_indices(const Dataset& dataset, const TrainingSplit& split,
                                       const std::string& which) {
  if (which == "test") return split.test;
  if (which == "validation") return split.validation;
  if (which == "train") return split.labeled;
  if (which == "all") {
    std::vector<std::size_t> all;
    for (std::size_t i = 0; i < dataset.studies.size(); ++i)
      if (dataset.studies[i].boxes) all.push_back(i);
    return all;
  }
  throw ConfigError("unknown split: " + which + " (test, validation, train, all)");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_evaluate(const Common& c, const std::string& ckpt_path, const std::string& which,
                 const std::string& sequences, bool use_student) {
  auto cfg = resolve_config(c);
  auto dataset = load_dataset(data_root(c));
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto params = evaluation_params(ckpt, !use_student);
  const auto split = make_fold_split(dataset.manifest, cfg.split);
  const auto indices = split_indices(dataset, split, which);
  if (indices.empty()) throw ConfigError("split '" + which + "' has no labeled studies");

  if (!sequences.empty()) {
    const auto keep = split_list(sequences);
    for (std::size_t i : indices) {
      auto& seqs = dataset.studies[i].sequences;
      std::erase_if(seqs, [&](const auto& kv) { return std::find(keep.begin(), keep.end(), kv.first) == keep.end(); });
      if (seqs.empty()) throw ConfigError("study " + dataset.studies[i].study_id + " has none of: " + sequences);
    }
  }

  DecodeOptions decode = cfg.train.decode;
  const auto predictions = predict(params, dataset.studies, indices, decode);
  const auto result = froc(predictions, cfg.eval);
  const auto table = format_table({{which, result}});
  std::cout << table;

  if (!c.out.empty()) {
    const fs::path out = c.out;
    fs::create_directories(out);
    save_predictions(predictions, out / "predictions.json");
    std::ofstream(out / "report.txt") << table;
    json curve = json::array();
    for (const auto& p : froc_curve(predictions, cfg.eval)) curve.push_back({p.mean_fp, p.sensitivity});
    json doc{{"checkpoint", ckpt_path},         {"split", which},
             {"fp_points", result.fp_points},   {"sensitivities", result.sensitivities},
             {"average", result.average},       {"curve", curve},
             {"labeled_fraction", cfg.split.labeled_fraction}};
    std::ofstream(out / "eval.json") << doc.dump(1) << '\n';
  }
  return 0;
}

struct LoggedRun {
  std::string label;
  std::vector<double> fp_points, sensitivities;
  double average = 0;
  std::optional<double> labeled_fraction;
};

LoggedRun read_run(const fs::path& input) {
  LoggedRun run;
  fs::path dir = fs::is_directory(input) ? input : input.parent_path();
  run.label = (fs::is_directory(input) ? input : input.parent_path()).filename().string();
  if (run.label.empty()) run.label = input.stem().string();

  json record;
  fs::path file = input;
  if (fs::is_directory(input)) file = fs::exists(input / "eval.json") ? input / "eval.json" : input / "metrics.jsonl";
  std::ifstream in(file);
  if (!in) throw std::runtime_error("missing log: " + file.string());
  if (file.extension() == ".jsonl") {
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) {
        auto j = json::parse(line);
        if (!j.at("sensitivities").empty()) record = j;
      }
    if (record.is_null()) throw std::runtime_error("log has no evaluation records: " + file.string());
  } else {
    record = json::parse(in);
  }
  run.fp_points = record.at("fp_points").get<std::vector<double>>();
  run.sensitivities = record.at("sensitivities").get<std::vector<double>>();
  run.average = record.at("average").get<double>();
  if (record.contains("labeled_fraction")) run.labeled_fraction = record["labeled_fraction"].get<double>();
  if (!run.labeled_fraction && fs::exists(dir / "run.json")) {
    const auto info = json::parse(std::ifstream(dir / "run.json"));
    run.labeled_fraction = info.at("split").at("labeled_fraction").get<double>();
  }
  return run;
}

int cmd_plot(const Common& c, const std::vector<std::string>& inputs, const std::string& labels) {
  const auto names = split_list(labels);
  if (!names.empty() && names.size() != inputs.size())
    throw ConfigError("--labels must name every input");
  PlotPanel froc_panel{"FROC", "FPs per patient", "Sensitivity", true, 0, 1, {}};
  PlotPanel frac_panel{"Average sensitivity", "Labeled fraction", "Average sensitivity", false, 0, 1, {}};
  PlotSeries frac_series{"average", {}, {}};
  std::vector<std::pair<double, double>> frac_points;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto run = read_run(inputs[i]);
    if (!names.empty()) run.label = names[i];
    froc_panel.series.push_back({run.label, run.fp_points, run.sensitivities});
    if (run.labeled_fraction) frac_points.emplace_back(*run.labeled_fraction, run.average);
  }
  std::sort(frac_points.begin(), frac_points.end());
  for (const auto& [x, y] : frac_points) {
    frac_series.x.push_back(x);
    frac_series.y.push_back(y);
  }
  std::vector<PlotPanel> panels{froc_panel};
  if (!frac_points.empty()) {
    frac_panel.series.push_back(frac_series);
    panels.push_back(frac_panel);
  }
  const fs::path out = c.out.empty() ? fs::path("froc.svg") : fs::path(c.out);
  write_svg(out, panels);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_ablation(const Common& c, const std::string& rows) {
  auto cfg = resolve_config(c);
  if (!rows.empty()) cfg.ablation.rows = split_list(rows);
  const auto dataset = load_dataset(data_root(c));
  check_strides(cfg, dataset.manifest.spec);
  const auto split = make_fold_split(dataset.manifest, cfg.split);
  if (split.test.empty()) throw ConfigError("the fold split has no test studies");
  const fs::path out = c.out.empty() ? fs::path("runs/ablation") : fs::path(c.out);
  write_run_info(out, cfg);
  const auto run = run_ablation(cfg, dataset.studies, split, split.test, out,
                                [](const std::string& msg) { std::cerr << msg << '\n'; });
  const auto table = format_table(run.rows);
  std::cout << table;
  std::ofstream(out / "ablation.txt") << table;
  json doc = json::array();
  for (const auto& [name, r] : run.rows)
    doc.push_back({{"row", name}, {"fp_points", r.fp_points}, {"sensitivities", r.sensitivities}, {"average", r.average}});
  std::ofstream(out / "ablation.json") << doc.dump(1) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-teacher hetero-modal lesion detection on synthetic multi-sequence studies"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Common c;
  app.add_option("--config", c.config_path, "JSON experiment config");
  app.add_option("--seed", c.seed, "Seed for data, initialization, batching and augmentation");
  app.add_option("--set", c.overrides, "Override a config value, e.g. train.steps=500")->allow_extra_args(false);
  app.add_option("--data", c.data, "Dataset directory (default: $MTHD_DATA_ROOT or ./data)");
  app.add_option("--out", c.out, "Output directory or file");
  app.add_flag("--force", c.force, "Overwrite an existing non-empty output directory");

  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic dataset");

  auto* sup = app.add_subcommand("train-supervised", "Supervised training");
  std::string sup_init;
  sup->add_option("--init-checkpoint", sup_init, "Start from this checkpoint");
  sup->add_option("--labeled-fraction", c.labeled_fraction, "Fraction of training labeled studies kept labeled");

  auto* ssl = app.add_subcommand("train-ssl", "Mean-teacher semi-supervised training");
  std::string ssl_init;
  ssl->add_option("--init-checkpoint", ssl_init, "Supervised checkpoint to start from")->required();
  ssl->add_option("--labeled-fraction", c.labeled_fraction, "Fraction of training labeled studies kept labeled");

  auto* ev = app.add_subcommand("evaluate", "FROC evaluation of a checkpoint");
  std::string ckpt, which = "test", sequences;
  bool use_student = false;
  ev->add_option("--checkpoint", ckpt, "Checkpoint to evaluate")->required();
  ev->add_option("--split", which, "test, validation, train or all");
  ev->add_option("--sequences", sequences, "Comma-separated sequences to use (default: all available)");
  ev->add_flag("--use-student", use_student, "Evaluate the student even if a teacher is stored");
  ev->add_option("--labeled-fraction", c.labeled_fraction, "Recorded in the report");

  auto* plot = app.add_subcommand("plot-froc", "Plot FROC curves from run logs or eval reports");
  std::vector<std::string> inputs;
  std::string labels;
  plot->add_option("inputs", inputs, "Run directories, metrics.jsonl or eval.json files")->required();
  plot->add_option("--labels", labels, "Comma-separated series labels");

  auto* abl = app.add_subcommand("run-ablation", "Train and evaluate the ablation rows");
  std::string rows;
  abl->add_option("--rows", rows, "Comma-separated rows (supervised,intensity_only,geometric,full,no_incomplete)");
  abl->add_option("--labeled-fraction", c.labeled_fraction, "Fraction of training labeled studies kept labeled");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(c);
    if (sup->parsed()) return cmd_train(c, TrainPhase::supervised, sup_init);
    if (ssl->parsed()) return cmd_train(c, TrainPhase::ssl, ssl_init);
    if (ev->parsed()) return cmd_evaluate(c, ckpt, which, sequences, use_student);
    if (plot->parsed()) return cmd_plot(c, inputs, labels);
    if (abl->parsed()) return cmd_ablation(c, rows);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
