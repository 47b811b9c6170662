#include "mthd/trainer.hpp"

#include "mthd/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mthd {

std::string_view to_string(TrainPhase phase) {
  return phase == TrainPhase::supervised ? "supervised" : "ssl";
}

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("train config: ") + what);
  };
  require(c.lr_supervised > 0 && c.lr_ssl > 0, "learning rates must be positive");
  require(c.weight_decay >= 0, "weight_decay must be >= 0");
  require(c.adam_beta1 >= 0 && c.adam_beta1 < 1 && c.adam_beta2 >= 0 && c.adam_beta2 < 1,
          "adam betas must be in [0, 1)");
  require(c.adam_epsilon > 0, "adam_epsilon must be positive");
  require(c.steps >= 0, "steps must be >= 0");
  require(c.batch_size >= 1, "batch_size must be >= 1");
  require(c.unlabeled_ratio > 0, "unlabeled_ratio must be positive");
  require(c.lesion_batch_ratio > 0, "lesion_batch_ratio must be positive");
  require(c.ema_alpha >= 0 && c.ema_alpha <= 1, "ema_alpha must be in [0, 1]");
  require(c.unsup_weight >= 0, "unsup_weight must be >= 0");
  require(c.eval_every >= 0, "eval_every must be >= 0");
  require(c.decode.top_k >= 1, "decode.top_k must be >= 1");
  validate(c.sup);
  validate(c.cons);
  require(c.augment.gamma_min > 0 && c.augment.gamma_min <= c.augment.gamma_max, "bad gamma range");
  require(c.augment.scale_min > 0 && c.augment.scale_min <= c.augment.scale_max, "bad scale range");
  require(c.augment.max_rotation_deg >= 0 && c.augment.max_shift_fraction >= 0,
          "rotation and shift limits must be >= 0");
}

TeacherStudentState init_teacher_student(const Parameters<float>& pretrained) {
  TeacherStudentState state;
  state.student = pretrained;
  state.teacher = pretrained;
  return state;
}

void ema_update(TeacherStudentState& state, double alpha) {
  ema_update(state.teacher, state.student, alpha);
}

TrainingSplit make_fold_split(const Manifest& manifest, const SplitConfig& config) {
  if (config.n_folds != 5) throw ConfigError("split: only 5 folds (70/10/20) are supported");
  if (config.fold < 0 || config.fold >= config.n_folds) throw ConfigError("split: fold out of range");
  if (!(config.labeled_fraction >= 0 && config.labeled_fraction <= 1))
    throw ConfigError("split: labeled_fraction must be in [0, 1]");

  TrainingSplit split;
  std::vector<std::pair<double, std::size_t>> train_labeled;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (e.split == SplitTag::unlabeled_incomplete && !config.include_incomplete) continue;
    if (e.split != SplitTag::labeled) {
      split.unlabeled.push_back(i);
      continue;
    }
    Rng fold_rng = make_stream(config.seed, "fold/" + e.study_id);
    const long bucket = uniform_int(fold_rng, 0, 9);
    const long shifted = (bucket - 2 * config.fold + 10) % 10;
    if (shifted < 2) {
      split.test.push_back(i);
    } else if (shifted == 2) {
      split.validation.push_back(i);
    } else {
      Rng keep_rng = make_stream(config.seed, "labeled/" + e.study_id);
      train_labeled.emplace_back(uniform(keep_rng, 0, 1), i);
    }
  }
  std::sort(train_labeled.begin(), train_labeled.end());
  auto keep = static_cast<std::size_t>(std::llround(config.labeled_fraction * train_labeled.size()));
  if (config.labeled_fraction > 0 && keep == 0 && !train_labeled.empty()) keep = 1;
  for (std::size_t r = 0; r < train_labeled.size(); ++r)
    (r < keep ? split.labeled : split.unlabeled).push_back(train_labeled[r].second);
  std::sort(split.labeled.begin(), split.labeled.end());
  std::sort(split.unlabeled.begin(), split.unlabeled.end());
  return split;
}

Trainer::Trainer(const TrainConfig& config, const std::vector<Study>& studies, TrainingSplit split,
                 TeacherStudentState state)
    : config_(config),
      studies_(studies),
      split_(std::move(split)),
      state_(std::move(state)),
      batch_labeled_(make_stream(config.seed, "batch/labeled")),
      augment_labeled_(make_stream(config.seed, "augment/labeled")),
      batch_unlabeled_(make_stream(config.seed, "batch/unlabeled")),
      augment_unlabeled_(make_stream(config.seed, "augment/unlabeled")) {
  validate(config_);
  if (split_.labeled.empty()) throw ConfigError("trainer: no labeled training studies");
  for (std::size_t i : split_.labeled) {
    const auto& study = studies_.at(i);
    if (!study.boxes) throw InvariantViolation("trainer: labeled study without boxes: " + study.study_id);
    (study.boxes->empty() ? without_lesions_ : with_lesions_).push_back(i);
  }
  for (std::size_t i : split_.unlabeled)
    if (studies_.at(i).sequences.empty())
      throw InvariantViolation("trainer: unlabeled study with no sequences: " + studies_[i].study_id);
  if (config_.codec.stride != state_.student.config.stride)
    throw ConfigError("trainer: codec stride differs from the model stride");
  adam_.learning_rate = config_.phase == TrainPhase::ssl ? config_.lr_ssl : config_.lr_supervised;
  adam_.beta1 = config_.adam_beta1;
  adam_.beta2 = config_.adam_beta2;
  adam_.epsilon = config_.adam_epsilon;
  adam_.weight_decay = config_.weight_decay;
}

std::vector<std::size_t> Trainer::sample_labeled() {
  const double p_lesion = config_.lesion_batch_ratio / (1 + config_.lesion_batch_ratio);
  std::vector<std::size_t> batch;
  for (int b = 0; b < config_.batch_size; ++b) {
    const bool lesion = uniform(batch_labeled_, 0, 1) < p_lesion;
    const auto& pool = (lesion && !with_lesions_.empty()) || without_lesions_.empty() ? with_lesions_
                                                                                      : without_lesions_;
    batch.push_back(pool[uniform_int(batch_labeled_, 0, static_cast<long>(pool.size()) - 1)]);
  }
  return batch;
}

std::vector<std::size_t> Trainer::sample_unlabeled() {
  std::vector<std::size_t> batch;
  if (split_.unlabeled.empty()) return batch;
  const auto n = std::max<long>(1, std::lround(config_.batch_size * config_.unlabeled_ratio));
  for (long b = 0; b < n; ++b)
    batch.push_back(
        split_.unlabeled[uniform_int(batch_unlabeled_, 0, static_cast<long>(split_.unlabeled.size()) - 1)]);
  return batch;
}

Trainer::Prepared Trainer::prepare_labeled(const Study& study) {
  const auto names = study.sequence_names();
  AugmentRanges ranges = config_.augment;
  ranges.intensity = ranges.intensity && config_.augment_labeled;
  ranges.geometric = ranges.geometric && config_.augment_labeled;
  const auto spec = sample_augment(names, augment_labeled_, ranges, study.height(), study.width());

  Prepared p;
  for (const auto& name : spec.sequence_subset) {
    ImageF img = study.sequences.at(name);
    if (spec.gamma_student != 1) img = apply_intensity(img, spec.gamma_student);
    if (!spec.geometry.is_identity()) img = apply_geometric(img, spec.geometry);
    p.images.emplace_back(name, std::move(img));
  }
  std::vector<BBox> boxes;
  for (const auto& box : *study.boxes) {
    if (spec.geometry.is_identity()) {
      boxes.push_back(box);
      continue;
    }
    const BBox moved = transform_box(box, spec.geometry, study.height(), study.width());
    if (moved.width() >= 1 && moved.height() >= 1) boxes.push_back(moved);
  }
  p.targets = encode<float>(boxes, study.height(), study.width(), config_.codec);
  return p;
}

SupLoss Trainer::accumulate_supervised(const std::vector<std::size_t>& batch, Vector<float>& grad) {
  SupLoss mean;
  const float scale = 1.0f / static_cast<float>(batch.size());
  for (std::size_t idx : batch) {
    const auto prepared = prepare_labeled(studies_[idx]);
    ForwardCache<float> cache;
    const auto out = forward(state_.student, prepared.images, &cache);
    DetectorOutput<float> g;
    const auto loss = sup_loss(out, prepared.targets, config_.sup, &g);
    g.heatmap *= scale;
    for (int c = 0; c < 2; ++c) {
      g.size[c] *= scale;
      g.offset[c] *= scale;
    }
    backward(state_.student, cache, g, grad);
    mean.total += loss.total / batch.size();
    mean.heatmap += loss.heatmap / batch.size();
    mean.size += loss.size / batch.size();
    mean.offset += loss.offset / batch.size();
  }
  return mean;
}

ConsLoss Trainer::accumulate_consistency(const std::vector<std::size_t>& batch, Vector<float>& grad) {
  ConsLoss mean;
  const float scale = 1.0f / static_cast<float>(batch.size());
  const int stride = state_.student.config.stride;
  for (std::size_t idx : batch) {
    const Study& study = studies_[idx];
    const auto names = study.sequence_names();
    const auto spec = sample_augment(names, augment_unlabeled_, config_.augment, study.height(), study.width());

    SequenceImages<float> teacher_in, student_in;
    for (const auto& name : spec.sequence_subset) {
      const ImageF& img = study.sequences.at(name);
      teacher_in.emplace_back(name, apply_intensity(img, spec.gamma_teacher));
      student_in.emplace_back(name, apply_geometric(apply_intensity(img, spec.gamma_student), spec.geometry));
    }
    const auto teacher_out = forward(state_.teacher, teacher_in);
    const auto [heat_t, size_t_] = warp_teacher_outputs(teacher_out.heatmap, teacher_out.size, spec.geometry,
                                                         stride, config_.augment.rescale_size_values);

    ForwardCache<float> cache;
    const auto out = forward(state_.student, student_in, &cache);
    DetectorOutput<float> g;
    const auto loss = consistency_loss(out, heat_t, size_t_, config_.cons, &g);
    g.heatmap *= scale;
    for (int c = 0; c < 2; ++c) g.size[c] *= scale;
    backward(state_.student, cache, g, grad);
    mean.total += loss.total / batch.size();
    mean.heatmap += loss.heatmap / batch.size();
    mean.size += loss.size / batch.size();
  }
  return mean;
}

void Trainer::check_finite(const StepLoss& loss) const {
  if (std::isfinite(loss.total)) return;
  std::ostringstream msg;
  msg << "non-finite loss at step " << loss.step << " (" << to_string(config_.phase)
      << "): total=" << loss.total << " heatmap=" << loss.supervised.heatmap
      << " size=" << loss.supervised.size << " offset=" << loss.supervised.offset
      << " consistency=" << loss.consistency.total;
  throw TrainingDiverged(msg.str());
}

StepLoss Trainer::supervised_step() {
  Vector<float> grad = Vector<float>::Zero(state_.student.values.size());
  StepLoss loss;
  loss.step = state_.step + 1;
  const auto batch = sample_labeled();
  loss.labeled_count = static_cast<int>(batch.size());
  loss.supervised = accumulate_supervised(batch, grad);
  loss.total = loss.supervised.total;
  check_finite(loss);
  adam_step(state_.student.values, grad, state_.optimizer, adam_);
  ++state_.step;
  return loss;
}

StepLoss Trainer::ssl_step() {
  const auto n = state_.student.values.size();
  Vector<float> grad_sup = Vector<float>::Zero(n);
  Vector<float> grad_cons = Vector<float>::Zero(n);
  StepLoss loss;
  loss.step = state_.step + 1;
  const auto labeled = sample_labeled();
  loss.labeled_count = static_cast<int>(labeled.size());
  loss.supervised = accumulate_supervised(labeled, grad_sup);
  const auto unlabeled = sample_unlabeled();
  loss.unlabeled_count = static_cast<int>(unlabeled.size());
  if (!unlabeled.empty()) loss.consistency = accumulate_consistency(unlabeled, grad_cons);
  loss.total = loss.supervised.total + config_.unsup_weight * loss.consistency.total;
  check_finite(loss);
  const Vector<float> grad = grad_sup + static_cast<float>(config_.unsup_weight) * grad_cons;
  adam_step(state_.student.values, grad, state_.optimizer, adam_);
  ema_update(state_, config_.ema_alpha);
  ++state_.step;
  return loss;
}

StepLoss Trainer::step() {
  return config_.phase == TrainPhase::ssl ? ssl_step() : supervised_step();
}

std::vector<StudyPrediction> predict(const Parameters<float>& params, const std::vector<Study>& studies,
                                     const std::vector<std::size_t>& indices, const DecodeOptions& decode_opts) {
  DecodeOptions opts = decode_opts;
  opts.stride = params.config.stride;
  std::vector<StudyPrediction> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const Study& study = studies.at(i);
    StudyPrediction p;
    p.study_id = study.study_id;
    p.detections = decode(forward(params, study.sequences), opts);
    if (study.boxes) p.ground_truth = *study.boxes;
    out.push_back(std::move(p));
  }
  return out;
}

EvalResult evaluate(const Parameters<float>& params, const std::vector<Study>& studies,
                    const std::vector<std::size_t>& indices, const DecodeOptions& decode_opts,
                    const FrocOptions& froc_options) {
  for (std::size_t i : indices)
    if (!studies.at(i).boxes) throw InvariantViolation("evaluate: study without boxes: " + studies[i].study_id);
  const auto predictions = predict(params, studies, indices, decode_opts);
  return froc(predictions, froc_options);
}

Parameters<float> evaluation_params(const Checkpoint& checkpoint, bool prefer_teacher) {
  Parameters<float> p = checkpoint.student;
  if (prefer_teacher && checkpoint.teacher) p.values = *checkpoint.teacher;
  return p;
}

namespace {

Checkpoint to_checkpoint(const TeacherStudentState& state, const TrainConfig& config) {
  Checkpoint ckpt;
  ckpt.student = state.student;
  if (config.phase == TrainPhase::ssl) ckpt.teacher = state.teacher.values;
  ckpt.optimizer = state.optimizer;
  ckpt.step = state.step;
  ckpt.phase = std::string(to_string(config.phase));
  ckpt.train_config = config;
  return ckpt;
}

}  // namespace

FitResult fit(const TrainConfig& config, const ModelConfig& model, const std::vector<Study>& studies,
              const TrainingSplit& split, const std::optional<Checkpoint>& init) {
  validate(config);
  if (config.phase == TrainPhase::ssl && !init)
    throw ConfigError("ssl phase requires a supervised checkpoint to initialize from");

  TeacherStudentState state;
  if (init) {
    state = init_teacher_student(init->student);
    if (config.phase == TrainPhase::ssl && init->phase == "ssl" && init->teacher)
      state.teacher.values = *init->teacher;
  } else {
    validate(model, config.codec.stride);
    Rng rng = make_stream(model.seed, "init");
    state = init_teacher_student(init_params<float>(model, rng));
  }

  const std::filesystem::path out_dir = config.out_dir;
  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open metrics log in " + out_dir.string());
  }

  Trainer trainer(config, studies, split, std::move(state));
  FitResult result;
  result.losses.reserve(static_cast<std::size_t>(config.steps));
  double run_total = 0, run_sup = 0, run_cons = 0;
  int run_n = 0;
  const bool use_teacher = config.phase == TrainPhase::ssl && config.evaluate_teacher;

  for (int s = 1; s <= config.steps; ++s) {
    const StepLoss loss = trainer.step();
    result.losses.push_back(loss);
    run_total += loss.total;
    run_sup += loss.supervised.total;
    run_cons += loss.consistency.total;
    ++run_n;

    const bool due = (config.eval_every > 0 && s % config.eval_every == 0) || s == config.steps;
    if (!due) continue;
    EvalRecord record;
    record.step = s;
    record.loss = run_total / run_n;
    record.sup_loss = run_sup / run_n;
    record.cons_loss = run_cons / run_n;
    run_total = run_sup = run_cons = 0;
    run_n = 0;

    const auto& st = trainer.state();
    bool improved = false;
    if (!split.validation.empty()) {
      record.result =
          evaluate(use_teacher ? st.teacher : st.student, studies, split.validation, config.decode);
      if (record.result.average > result.best_average) {
        result.best_average = record.result.average;
        result.best_step = s;
        improved = true;
      }
    }
    if (metrics.is_open()) {
      nlohmann::json line{{"step", s},
                          {"phase", to_string(config.phase)},
                          {"loss", record.loss},
                          {"sup_loss", record.sup_loss},
                          {"cons_loss", record.cons_loss},
                          {"fp_points", record.result.fp_points},
                          {"sensitivities", record.result.sensitivities},
                          {"average", record.result.average}};
      metrics << line.dump() << '\n' << std::flush;
      const auto ckpt = to_checkpoint(st, config);
      save_checkpoint(ckpt, out_dir / "last.ckpt");
      if (improved || split.validation.empty()) save_checkpoint(ckpt, out_dir / "best.ckpt");
    }
    result.evaluations.push_back(std::move(record));
  }
  if (config.steps == 0 && !out_dir.empty()) {
    const auto ckpt = to_checkpoint(trainer.state(), config);
    save_checkpoint(ckpt, out_dir / "last.ckpt");
    save_checkpoint(ckpt, out_dir / "best.ckpt");
  }
  result.state = trainer.state();
  return result;
}

}  // namespace mthd
