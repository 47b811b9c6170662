// Two-phase training: supervised pretraining of the detector, then
// mean-teacher semi-supervised fine-tuning with an EMA teacher.
#pragma once

#include "mthd/augment.hpp"
#include "mthd/checkpoint.hpp"
#include "mthd/dataset.hpp"
#include "mthd/froc.hpp"
#include "mthd/heatmap_codec.hpp"
#include "mthd/hetero_net.hpp"
#include "mthd/losses.hpp"
#include "mthd/optim.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mthd {

enum class TrainPhase { supervised, ssl };

std::string_view to_string(TrainPhase phase);

struct TrainConfig {
  TrainPhase phase = TrainPhase::supervised;
  double lr_supervised = 1.25e-4;
  double lr_ssl = 5e-5;
  double weight_decay = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  // Full scale: 30 epochs, batch 30 (supervised) / 12 (ssl) on ~1000 studies.
  int steps = 2000;
  int batch_size = 8;          // labeled studies per step
  double unlabeled_ratio = 1;  // unlabeled studies per labeled study
  double lesion_batch_ratio = 2;  // lesion : lesion-free labeled sampling odds
  double ema_alpha = 0.999;
  double unsup_weight = 0.02;
  SupLossConfig sup;
  ConsLossConfig cons;
  AugmentRanges augment;
  bool augment_labeled = false;  // intensity + geometric on labeled studies too
  bool evaluate_teacher = true;  // ssl phase: validate the EMA teacher
  CodecConfig codec;
  DecodeOptions decode;
  int eval_every = 250;  // 0: evaluate only at the end
  std::uint64_t seed = 0;
  std::string out_dir;  // checkpoints and metrics.jsonl; empty: nothing written
};

/// Throws ConfigError on the first violated constraint.
void validate(const TrainConfig& config);

/// Teacher and student parameter sets of identical structure.
struct TeacherStudentState {
  Parameters<float> student;
  Parameters<float> teacher;
  AdamState<float> optimizer;
  long step = 0;
};

/// Both sets start from the same pretrained parameters.
TeacherStudentState init_teacher_student(const Parameters<float>& pretrained);

/// Teacher <- alpha * teacher + (1 - alpha) * student.
void ema_update(TeacherStudentState& state, double alpha);

/// Indices into a study list, grouped by role.
struct TrainingSplit {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

struct SplitConfig {
  int n_folds = 5;
  int fold = 0;
  double labeled_fraction = 1.0;  // of training labeled studies that keep their boxes
  bool include_incomplete = true;
  std::uint64_t seed = 0;
};

/// Labeled studies are hashed into ten buckets: two test buckets per fold, the
/// next bucket validation, the remaining seven training (70/10/20). Training
/// labeled studies are then demoted to unlabeled by a second hash unless they
/// fall in the first labeled_fraction. Unlabeled studies always train.
TrainingSplit make_fold_split(const Manifest& manifest, const SplitConfig& config);

struct StepLoss {
  long step = 0;
  double total = 0;
  SupLoss supervised;
  ConsLoss consistency;
  int labeled_count = 0;
  int unlabeled_count = 0;
};

/// Mutable training state for the loop below. Randomness comes from named
/// streams of config.seed: batch/labeled, augment/labeled, batch/unlabeled,
/// augment/unlabeled.
class Trainer {
 public:
  Trainer(const TrainConfig& config, const std::vector<Study>& studies, TrainingSplit split,
          TeacherStudentState state);

  /// One optimizer step on a labeled batch.
  StepLoss supervised_step();
  /// One optimizer step on a labeled and an unlabeled batch, then the EMA.
  StepLoss ssl_step();
  StepLoss step();

  const TeacherStudentState& state() const { return state_; }
  TeacherStudentState& state() { return state_; }
  const TrainConfig& config() const { return config_; }

 private:
  struct Prepared {
    SequenceImages<float> images;
    TargetMaps<float> targets;
  };
  std::vector<std::size_t> sample_labeled();
  std::vector<std::size_t> sample_unlabeled();
  Prepared prepare_labeled(const Study& study);
  SupLoss accumulate_supervised(const std::vector<std::size_t>& batch, Vector<float>& grad);
  ConsLoss accumulate_consistency(const std::vector<std::size_t>& batch, Vector<float>& grad);
  void check_finite(const StepLoss& loss) const;

  TrainConfig config_;
  const std::vector<Study>& studies_;
  TrainingSplit split_;
  std::vector<std::size_t> with_lesions_, without_lesions_;
  TeacherStudentState state_;
  AdamConfig adam_;
  Rng batch_labeled_, augment_labeled_, batch_unlabeled_, augment_unlabeled_;
};

/// Raised when a loss becomes NaN or infinite.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Detections for every listed study using all of its sequences.
std::vector<StudyPrediction> predict(const Parameters<float>& params, const std::vector<Study>& studies,
                                     const std::vector<std::size_t>& indices,
                                     const DecodeOptions& decode = {});

/// Predicts and scores; studies must carry boxes.
EvalResult evaluate(const Parameters<float>& params, const std::vector<Study>& studies,
                    const std::vector<std::size_t>& indices, const DecodeOptions& decode = {},
                    const FrocOptions& froc_options = {});

struct EvalRecord {
  long step = 0;
  double loss = 0;  // mean total loss since the previous record
  double sup_loss = 0;
  double cons_loss = 0;
  EvalResult result;
};

struct FitResult {
  TeacherStudentState state;
  std::vector<StepLoss> losses;  // one per step
  std::vector<EvalRecord> evaluations;
  double best_average = -1;
  long best_step = -1;
};

/// Runs config.phase for config.steps steps. Supervised training starts from
/// `init` when given, otherwise from fresh parameters of `model`; SSL requires
/// `init`. Validation runs every eval_every steps and at the end when the
/// split has validation studies. With a non-empty out_dir writes last.ckpt,
/// best.ckpt and an append-only metrics.jsonl.
FitResult fit(const TrainConfig& config, const ModelConfig& model, const std::vector<Study>& studies,
              const TrainingSplit& split, const std::optional<Checkpoint>& init = std::nullopt);

/// Parameters a checkpoint evaluates with: the teacher when present and
/// requested, otherwise the student.
Parameters<float> evaluation_params(const Checkpoint& checkpoint, bool prefer_teacher = true);

}  // namespace mthd
