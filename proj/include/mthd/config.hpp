// JSON mappings for every configuration type, and the experiment config file.
//
// Missing keys take their defaults; unknown keys are rejected when a whole
// experiment config is loaded.
#pragma once

#include "mthd/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mthd {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SequenceAppearance, lesion_contrast, distractor_contrast,
                                                noise_std, background_weight)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetSpec, n_labeled, n_unlabeled_complete,
                                                n_unlabeled_incomplete, height, width, stride, k_sequences,
                                                min_lesions, max_lesions, min_radius, max_radius, max_aspect,
                                                min_lesion_strength, max_lesion_strength, min_distractors,
                                                max_distractors, appearance, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, sequence_names, stem_channels, trunk_channels,
                                                trunk_depth, head_channels, stride, heatmap_prior, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SupLossConfig, focal_alpha, focal_beta, size_weight,
                                                offset_weight)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ConsLossConfig, size_weight)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentRanges, gamma_min, gamma_max, max_rotation_deg,
                                                scale_min, scale_max, max_shift_fraction, intensity, geometric,
                                                sequence_subset, rescale_size_values)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CodecConfig, stride, min_overlap)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecodeOptions, stride, top_k, score_threshold)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitConfig, n_folds, fold, labeled_fraction,
                                                include_incomplete, seed)

void to_json(nlohmann::json& j, TrainPhase phase);
void from_json(const nlohmann::json& j, TrainPhase& phase);
void to_json(nlohmann::json& j, SensitivityMode mode);
void from_json(const nlohmann::json& j, SensitivityMode& mode);

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, phase, lr_supervised, lr_ssl, weight_decay,
                                                adam_beta1, adam_beta2, adam_epsilon, steps, batch_size,
                                                unlabeled_ratio, lesion_batch_ratio, ema_alpha, unsup_weight,
                                                sup, cons, augment, augment_labeled, evaluate_teacher, codec,
                                                decode, eval_every, seed, out_dir)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FrocOptions, fp_points, iou_threshold, mode)

struct AblationConfig {
  std::vector<std::string> rows{"supervised", "intensity_only", "geometric", "full", "no_incomplete"};
  int supervised_steps = 1500;
  int ssl_steps = 1500;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AblationConfig, rows, supervised_steps, ssl_steps)

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSpec data;
  ModelConfig model;
  TrainConfig train;
  SplitConfig split;
  FrocOptions eval;
  AblationConfig ablation;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, seed, data, model, train, split, eval, ablation)

/// Copies the top-level seed into every sub-config that draws randomness.
void propagate_seed(ExperimentConfig& config, std::uint64_t seed);

/// Applies "dotted.key.path=value" to a JSON document. The value is parsed as
/// JSON when possible, otherwise taken as a string. Throws ConfigError when
/// the path does not exist in the document.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Throws ConfigError naming the first key of `doc` that `reference` lacks.
void reject_unknown_keys(const nlohmann::json& doc, const nlohmann::json& reference,
                         const std::string& prefix = "");

/// Defaults, then the file (if any), then the overrides in order.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});
ExperimentConfig parse_experiment_config(const nlohmann::json& doc,
                                         const std::vector<std::string>& overrides = {});

}  // namespace mthd
