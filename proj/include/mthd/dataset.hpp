// Synthetic multi-sequence studies: generation, persistence and loading.
//
// A study is one patient with one 2-D slice per sequence. Lesions are
// elliptical blobs whose contrast differs per sequence; distractor blobs show
// up in only one or two sequences, so telling them apart requires looking at
// several sequences together.
#pragma once

#include "mthd/random.hpp"
#include "mthd/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mthd {

inline constexpr int kDatasetSchemaVersion = 1;

enum class SplitTag { labeled, unlabeled_complete, unlabeled_incomplete };

std::string_view to_string(SplitTag tag);
SplitTag split_tag_from_string(std::string_view text);

/// Canonical sequence names "seq1".."seqK".
std::vector<std::string> canonical_sequence_names(int k);

struct Study {
  std::string study_id;
  std::map<std::string, ImageF> sequences;
  std::optional<std::vector<BBox>> boxes;  // present iff split == labeled
  SplitTag split = SplitTag::labeled;

  int height() const;
  int width() const;
  std::vector<std::string> sequence_names() const;
};

/// Throws InvariantViolation / ShapeMismatch if the study breaks its invariants
/// (given the canonical sequence count k).
void validate_study(const Study& study, int k_sequences);

struct SequenceAppearance {
  double lesion_contrast = 0.3;      // signed blob amplitude
  double distractor_contrast = 0.3;  // amplitude of blobs visible only here
  double noise_std = 0.1;
  double background_weight = 1.0;    // sign/scale of the shared anatomy field
};

struct DatasetSpec {
  int n_labeled = 10;
  int n_unlabeled_complete = 5;
  int n_unlabeled_incomplete = 3;
  int height = 64;
  int width = 64;
  int stride = 4;
  int k_sequences = 5;
  int min_lesions = 0;
  int max_lesions = 3;
  double min_radius = 3.0;  // pixels, semi-axis
  double max_radius = 8.0;
  double max_aspect = 1.3;  // ratio between the two semi-axes
  double min_lesion_strength = 0.6;  // per-lesion contrast multiplier range
  double max_lesion_strength = 1.2;
  int min_distractors = 0;
  int max_distractors = 2;
  std::vector<SequenceAppearance> appearance;  // empty -> built-in defaults
  std::uint64_t seed = 0;
};

/// Throws ConfigError describing the first violated constraint.
void validate(const DatasetSpec& spec);

/// Per-sequence appearance after filling in defaults.
std::vector<SequenceAppearance> resolved_appearance(const DatasetSpec& spec);

/// A rendered lesion, kept alongside the study for tests and diagnostics.
struct LesionBlob {
  double center_x = 0, center_y = 0;
  double radius_x = 0, radius_y = 0;
  double strength = 1;
  BBox box() const {
    return {center_x - radius_x, center_y - radius_y, center_x + radius_x, center_y + radius_y};
  }
};

/// Blob profile (1 - d^2 inside the ellipse, 0 outside) evaluated at pixel
/// centers, unit amplitude.
ImageF render_blob(const LesionBlob& blob, int height, int width);

struct GeneratedStudy {
  Study study;
  std::vector<LesionBlob> lesions;
};

/// Deterministic given the rng state. Unlabeled studies keep their lesions in
/// the images but carry no boxes.
GeneratedStudy generate_study_detailed(const DatasetSpec& spec, Rng& rng, SplitTag split,
                                       std::string study_id);
Study generate_study(const DatasetSpec& spec, Rng& rng, SplitTag split, std::string study_id);

struct ManifestEntry {
  std::string study_id;
  SplitTag split = SplitTag::labeled;
  std::vector<std::string> sequences;
  int height = 0;
  int width = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  DatasetSpec spec;

  int count(SplitTag tag) const;
  /// "110 studies (43 labeled / 50 complete / 17 incomplete)"
  std::string summary() const;
};

struct Dataset {
  std::vector<Study> studies;
  Manifest manifest;
};

ManifestEntry manifest_entry(const Study& study);

/// Studies in split order (labeled, complete, incomplete), each drawn from its
/// own named stream of spec.seed.
Dataset generate_dataset(const DatasetSpec& spec);

// On-disk layout: <root>/<study_id>/<seq>.npy, <root>/<study_id>/boxes.json,
// <root>/manifest.json.
void save_study(const Study& study, const std::filesystem::path& study_dir);
Study load_study(const std::filesystem::path& study_dir);

void save_manifest(const Manifest& manifest, const std::filesystem::path& root);
Manifest load_manifest(const std::filesystem::path& root);

void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

}  // namespace mthd
