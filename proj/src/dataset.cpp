#include "mthd/dataset.hpp"

#include "mthd/config.hpp"
#include "mthd/npy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace mthd {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::labeled: return "labeled";
    case SplitTag::unlabeled_complete: return "unlabeled_complete";
    case SplitTag::unlabeled_incomplete: return "unlabeled_incomplete";
  }
  return "labeled";
}

SplitTag split_tag_from_string(std::string_view text) {
  if (text == "labeled") return SplitTag::labeled;
  if (text == "unlabeled_complete") return SplitTag::unlabeled_complete;
  if (text == "unlabeled_incomplete") return SplitTag::unlabeled_incomplete;
  throw SchemaMismatch("unknown split tag: " + std::string(text));
}

std::vector<std::string> canonical_sequence_names(int k) {
  std::vector<std::string> names;
  for (int i = 1; i <= k; ++i) names.push_back("seq" + std::to_string(i));
  return names;
}

int Study::height() const {
  return sequences.empty() ? 0 : static_cast<int>(sequences.begin()->second.rows());
}

int Study::width() const {
  return sequences.empty() ? 0 : static_cast<int>(sequences.begin()->second.cols());
}

std::vector<std::string> Study::sequence_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : sequences) names.push_back(name);
  return names;
}

void validate_study(const Study& study, int k_sequences) {
  if (study.sequences.empty())
    throw InvariantViolation("study " + study.study_id + " has no sequences");
  const auto h = study.height();
  const auto w = study.width();
  for (const auto& [name, image] : study.sequences) {
    if (image.rows() != h || image.cols() != w)
      throw ShapeMismatch("study " + study.study_id + ": sequence " + name + " is " +
                          std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                          ", expected " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (study.boxes.has_value() != (study.split == SplitTag::labeled))
    throw InvariantViolation("study " + study.study_id + ": boxes must be present iff labeled");
  if (study.boxes) {
    for (const auto& box : *study.boxes) check_box(box, w, h);
  }
  const bool incomplete = static_cast<int>(study.sequences.size()) < k_sequences;
  if (incomplete != (study.split == SplitTag::unlabeled_incomplete))
    throw InvariantViolation("study " + study.study_id +
                             ": unlabeled_incomplete iff a canonical sequence is absent");
}

void validate(const DatasetSpec& spec) {
  if (spec.n_labeled < 0 || spec.n_unlabeled_complete < 0 || spec.n_unlabeled_incomplete < 0)
    throw ConfigError("study counts must be non-negative");
  if (spec.height <= 0 || spec.width <= 0) throw ConfigError("image size must be positive");
  if (spec.stride <= 0 || spec.height % spec.stride != 0 || spec.width % spec.stride != 0)
    throw ConfigError("H and W must be divisible by the output stride");
  if (spec.k_sequences < 1) throw ConfigError("k_sequences must be >= 1");
  if (spec.n_unlabeled_incomplete > 0 && spec.k_sequences < 2)
    throw ConfigError("incomplete studies need at least two sequences");
  if (spec.min_lesions < 0 || spec.max_lesions < spec.min_lesions)
    throw ConfigError("invalid lesion count range");
  if (spec.min_distractors < 0 || spec.max_distractors < spec.min_distractors)
    throw ConfigError("invalid distractor count range");
  if (!(spec.min_radius > 0) || spec.max_radius < spec.min_radius)
    throw ConfigError("invalid lesion radius range");
  if (!(spec.max_aspect >= 1.0)) throw ConfigError("max_aspect must be >= 1");
  // The widest allowed semi-axis must fit with a one-pixel margin.
  const double widest = spec.max_radius * spec.max_aspect;
  if (2.0 * (widest + 1.0) >= std::min(spec.height, spec.width))
    throw ConfigError("lesion radius range exceeds image bounds");
  if (!spec.appearance.empty() && static_cast<int>(spec.appearance.size()) != spec.k_sequences)
    throw ConfigError("appearance list must have one entry per sequence");
  if (spec.min_lesion_strength < 0 || spec.max_lesion_strength < spec.min_lesion_strength)
    throw ConfigError("invalid lesion strength range");
}

std::vector<SequenceAppearance> resolved_appearance(const DatasetSpec& spec) {
  if (!spec.appearance.empty()) return spec.appearance;
  // Stand-ins for T1WI / T2WI / venous / arterial / DWI: one hypo-intense
  // sequence, the rest hyper-intense with differing contrast-to-noise.
  static const SequenceAppearance defaults[] = {
      {-0.30, 0.30, 0.10, 1.0},
      {0.35, 0.35, 0.10, -0.6},
      {0.20, 0.30, 0.08, 0.8},
      {0.30, 0.40, 0.12, 0.9},
      {0.40, 0.40, 0.15, -0.4},
  };
  std::vector<SequenceAppearance> out;
  for (int i = 0; i < spec.k_sequences; ++i) out.push_back(defaults[i % 5]);
  return out;
}

ImageF render_blob(const LesionBlob& blob, int height, int width) {
  ImageF out = ImageF::Zero(height, width);
  const int i0 = std::max(0, static_cast<int>(std::floor(blob.center_y - blob.radius_y)));
  const int i1 = std::min(height - 1, static_cast<int>(std::ceil(blob.center_y + blob.radius_y)));
  const int j0 = std::max(0, static_cast<int>(std::floor(blob.center_x - blob.radius_x)));
  const int j1 = std::min(width - 1, static_cast<int>(std::ceil(blob.center_x + blob.radius_x)));
  for (int i = i0; i <= i1; ++i) {
    for (int j = j0; j <= j1; ++j) {
      const double dx = (j + 0.5 - blob.center_x) / blob.radius_x;
      const double dy = (i + 0.5 - blob.center_y) / blob.radius_y;
      const double d2 = dx * dx + dy * dy;
      if (d2 < 1.0) out(i, j) = static_cast<float>(1.0 - d2);
    }
  }
  return out;
}

namespace {

LesionBlob sample_blob(const DatasetSpec& spec, Rng& rng) {
  LesionBlob blob;
  const double r = uniform(rng, spec.min_radius, spec.max_radius);
  const double aspect = uniform(rng, 1.0, spec.max_aspect);
  if (uniform(rng, 0.0, 1.0) < 0.5) {
    blob.radius_x = r * aspect;
    blob.radius_y = r;
  } else {
    blob.radius_x = r;
    blob.radius_y = r * aspect;
  }
  blob.center_x = uniform(rng, blob.radius_x + 1.0, spec.width - blob.radius_x - 1.0);
  blob.center_y = uniform(rng, blob.radius_y + 1.0, spec.height - blob.radius_y - 1.0);
  blob.strength = uniform(rng, spec.min_lesion_strength, spec.max_lesion_strength);
  return blob;
}

bool separated(const LesionBlob& a, const LesionBlob& b, int stride) {
  const BBox ba = a.box();
  const BBox bb = b.box();
  constexpr double gap = 2.0;
  const bool disjoint = ba.x_max + gap <= bb.x_min || bb.x_max + gap <= ba.x_min ||
                        ba.y_max + gap <= bb.y_min || bb.y_max + gap <= ba.y_min;
  const bool distinct_cells =
      std::floor(a.center_x / stride) != std::floor(b.center_x / stride) ||
      std::floor(a.center_y / stride) != std::floor(b.center_y / stride);
  return disjoint && distinct_cells;
}

// Places up to `count` blobs that do not collide with `placed`; gives up on a
// blob after a fixed number of attempts so generation always terminates.
std::vector<LesionBlob> place_blobs(const DatasetSpec& spec, Rng& rng, int count,
                                    std::vector<LesionBlob>& placed) {
  std::vector<LesionBlob> out;
  for (int n = 0; n < count; ++n) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      LesionBlob candidate = sample_blob(spec, rng);
      const bool ok = std::all_of(placed.begin(), placed.end(), [&](const LesionBlob& other) {
        return separated(candidate, other, spec.stride);
      });
      if (ok) {
        placed.push_back(candidate);
        out.push_back(candidate);
        break;
      }
    }
  }
  return out;
}

// Low-frequency anatomy shared by all sequences of one study.
ImageD background_field(const DatasetSpec& spec, Rng& rng) {
  ImageD field = ImageD::Constant(spec.height, spec.width, 0.0);
  for (int g = 0; g < 4; ++g) {
    const double cx = uniform(rng, 0.0, spec.width);
    const double cy = uniform(rng, 0.0, spec.height);
    const double sigma = uniform(rng, 0.15, 0.4) * std::min(spec.height, spec.width);
    const double amp = uniform(rng, -0.25, 0.25);
    for (int i = 0; i < spec.height; ++i)
      for (int j = 0; j < spec.width; ++j) {
        const double dx = j + 0.5 - cx, dy = i + 0.5 - cy;
        field(i, j) += amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
  }
  return field;
}

// White noise smoothed by a 3x3 box filter and rescaled to unit variance;
// correlated noise produces blob-like clutter.
ImageD correlated_noise(int height, int width, Rng& rng) {
  ImageD white(height + 2, width + 2);
  for (Eigen::Index i = 0; i < white.size(); ++i) white.data()[i] = normal(rng);
  ImageD out(height, width);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) out(i, j) = white.block(i, j, 3, 3).sum() / 3.0;
  return out;
}

void normalize_unit_range(ImageD& image) {
  const double lo = image.minCoeff();
  const double hi = image.maxCoeff();
  if (hi - lo <= 0) {
    image.setZero();
    return;
  }
  image = (image.array() - lo) / (hi - lo);
}

}  // namespace

GeneratedStudy generate_study_detailed(const DatasetSpec& spec, Rng& rng, SplitTag split,
                                       std::string study_id) {
  validate(spec);
  const auto appearance = resolved_appearance(spec);
  const auto names = canonical_sequence_names(spec.k_sequences);

  GeneratedStudy result;
  Study& study = result.study;
  study.study_id = std::move(study_id);
  study.split = split;

  std::vector<LesionBlob> placed;
  const int n_lesions = static_cast<int>(uniform_int(rng, spec.min_lesions, spec.max_lesions));
  result.lesions = place_blobs(spec, rng, n_lesions, placed);
  const int n_distractors =
      static_cast<int>(uniform_int(rng, spec.min_distractors, spec.max_distractors));
  const auto distractors = place_blobs(spec, rng, n_distractors, placed);

  // Each distractor is visible in one or two sequences only.
  std::vector<std::vector<int>> distractor_seqs;
  for (std::size_t d = 0; d < distractors.size(); ++d) {
    std::vector<int> seqs{static_cast<int>(uniform_int(rng, 0, spec.k_sequences - 1))};
    if (spec.k_sequences > 1 && uniform(rng, 0.0, 1.0) < 0.4) {
      int other = static_cast<int>(uniform_int(rng, 0, spec.k_sequences - 2));
      if (other >= seqs[0]) ++other;
      seqs.push_back(other);
    }
    distractor_seqs.push_back(std::move(seqs));
  }

  const ImageD anatomy = background_field(spec, rng);
  std::vector<ImageF> lesion_renders, distractor_renders;
  for (const auto& blob : result.lesions)
    lesion_renders.push_back(render_blob(blob, spec.height, spec.width));
  for (const auto& blob : distractors)
    distractor_renders.push_back(render_blob(blob, spec.height, spec.width));

  for (int s = 0; s < spec.k_sequences; ++s) {
    const auto& look = appearance[s];
    const double gain = uniform(rng, 0.8, 1.2);
    ImageD image = (0.5 + look.background_weight * anatomy.array()).matrix();
    for (std::size_t l = 0; l < result.lesions.size(); ++l)
      image += (gain * look.lesion_contrast * result.lesions[l].strength) *
               lesion_renders[l].cast<double>();
    for (std::size_t d = 0; d < distractors.size(); ++d) {
      const auto& seqs = distractor_seqs[d];
      if (std::find(seqs.begin(), seqs.end(), s) != seqs.end())
        image += (gain * look.distractor_contrast * distractors[d].strength) *
                 distractor_renders[d].cast<double>();
    }
    image += look.noise_std * correlated_noise(spec.height, spec.width, rng);
    normalize_unit_range(image);
    study.sequences.emplace(names[s], image.cast<float>());
  }

  if (split == SplitTag::labeled) {
    std::vector<BBox> boxes;
    for (const auto& blob : result.lesions) boxes.push_back(blob.box());
    study.boxes = std::move(boxes);
  }
  if (split == SplitTag::unlabeled_incomplete) {
    // Uniform over the 2^k - 2 nonempty strict subsets to drop.
    const long full = (1L << spec.k_sequences) - 1;
    const long drop = uniform_int(rng, 1, full - 1);
    for (int s = 0; s < spec.k_sequences; ++s)
      if (drop & (1L << s)) study.sequences.erase(names[s]);
  }
  return result;
}

Study generate_study(const DatasetSpec& spec, Rng& rng, SplitTag split, std::string study_id) {
  return generate_study_detailed(spec, rng, split, std::move(study_id)).study;
}

int Manifest::count(SplitTag tag) const {
  return static_cast<int>(std::count_if(entries.begin(), entries.end(),
                                        [&](const ManifestEntry& e) { return e.split == tag; }));
}

std::string Manifest::summary() const {
  std::ostringstream out;
  out << entries.size() << " studies (" << count(SplitTag::labeled) << " labeled / "
      << count(SplitTag::unlabeled_complete) << " complete / "
      << count(SplitTag::unlabeled_incomplete) << " incomplete)";
  return out.str();
}

ManifestEntry manifest_entry(const Study& study) {
  return {study.study_id, study.split, study.sequence_names(), study.height(), study.width()};
}

Dataset generate_dataset(const DatasetSpec& spec) {
  validate(spec);
  Dataset dataset;
  dataset.manifest.spec = spec;
  int index = 0;
  auto emit = [&](SplitTag tag, int count) {
    for (int n = 0; n < count; ++n, ++index) {
      char id[32];
      std::snprintf(id, sizeof id, "study_%05d", index);
      Rng rng = make_stream(spec.seed, std::string("study/") + id);
      dataset.studies.push_back(generate_study(spec, rng, tag, id));
      dataset.manifest.entries.push_back(manifest_entry(dataset.studies.back()));
    }
  };
  emit(SplitTag::labeled, spec.n_labeled);
  emit(SplitTag::unlabeled_complete, spec.n_unlabeled_complete);
  emit(SplitTag::unlabeled_incomplete, spec.n_unlabeled_incomplete);
  return dataset;
}

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaMismatch("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << doc.dump(2) << '\n';
}

void check_schema(const json& doc, const fs::path& path) {
  if (!doc.contains("schema_version") || doc["schema_version"] != kDatasetSchemaVersion)
    throw SchemaMismatch("schema_version mismatch in " + path.string());
}

}  // namespace

void save_study(const Study& study, const fs::path& study_dir) {
  fs::create_directories(study_dir);
  for (const auto& [name, image] : study.sequences) npy::write(study_dir / (name + ".npy"), image);
  json doc;
  doc["schema_version"] = kDatasetSchemaVersion;
  doc["study_id"] = study.study_id;
  doc["split_tag"] = to_string(study.split);
  doc["sequences"] = study.sequence_names();
  if (study.boxes) {
    json boxes = json::array();
    for (const auto& b : *study.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    doc["boxes"] = boxes;
  } else {
    doc["boxes"] = nullptr;
  }
  write_json(study_dir / "boxes.json", doc);
}

Study load_study(const fs::path& study_dir) {
  const fs::path meta_path = study_dir / "boxes.json";
  const json doc = read_json(meta_path);
  check_schema(doc, meta_path);

  Study study;
  try {
    study.study_id = doc.at("study_id").get<std::string>();
    study.split = split_tag_from_string(doc.at("split_tag").get<std::string>());
    for (const auto& name : doc.at("sequences"))
      study.sequences.emplace(name.get<std::string>(),
                              npy::read(study_dir / (name.get<std::string>() + ".npy")));
    if (!doc.at("boxes").is_null()) {
      std::vector<BBox> boxes;
      for (const auto& b : doc.at("boxes")) {
        if (b.size() != 4) throw SchemaMismatch("box must have 4 coordinates");
        boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                         b[3].get<double>()});
      }
      study.boxes = std::move(boxes);
    }
  } catch (const json::exception& e) {
    throw SchemaMismatch("bad study metadata in " + meta_path.string() + ": " + e.what());
  }
  if (study.sequences.empty())
    throw InvariantViolation("study " + study.study_id + " has no sequences");
  const auto h = study.height();
  const auto w = study.width();
  for (const auto& [name, image] : study.sequences)
    if (image.rows() != h || image.cols() != w)
      throw ShapeMismatch("sequence " + name + " of " + study.study_id +
                          " does not match the study's image shape");
  if (study.boxes)
    for (const auto& box : *study.boxes) check_box(box, w, h);
  if (study.boxes.has_value() != (study.split == SplitTag::labeled))
    throw InvariantViolation("study " + study.study_id + ": boxes must be present iff labeled");
  return study;
}

void save_manifest(const Manifest& manifest, const fs::path& root) {
  fs::create_directories(root);
  json doc;
  doc["schema_version"] = kDatasetSchemaVersion;
  doc["spec"] = manifest.spec;
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"study_id", e.study_id},
                       {"split_tag", to_string(e.split)},
                       {"sequences", e.sequences},
                       {"shape", {e.height, e.width}}});
  }
  doc["studies"] = entries;
  doc["counts"] = {{"labeled", manifest.count(SplitTag::labeled)},
                   {"unlabeled_complete", manifest.count(SplitTag::unlabeled_complete)},
                   {"unlabeled_incomplete", manifest.count(SplitTag::unlabeled_incomplete)},
                   {"total", manifest.entries.size()}};
  write_json(root / "manifest.json", doc);
}

Manifest load_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  const json doc = read_json(path);
  check_schema(doc, path);
  Manifest manifest;
  try {
    if (doc.contains("spec")) manifest.spec = doc["spec"].get<DatasetSpec>();
    for (const auto& e : doc.at("studies")) {
      ManifestEntry entry;
      entry.study_id = e.at("study_id").get<std::string>();
      entry.split = split_tag_from_string(e.at("split_tag").get<std::string>());
      entry.sequences = e.at("sequences").get<std::vector<std::string>>();
      entry.height = e.at("shape").at(0).get<int>();
      entry.width = e.at("shape").at(1).get<int>();
      manifest.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw SchemaMismatch("bad manifest " + path.string() + ": " + e.what());
  }
  return manifest;
}

void save_dataset(const Dataset& dataset, const fs::path& root) {
  for (const auto& study : dataset.studies) save_study(study, root / study.study_id);
  save_manifest(dataset.manifest, root);
}

Dataset load_dataset(const fs::path& root) {
  Dataset dataset;
  dataset.manifest = load_manifest(root);
  for (const auto& entry : dataset.manifest.entries) {
    Study study = load_study(root / entry.study_id);
    if (study.split != entry.split || study.sequence_names() != entry.sequences)
      throw SchemaMismatch("manifest disagrees with study " + entry.study_id);
    dataset.studies.push_back(std::move(study));
  }
  return dataset;
}

}  // namespace mthd
