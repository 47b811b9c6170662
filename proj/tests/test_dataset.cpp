#include <doctest.h>

#include "mthd/config.hpp"
#include "mthd/dataset.hpp"
#include "mthd/npy.hpp"
#include "test_util.hpp"

#include <fstream>
#include <set>

using namespace mthd;

namespace {

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.height = spec.width = 48;
  spec.seed = 11;
  return spec;
}

bool same_study(const Study& a, const Study& b) {
  if (a.study_id != b.study_id || a.split != b.split || a.boxes != b.boxes) return false;
  if (a.sequences.size() != b.sequences.size()) return false;
  for (const auto& [name, img] : a.sequences) {
    auto it = b.sequences.find(name);
    if (it == b.sequences.end() || img != it->second) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("no lesions gives an empty box list") {
  auto spec = small_spec();
  spec.min_lesions = spec.max_lesions = 0;
  Rng rng = make_stream(1, "s");
  const auto study = generate_study(spec, rng, SplitTag::labeled, "a");
  REQUIRE(study.boxes);
  CHECK(study.boxes->empty());
}

TEST_CASE("single lesion box agrees with the rendered blob extent") {
  auto spec = small_spec();
  spec.min_lesions = spec.max_lesions = 1;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng = make_stream(trial, "single");
    const auto g = generate_study_detailed(spec, rng, SplitTag::labeled, "x");
    REQUIRE(g.lesions.size() == 1);
    REQUIRE(g.study.boxes->size() == 1);
    const auto& lesion = g.lesions[0];
    const BBox box = g.study.boxes->front();
    CHECK(box == lesion.box());

    const ImageF blob = render_blob(lesion, spec.height, spec.width);
    double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
    for (int i = 0; i < blob.rows(); ++i)
      for (int j = 0; j < blob.cols(); ++j)
        if (blob(i, j) > 0) {
          x0 = std::min(x0, j + 0.5);
          x1 = std::max(x1, j + 0.5);
          y0 = std::min(y0, i + 0.5);
          y1 = std::max(y1, i + 0.5);
        }
    CHECK(std::abs(x0 - box.x_min) <= 1.0);
    CHECK(std::abs(x1 - box.x_max) <= 1.0);
    CHECK(std::abs(y0 - box.y_min) <= 1.0);
    CHECK(std::abs(y1 - box.y_max) <= 1.0);
  }
}

TEST_CASE("each box contains the brightest lesion pixel in some sequence") {
  auto spec = small_spec();
  spec.min_lesions = 1;
  Rng rng = make_stream(3, "peak");
  for (int s = 0; s < 10; ++s) {
    const auto g = generate_study_detailed(spec, rng, SplitTag::labeled, "p");
    for (const auto& lesion : g.lesions) {
      const ImageF blob = render_blob(lesion, spec.height, spec.width);
      Eigen::Index pi, pj;
      blob.maxCoeff(&pi, &pj);
      const BBox b = lesion.box();
      CHECK(pj + 0.5 >= b.x_min);
      CHECK(pj + 0.5 <= b.x_max);
      CHECK(pi + 0.5 >= b.y_min);
      CHECK(pi + 0.5 <= b.y_max);
    }
  }
}

TEST_CASE("generation is deterministic") {
  const auto spec = small_spec();
  Rng a = make_stream(5, "d"), b = make_stream(5, "d");
  CHECK(same_study(generate_study(spec, a, SplitTag::labeled, "s"), generate_study(spec, b, SplitTag::labeled, "s")));
  const auto d1 = generate_dataset(spec);
  const auto d2 = generate_dataset(spec);
  REQUIRE(d1.studies.size() == d2.studies.size());
  for (std::size_t i = 0; i < d1.studies.size(); ++i) CHECK(same_study(d1.studies[i], d2.studies[i]));
}

TEST_CASE("images are normalized and studies satisfy their invariants") {
  const auto d = generate_dataset(small_spec());
  for (const auto& s : d.studies) {
    validate_study(s, 5);
    for (const auto& [name, img] : s.sequences) {
      CHECK(img.minCoeff() >= 0.0f);
      CHECK(img.maxCoeff() <= 1.0f);
    }
  }
}

TEST_CASE("dataset counts and split partition") {
  auto spec = small_spec();
  const auto d = generate_dataset(spec);
  CHECK(d.studies.size() == 18);
  int incomplete = 0;
  std::set<std::string> ids;
  for (const auto& s : d.studies) {
    ids.insert(s.study_id);
    if (s.sequences.size() < 5) {
      ++incomplete;
      CHECK(s.split == SplitTag::unlabeled_incomplete);
      CHECK(!s.boxes);
    }
  }
  CHECK(incomplete == 3);
  CHECK(ids.size() == 18);

  spec.n_labeled = spec.n_unlabeled_complete = 0;
  spec.n_unlabeled_incomplete = 1;
  const auto one = generate_dataset(spec);
  REQUIRE(one.studies.size() == 1);
  CHECK(!one.studies[0].boxes);
  CHECK(one.studies[0].split == SplitTag::unlabeled_incomplete);

  spec.n_labeled = 43;
  spec.n_unlabeled_complete = 50;
  spec.n_unlabeled_incomplete = 17;
  const auto scaled = generate_dataset(spec);
  CHECK(scaled.manifest.entries.size() == 110);
  CHECK(scaled.manifest.summary() == "110 studies (43 labeled / 50 complete / 17 incomplete)");
}

TEST_CASE("incomplete subsets are uniform over nonempty strict subsets") {
  auto spec = small_spec();
  spec.k_sequences = 3;
  spec.height = spec.width = 32;
  spec.max_radius = 5;
  std::map<std::size_t, int> by_size;
  for (int i = 0; i < 600; ++i) {
    Rng rng = make_stream(i, "inc");
    by_size[generate_study(spec, rng, SplitTag::unlabeled_incomplete, "i").sequences.size()]++;
  }
  // 6 nonempty strict subsets of 3: three of size 1, three of size 2.
  CHECK(by_size.count(3) == 0);
  CHECK(by_size[1] == doctest::Approx(300).epsilon(0.15));
  CHECK(by_size[2] == doctest::Approx(300).epsilon(0.15));
}

TEST_CASE("spec validation") {
  auto spec = small_spec();
  spec.max_radius = 30;
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = small_spec();
  spec.height = 50;
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = small_spec();
  spec.n_labeled = -1;
  CHECK_THROWS_AS(validate(spec), ConfigError);
}

TEST_CASE("study and dataset round-trip through disk") {
  const auto dir = scratch_dir("dataset_rt");
  const auto d = generate_dataset(small_spec());
  save_dataset(d, dir);
  const auto back = load_dataset(dir);
  REQUIRE(back.studies.size() == d.studies.size());
  for (std::size_t i = 0; i < d.studies.size(); ++i) CHECK(same_study(d.studies[i], back.studies[i]));
  CHECK(back.manifest.summary() == d.manifest.summary());
  CHECK(nlohmann::json(back.manifest.spec) == nlohmann::json(d.manifest.spec));
}

TEST_CASE("load rejects mismatched shapes, bad boxes and wrong schema") {
  const auto dir = scratch_dir("dataset_bad");
  Rng rng = make_stream(2, "bad");
  auto spec = small_spec();
  spec.min_lesions = 1;
  const auto study = generate_study(spec, rng, SplitTag::labeled, "bad");

  save_study(study, dir / "shape");
  npy::write(dir / "shape" / "seq2.npy", ImageF::Zero(10, 12));
  CHECK_THROWS_AS(load_study(dir / "shape"), ShapeMismatch);

  save_study(study, dir / "box");
  {
    auto doc = nlohmann::json::parse(std::ifstream(dir / "box" / "boxes.json"));
    doc["boxes"][0] = {10.0, 5.0, 10.0, 8.0};
    std::ofstream(dir / "box" / "boxes.json") << doc.dump();
  }
  CHECK_THROWS_AS(load_study(dir / "box"), InvariantViolation);

  save_study(study, dir / "schema");
  {
    auto doc = nlohmann::json::parse(std::ifstream(dir / "schema" / "boxes.json"));
    doc["schema_version"] = 99;
    std::ofstream(dir / "schema" / "boxes.json") << doc.dump();
  }
  CHECK_THROWS_AS(load_study(dir / "schema"), SchemaMismatch);

  CHECK_THROWS_AS(load_study(dir / "missing"), std::runtime_error);
}

TEST_CASE("npy files round-trip and carry a standard header") {
  const auto dir = scratch_dir("npy");
  ImageF img(3, 4);
  for (int i = 0; i < 12; ++i) img.data()[i] = 0.25f * i - 1;
  npy::write(dir / "a.npy", img);
  CHECK(npy::read(dir / "a.npy") == img);
  std::ifstream in(dir / "a.npy", std::ios::binary);
  std::string head(128, '\0');
  in.read(head.data(), 128);
  CHECK(head.substr(1, 5) == "NUMPY");
  CHECK(head.find("'descr': '<f4'") != std::string::npos);
  CHECK(head.find("'shape': (3, 4)") != std::string::npos);
}
