#include <doctest.h>

#include "mthd/heatmap_codec.hpp"
#include "mthd/losses.hpp"
#include "mthd/random.hpp"

using namespace mthd;

namespace {

ImageD random_image(Rng& rng, int r, int c, double lo, double hi) {
  ImageD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, lo, hi);
  return m;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

// Fourth-order central difference of f at x along one coordinate.
template <typename F>
double central_diff(F&& f, double& x, double h) {
  const double x0 = x;
  auto at = [&](double v) {
    x = v;
    return f();
  };
  const double d = (8 * (at(x0 + h) - at(x0 - h)) - (at(x0 + 2 * h) - at(x0 - 2 * h))) / (12 * h);
  x = x0;
  return d;
}

ImageD rot90(const ImageD& m) {
  ImageD r(m.cols(), m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r(m.cols() - 1 - j, i) = m(i, j);
  return r;
}

}  // namespace

TEST_CASE("focal loss closed form on a single positive cell") {
  const ImageD y = ImageD::Constant(1, 1, 1.0), p = ImageD::Constant(1, 1, 0.5);
  CHECK(focal_heatmap_loss(p, y) == doctest::Approx(-0.25 * std::log(0.5)).epsilon(1e-12));
  CHECK(focal_heatmap_loss(p, y) == doctest::Approx(0.1733).epsilon(1e-3));
}

TEST_CASE("focal loss vanishes for a clamped perfect prediction of a point target") {
  const std::vector<BBox> boxes{{4, 4, 4.3, 4.3}, {20, 8, 20.2, 8.2}};
  const auto t = encode<double>(boxes, 32, 32);
  const ImageD pred = t.heatmap.cwiseMax(kFocalEpsilon).cwiseMin(1 - kFocalEpsilon);
  CHECK(focal_heatmap_loss(pred, t.heatmap) <= 1e-4);
}

TEST_CASE("focal loss gradient matches finite differences") {
  Rng rng = make_stream(1, "focal");
  for (int trial = 0; trial < 50; ++trial) {
    const ImageD pred = random_image(rng, 4, 4, 0.02, 0.98);
    ImageD y = random_image(rng, 4, 4, 0, 0.9);
    y(uniform_int(rng, 0, 3), uniform_int(rng, 0, 3)) = 1.0;
    ImageD grad;
    focal_heatmap_loss(pred, y, 2.0, 4.0, &grad);
    ImageD p = pred;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double fd = central_diff([&] { return focal_heatmap_loss(p, y); }, p.data()[k], 1e-4);
      CHECK(rel_err(fd, grad.data()[k]) < 1e-4);
    }
  }
}

TEST_CASE("masked L1 values and empty mask") {
  VectorField<double> pred{ImageD::Zero(2, 2), ImageD::Zero(2, 2)}, target = pred;
  Mask mask = Mask::Constant(2, 2, false);
  mask(0, 1) = true;
  CHECK(masked_l1(pred, target, mask) == 0.0);
  pred[0](0, 1) = 1;
  pred[1](0, 1) = -3;
  pred[0](1, 1) = 100;  // unmasked
  CHECK(masked_l1(pred, target, mask) == 2.0);

  VectorField<double> grad;
  CHECK(masked_l1(pred, target, Mask::Constant(2, 2, false), &grad) == 0.0);
  CHECK(grad[0].isZero(0));
  CHECK(grad[1].isZero(0));
}

TEST_CASE("masked L1 gradient matches finite differences") {
  Rng rng = make_stream(2, "l1");
  for (int trial = 0; trial < 50; ++trial) {
    VectorField<double> pred{random_image(rng, 4, 4, -2, 2), random_image(rng, 4, 4, -2, 2)};
    VectorField<double> target{random_image(rng, 4, 4, -2, 2), random_image(rng, 4, 4, -2, 2)};
    Mask mask(4, 4);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform(rng, 0, 1) < 0.4;
    VectorField<double> grad;
    masked_l1(pred, target, mask, &grad);
    for (int c = 0; c < 2; ++c)
      for (Eigen::Index k = 0; k < 16; ++k) {
        auto a = pred, b = pred;
        a[c].data()[k] += 1e-6;
        b[c].data()[k] -= 1e-6;
        const double fd = (masked_l1(a, target, mask) - masked_l1(b, target, mask)) / 2e-6;
        if (fd == 0 && grad[c].data()[k] == 0) continue;
        CHECK(rel_err(fd, grad[c].data()[k]) < 1e-3);
      }
  }
}

TEST_CASE("supervised loss composes the three terms") {
  // 2x2 hand instance: one positive cell with p = 0.5, others background.
  auto out = DetectorOutput<double>::zeros(2, 2);
  out.heatmap << 0.5, 0.2, 0.1, 0.3;
  TargetMaps<double> t;
  t.heatmap.resize(2, 2);
  t.heatmap << 1.0, 0.5, 0.0, 0.0;
  t.size = zero_field<double>(2, 2);
  t.offset = zero_field<double>(2, 2);
  t.center_mask = Mask::Constant(2, 2, false);
  t.center_mask(0, 0) = true;
  t.size[0](0, 0) = 3;
  t.size[1](0, 0) = 2;
  out.size[0](0, 0) = 2;  // |diff| 1
  out.size[1](0, 0) = 5;  // |diff| 3
  t.offset[0](0, 0) = 0.5;
  t.offset[1](0, 0) = 0.25;
  out.offset[0](0, 0) = 0.25;  // |diff| 0.25
  out.offset[1](0, 0) = 0.5;   // |diff| 0.25

  const double focal = -0.25 * std::log(0.5)                                   // positive
                       - std::pow(0.5, 4) * 0.04 * std::log(0.8)               // Y = 0.5
                       - 0.01 * std::log(0.9) - 0.09 * std::log(0.7);          // Y = 0
  const SupLossConfig cfg{2, 4, 0.1, 1};
  const auto loss = sup_loss(out, t, cfg);
  CHECK(loss.heatmap == doctest::Approx(focal).epsilon(1e-12));
  CHECK(loss.size == doctest::Approx(2.0));
  CHECK(loss.offset == doctest::Approx(0.25));
  CHECK(loss.total == doctest::Approx(focal + 0.1 * 2.0 + 0.25).epsilon(1e-12));
}

TEST_CASE("supervised loss is near zero for an empty target and is non-negative") {
  auto out = DetectorOutput<double>::zeros(8, 8);
  out.heatmap.setConstant(1e-4);
  const auto t = encode<double>({}, 32, 32);
  CHECK(sup_loss(out, t).total < 1e-6);

  Rng rng = make_stream(3, "nonneg");
  for (int trial = 0; trial < 50; ++trial) {
    auto o = DetectorOutput<double>::zeros(8, 8);
    o.heatmap = random_image(rng, 8, 8, 0, 1);
    for (int c = 0; c < 2; ++c) {
      o.size[c] = random_image(rng, 8, 8, 0, 5);
      o.offset[c] = random_image(rng, 8, 8, -1, 2);
    }
    const std::vector<BBox> boxes{{uniform(rng, 0, 10), uniform(rng, 0, 10), uniform(rng, 12, 30), uniform(rng, 12, 30)}};
    CHECK(sup_loss(o, encode<double>(boxes, 32, 32)).total >= 0);
  }
}

TEST_CASE("supervised loss is invariant under joint 90 degree rotation") {
  Rng rng = make_stream(4, "rotinv");
  auto out = DetectorOutput<double>::zeros(8, 8);
  out.heatmap = random_image(rng, 8, 8, 0.01, 0.99);
  for (int c = 0; c < 2; ++c) {
    out.size[c] = random_image(rng, 8, 8, 0, 4);
    out.offset[c] = random_image(rng, 8, 8, 0, 1);
  }
  const std::vector<BBox> boxes{{2, 3, 9, 13}, {17, 15, 28, 24}};
  const auto t = encode<double>(boxes, 32, 32);

  auto rout = out;
  auto rt = t;
  rout.heatmap = rot90(out.heatmap);
  rt.heatmap = rot90(t.heatmap);
  for (int c = 0; c < 2; ++c) {
    rout.size[c] = rot90(out.size[c]);
    rout.offset[c] = rot90(out.offset[c]);
    rt.size[c] = rot90(t.size[c]);
    rt.offset[c] = rot90(t.offset[c]);
  }
  Mask m(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) m(7 - j, i) = t.center_mask(i, j);
  rt.center_mask = m;
  CHECK(sup_loss(rout, rt).total == doctest::Approx(sup_loss(out, t).total).epsilon(1e-12));
}

TEST_CASE("consistency loss values") {
  Rng rng = make_stream(5, "cons");
  auto s = DetectorOutput<double>::zeros(4, 4);
  s.heatmap = random_image(rng, 4, 4, 0, 1);
  s.size = {random_image(rng, 4, 4, 0, 3), random_image(rng, 4, 4, 0, 3)};
  CHECK(consistency_loss(s, s.heatmap, s.size).total == 0.0);

  const ImageD shifted = (s.heatmap.array() + 0.1).matrix();
  CHECK(consistency_loss(s, shifted, s.size, {7.0}).total == doctest::Approx(0.01).epsilon(1e-9));

  const VectorField<double> other{random_image(rng, 4, 4, 0, 3), random_image(rng, 4, 4, 0, 3)};
  CHECK(consistency_loss(s, shifted, other, {0.0}).total == consistency_loss(s, shifted, s.size, {0.0}).total);
  CHECK_THROWS_AS(consistency_loss(s, ImageD(ImageD::Zero(3, 4)), s.size), ShapeMismatch);
}

TEST_CASE("consistency loss gradient matches finite differences, offsets excluded") {
  Rng rng = make_stream(6, "consgrad");
  for (int trial = 0; trial < 50; ++trial) {
    auto s = DetectorOutput<double>::zeros(4, 4);
    s.heatmap = random_image(rng, 4, 4, 0, 1);
    s.size = {random_image(rng, 4, 4, 0, 3), random_image(rng, 4, 4, 0, 3)};
    s.offset = {random_image(rng, 4, 4, 0, 1), random_image(rng, 4, 4, 0, 1)};
    const ImageD th = random_image(rng, 4, 4, 0, 1);
    const VectorField<double> ts{random_image(rng, 4, 4, 0, 3), random_image(rng, 4, 4, 0, 3)};
    const ConsLossConfig cfg{0.5};
    DetectorOutput<double> g;
    consistency_loss(s, th, ts, cfg, &g);
    CHECK(g.offset[0].isZero(0));
    CHECK(g.offset[1].isZero(0));
    auto check_map = [&](ImageD& map, const ImageD& gmap) {
      for (Eigen::Index k = 0; k < map.size(); ++k) {
        const double orig = map.data()[k];
        map.data()[k] = orig + 1e-6;
        const double up = consistency_loss(s, th, ts, cfg).total;
        map.data()[k] = orig - 1e-6;
        const double down = consistency_loss(s, th, ts, cfg).total;
        map.data()[k] = orig;
        CHECK(rel_err((up - down) / 2e-6, gmap.data()[k]) < 1e-3);
      }
    };
    check_map(s.heatmap, g.heatmap);
    check_map(s.size[0], g.size[0]);
    check_map(s.size[1], g.size[1]);
  }
}
