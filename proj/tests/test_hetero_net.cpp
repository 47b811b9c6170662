#include <doctest.h>

#include "mthd/dataset.hpp"
#include "mthd/hetero_net.hpp"

#include <algorithm>

using namespace mthd;

namespace {

ModelConfig small_config(int k = 3) {
  ModelConfig c;
  c.sequence_names = canonical_sequence_names(k);
  c.stem_channels = 3;
  c.trunk_channels = 4;
  c.trunk_depth = 1;
  c.head_channels = 3;
  c.stride = 4;
  return c;
}

template <typename S>
FeatureMap<S> random_map(Rng& rng, int c, int h, int w) {
  FeatureMap<S> m;
  m.height = h;
  m.width = w;
  m.data.resize(c, h * w);
  for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data.data()[i] = static_cast<S>(normal(rng));
  return m;
}

template <typename S>
Image<S> random_image(Rng& rng, int h, int w) {
  Image<S> img(h, w);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<S>(uniform(rng, 0, 1));
  return img;
}

template <typename S>
S linear_functional(const DetectorOutput<S>& out, const DetectorOutput<S>& w) {
  S total = out.heatmap.cwiseProduct(w.heatmap).sum();
  for (int c = 0; c < 2; ++c)
    total += out.size[c].cwiseProduct(w.size[c]).sum() + out.offset[c].cwiseProduct(w.offset[c]).sum();
  return total;
}

template <typename S>
DetectorOutput<S> random_output(Rng& rng, int r, int c) {
  auto o = DetectorOutput<S>::zeros(r, c);
  auto fill = [&](Image<S>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal(rng));
  };
  fill(o.heatmap);
  for (int k = 0; k < 2; ++k) {
    fill(o.size[k]);
    fill(o.offset[k]);
  }
  return o;
}

}  // namespace

TEST_CASE("fusion of a single input is the input and a zero variance") {
  Rng rng = make_stream(1, "fuse1");
  const std::vector<FeatureMap<double>> in{random_map<double>(rng, 3, 4, 5)};
  const auto out = fuse<double>(in);
  CHECK(out.channels() == 6);
  CHECK(out.data.topRows(3) == in[0].data);
  CHECK(out.data.bottomRows(3).isZero(0));
}

TEST_CASE("fusion matches a hand-computed mean and population variance") {
  FeatureMap<double> a, b;
  a.height = b.height = 1;
  a.width = b.width = 1;
  a.data = Matrix<double>::Constant(1, 1, 1.0);
  b.data = Matrix<double>::Constant(1, 1, 3.0);
  const std::vector<FeatureMap<double>> in{a, b};
  const auto out = fuse<double>(in);
  CHECK(out.data(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(out.data(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fusion is bit-identical under every ordering") {
  Rng rng = make_stream(2, "perm");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<FeatureMap<float>> in{random_map<float>(rng, 4, 6, 6), random_map<float>(rng, 4, 6, 6),
                                      random_map<float>(rng, 4, 6, 6)};
    std::vector<int> order{0, 1, 2};
    const auto ref = fuse<float>(in);
    while (std::next_permutation(order.begin(), order.end())) {
      std::vector<FeatureMap<float>> p{in[order[0]], in[order[1]], in[order[2]]};
      CHECK(fuse<float>(p).data == ref.data);
    }
  }
}

TEST_CASE("fusion rejects empty and mismatched sets") {
  Rng rng = make_stream(3, "bad");
  CHECK_THROWS_AS(fuse<double>(std::span<const FeatureMap<double>>{}), std::invalid_argument);
  const std::vector<FeatureMap<double>> in{random_map<double>(rng, 2, 4, 4), random_map<double>(rng, 2, 4, 5)};
  CHECK_THROWS_AS(fuse<double>(in), ShapeMismatch);
}

TEST_CASE("forward shapes, finiteness and input validation") {
  const auto cfg = small_config();
  Rng rng = make_stream(4, "fwd");
  const auto params = init_params<float>(cfg, rng);
  const SequenceImages<float> zero{{"seq1", ImageF::Zero(32, 24)}};
  const auto out = forward(params, zero);
  CHECK(out.heatmap.rows() == 8);
  CHECK(out.heatmap.cols() == 6);
  CHECK(out.heatmap.allFinite());
  CHECK(out.size[0].allFinite());
  CHECK(out.offset[1].allFinite());
  CHECK(out.size[0].minCoeff() >= 0);

  const ImageF img = random_image<float>(rng, 32, 32);
  const SequenceImages<float> twice{{"seq1", img}, {"seq2", img}};
  const auto dup = forward(params, twice);
  CHECK(dup.heatmap.rows() == 8);
  CHECK(dup.heatmap.cols() == 8);

  CHECK_THROWS_AS(forward(params, SequenceImages<float>{}), std::invalid_argument);
  CHECK_THROWS_AS(forward(params, SequenceImages<float>{{"seq9", img}}), std::invalid_argument);
  CHECK_THROWS_AS(forward(params, SequenceImages<float>{{"seq1", img}, {"seq1", img}}), std::invalid_argument);
  CHECK_THROWS(forward(params, SequenceImages<float>{{"seq1", img}, {"seq2", ImageF::Zero(32, 28)}}));
}

TEST_CASE("forward is invariant to the order of the sequences") {
  const auto cfg = small_config();
  Rng rng = make_stream(5, "order");
  const auto params = init_params<float>(cfg, rng);
  SequenceImages<float> in{{"seq1", random_image<float>(rng, 32, 32)},
                           {"seq2", random_image<float>(rng, 32, 32)},
                           {"seq3", random_image<float>(rng, 32, 32)}};
  const auto ref = forward(params, in);
  std::vector<int> order{0, 1, 2};
  while (std::next_permutation(order.begin(), order.end())) {
    SequenceImages<float> p{in[order[0]], in[order[1]], in[order[2]]};
    const auto out = forward(params, p);
    CHECK(out.heatmap == ref.heatmap);
    CHECK(out.size[0] == ref.size[0]);
    CHECK(out.offset[1] == ref.offset[1]);
  }
}

TEST_CASE("forward runs on every nonempty sequence subset") {
  auto cfg = small_config(5);
  Rng rng = make_stream(6, "subsets");
  const auto params = init_params<float>(cfg, rng);
  std::vector<ImageF> images;
  for (int s = 0; s < 5; ++s) images.push_back(random_image<float>(rng, 32, 32));
  int count = 0;
  for (int mask = 1; mask < 32; ++mask) {
    SequenceImages<float> in;
    for (int s = 0; s < 5; ++s)
      if (mask & (1 << s)) in.emplace_back(cfg.sequence_names[s], images[s]);
    const auto out = forward(params, in);
    CHECK(out.heatmap.allFinite());
    ++count;
  }
  CHECK(count == 31);
}

TEST_CASE("initialization is seeded and starts with a low heatmap") {
  const auto cfg = small_config();
  Rng a = make_stream(7, "init"), b = make_stream(7, "init");
  CHECK(init_params<float>(cfg, a).values == init_params<float>(cfg, b).values);

  Rng rng = make_stream(8, "prior");
  const auto params = init_params<float>(ModelConfig{canonical_sequence_names(5)}, rng);
  SequenceImages<float> in;
  for (const auto& name : params.config.sequence_names) in.emplace_back(name, random_image<float>(rng, 64, 64));
  CHECK(forward(params, in).heatmap.mean() < 0.3f);

  auto bad = small_config();
  CHECK_THROWS_AS(validate(bad, 8), ConfigError);
  bad.stride = 6;
  CHECK_THROWS_AS(validate(bad, 6), ConfigError);
}

TEST_CASE("backward matches central finite differences") {
  auto cfg = small_config(3);
  Rng rng = make_stream(9, "grad");
  auto params = init_params<double>(cfg, rng);
  // Move biases off zero so ReLU kinks are not hit exactly.
  for (Eigen::Index i = 0; i < params.values.size(); ++i) params.values[i] += 0.05 * normal(rng);
  const SequenceImages<double> in{{"seq1", random_image<double>(rng, 16, 16)},
                                  {"seq3", random_image<double>(rng, 16, 16)}};
  const auto weights = random_output<double>(rng, 4, 4);

  ForwardCache<double> cache;
  forward(params, in, &cache);
  Vector<double> grad = Vector<double>::Zero(params.values.size());
  backward(params, cache, weights, grad);

  auto objective = [&](const Parameters<double>& p) { return linear_functional(forward(p, in), weights); };
  const auto n = params.values.size();
  int checked = 0, failures = 0;
  for (Eigen::Index k = 0; k < n; k += std::max<Eigen::Index>(1, n / 150)) {
    auto plus = params, minus = params;
    const double h = 1e-6;
    plus.values[k] += h;
    minus.values[k] -= h;
    const double fd = (objective(plus) - objective(minus)) / (2 * h);
    const double err = std::abs(fd - grad[k]) / std::max(1e-6, std::abs(fd) + std::abs(grad[k]));
    if (err > 1e-4) ++failures;
    ++checked;
  }
  CHECK(checked > 100);
  CHECK(failures == 0);
}

TEST_CASE("fusion gradient matches finite differences on the stem activations") {
  Rng rng = make_stream(10, "fgrad");
  std::vector<FeatureMap<double>> in{random_map<double>(rng, 2, 3, 3), random_map<double>(rng, 2, 3, 3),
                                     random_map<double>(rng, 2, 3, 3)};
  Matrix<double> w(4, 9);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
  auto objective = [&](const std::vector<FeatureMap<double>>& x) { return fuse<double>(x).data.cwiseProduct(w).sum(); };
  // d/da of mean + variance channels, derived by hand: (w_mean + 2 w_var (a - mean)) / n.
  const auto fused = fuse<double>(in);
  for (std::size_t s = 0; s < in.size(); ++s)
    for (Eigen::Index e = 0; e < in[s].data.size(); ++e) {
      const Eigen::Index c = e / 9, p = e % 9;
      const double analytic = (w(c, p) + 2 * w(c + 2, p) * (in[s].data(c, p) - fused.data(c, p))) / 3.0;
      auto plus = in, minus = in;
      plus[s].data.data()[e] += 1e-6;
      minus[s].data.data()[e] -= 1e-6;
      CHECK(analytic == doctest::Approx((objective(plus) - objective(minus)) / 2e-6).epsilon(1e-6));
    }
}

TEST_CASE("every layer receives gradient when all sequences are present") {
  const auto cfg = small_config(5);
  Rng rng = make_stream(11, "flow");
  const auto params = init_params<double>(cfg, rng);
  const auto layout = make_layout(cfg);
  Vector<double> grad = Vector<double>::Zero(params.values.size());
  for (int b = 0; b < 2; ++b) {
    SequenceImages<double> in;
    for (const auto& name : cfg.sequence_names) in.emplace_back(name, random_image<double>(rng, 32, 32));
    ForwardCache<double> cache;
    const auto out = forward(params, in, &cache);
    backward(params, cache, random_output<double>(rng, out.rows(), out.cols()), grad);
  }
  std::vector<ConvSpec> all = layout.stems;
  all.insert(all.end(), layout.trunk.begin(), layout.trunk.end());
  for (const auto* head : {&layout.heat_head, &layout.size_head, &layout.offset_head})
    all.insert(all.end(), head->begin(), head->end());
  for (const auto& spec : all) {
    const auto nw = static_cast<Eigen::Index>(spec.out_channels) * spec.fan_in();
    CHECK(grad.segment(spec.weight_offset, nw).norm() > 0);
    CHECK(grad.segment(spec.bias_offset, spec.out_channels).norm() > 0);
  }
}
