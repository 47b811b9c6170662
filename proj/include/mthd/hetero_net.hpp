// Hetero-modal center-heatmap detector.
//
// Each present sequence runs through its own stride-2 stem; the resulting set
// of activations is fused into mean (+) population-variance channels, then a
// shared trunk downsamples to the output stride R and three heads predict the
// center heatmap (sigmoid), box size (softplus) and sub-cell offset (linear).
//
// All parameters live in one flat vector so that EMA, optimizer state and
// checkpointing operate on a single dense array.
#pragma once

#include "mthd/random.hpp"
#include "mthd/types.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mthd {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::vector<std::string> sequence_names;  // one stem per name
  int stem_channels = 8;
  int trunk_channels = 16;
  int trunk_depth = 2;  // dilated 3x3 blocks at the output stride
  int head_channels = 16;
  int stride = 4;       // output stride R: a power of two >= 2
  double heatmap_prior = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

/// Throws ConfigError if the config is unusable or its stride differs from the
/// codec stride the detector will be trained against.
void validate(const ModelConfig& config, int codec_stride);

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int dilation = 1;
  Eigen::Index weight_offset = 0;  // out x (in * k * k), row-major
  Eigen::Index bias_offset = 0;

  Eigen::Index fan_in() const { return static_cast<Eigen::Index>(in_channels) * kernel * kernel; }
};

struct NetworkLayout {
  std::vector<ConvSpec> stems;
  std::vector<ConvSpec> trunk;
  // {hidden 3x3, output 1x1} per head.
  std::array<ConvSpec, 2> heat_head, size_head, offset_head;
  Eigen::Index parameter_count = 0;
};

NetworkLayout make_layout(const ModelConfig& config);

template <typename Scalar>
struct Parameters {
  ModelConfig config;
  Vector<Scalar> values;
};

/// He-normal weights, zero biases; the heatmap output bias is set so initial
/// heatmap activations sit near config.heatmap_prior.
template <typename Scalar>
Parameters<Scalar> init_params(const ModelConfig& config, Rng& rng);

/// Channels x (H * W) activations, one row per channel.
template <typename Scalar>
struct FeatureMap {
  Matrix<Scalar> data;
  int height = 0;
  int width = 0;

  Eigen::Index channels() const { return data.rows(); }
};

/// Element-wise mean (+) population variance over a nonempty set of equally
/// shaped maps. Each element's values are sorted before summation, so the
/// result is bit-identical under any ordering of the inputs.
template <typename Scalar>
FeatureMap<Scalar> fuse(std::span<const FeatureMap<Scalar>> inputs);

template <typename Scalar>
using SequenceImages = std::vector<std::pair<std::string, Image<Scalar>>>;

/// Intermediate activations retained for backward().
template <typename Scalar>
struct ForwardCache {
  struct ConvRecord {
    Matrix<Scalar> columns;     // im2col of the input
    FeatureMap<Scalar> output;  // post-activation
    int in_height = 0, in_width = 0;
  };
  std::vector<int> stem_index;            // per present sequence
  std::vector<ConvRecord> stems;          // per present sequence
  FeatureMap<Scalar> fused;
  std::vector<ConvRecord> trunk;
  std::array<ConvRecord, 2> heat, size, offset;
  DetectorOutput<Scalar> output;
  std::array<Image<Scalar>, 2> size_logits;
};

/// Runs the detector on the sequences present. Absent sequences are simply
/// not part of the fused set. Throws std::invalid_argument for an empty input,
/// an unknown or repeated sequence name, or mismatched image shapes.
template <typename Scalar>
DetectorOutput<Scalar> forward(const Parameters<Scalar>& params,
                               const SequenceImages<Scalar>& images,
                               ForwardCache<Scalar>* cache = nullptr);

template <typename Scalar>
DetectorOutput<Scalar> forward(const Parameters<Scalar>& params,
                               const std::map<std::string, Image<Scalar>>& images,
                               ForwardCache<Scalar>* cache = nullptr) {
  return forward(params, SequenceImages<Scalar>(images.begin(), images.end()), cache);
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(outputs), where
/// the outputs are the post-activation maps returned by forward().
template <typename Scalar>
void backward(const Parameters<Scalar>& params, const ForwardCache<Scalar>& cache,
              const DetectorOutput<Scalar>& grad_output, Vector<Scalar>& grad);

}  // namespace mthd
