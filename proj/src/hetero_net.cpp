#include "mthd/hetero_net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>

namespace mthd {

void validate(const ModelConfig& config, int codec_stride) {
  if (config.sequence_names.empty()) throw ConfigError("model needs at least one sequence");
  std::set<std::string> unique(config.sequence_names.begin(), config.sequence_names.end());
  if (unique.size() != config.sequence_names.size())
    throw ConfigError("duplicate sequence names in model config");
  if (config.stem_channels < 1 || config.trunk_channels < 1 || config.head_channels < 1 ||
      config.trunk_depth < 0)
    throw ConfigError("channel widths must be positive and trunk depth non-negative");
  if (config.stride < 2 || !std::has_single_bit(static_cast<unsigned>(config.stride)))
    throw ConfigError("output stride must be a power of two >= 2");
  if (config.stride != codec_stride)
    throw ConfigError("model stride " + std::to_string(config.stride) +
                      " does not match codec stride " + std::to_string(codec_stride));
  if (!(config.heatmap_prior > 0 && config.heatmap_prior < 1))
    throw ConfigError("heatmap_prior must be in (0, 1)");
}

NetworkLayout make_layout(const ModelConfig& config) {
  NetworkLayout layout;
  Eigen::Index offset = 0;
  auto add = [&](int in, int out, int kernel, int stride, int dilation) {
    ConvSpec spec;
    spec.in_channels = in;
    spec.out_channels = out;
    spec.kernel = kernel;
    spec.stride = stride;
    spec.dilation = dilation;
    spec.pad = dilation * (kernel - 1) / 2;
    spec.weight_offset = offset;
    offset += static_cast<Eigen::Index>(out) * spec.fan_in();
    spec.bias_offset = offset;
    offset += out;
    return spec;
  };

  const int cs = config.stem_channels;
  const int ct = config.trunk_channels;
  const int ch = config.head_channels;
  for (std::size_t k = 0; k < config.sequence_names.size(); ++k)
    layout.stems.push_back(add(1, cs, 3, 2, 1));
  layout.trunk.push_back(add(2 * cs, ct, 3, 1, 1));
  for (int s = config.stride / 2; s > 1; s /= 2) layout.trunk.push_back(add(ct, ct, 3, 2, 1));
  for (int d = 0; d < config.trunk_depth; ++d) layout.trunk.push_back(add(ct, ct, 3, 1, 2));
  layout.heat_head = {add(ct, ch, 3, 1, 1), add(ch, 1, 1, 1, 1)};
  layout.size_head = {add(ct, ch, 3, 1, 1), add(ch, 2, 1, 1, 1)};
  layout.offset_head = {add(ct, ch, 3, 1, 1), add(ch, 2, 1, 1, 1)};
  layout.parameter_count = offset;
  return layout;
}

template <typename Scalar>
Parameters<Scalar> init_params(const ModelConfig& config, Rng& rng) {
  validate(config, config.stride);
  const NetworkLayout layout = make_layout(config);
  Parameters<Scalar> params{config, Vector<Scalar>::Zero(layout.parameter_count)};

  auto he_normal = [&](const ConvSpec& spec, double gain) {
    const double std = gain * std::sqrt(2.0 / static_cast<double>(spec.fan_in()));
    const Eigen::Index n = static_cast<Eigen::Index>(spec.out_channels) * spec.fan_in();
    for (Eigen::Index i = 0; i < n; ++i)
      params.values[spec.weight_offset + i] = static_cast<Scalar>(std * normal(rng));
  };
  for (const auto& s : layout.stems) he_normal(s, 1.0);
  for (const auto& s : layout.trunk) he_normal(s, 1.0);
  for (const auto* head : {&layout.heat_head, &layout.size_head, &layout.offset_head}) {
    he_normal((*head)[0], 1.0);
    he_normal((*head)[1], 0.1);
  }

  const double prior = config.heatmap_prior;
  params.values[layout.heat_head[1].bias_offset] = static_cast<Scalar>(std::log(prior / (1 - prior)));
  // softplus(b) = 2 cells, a typical lesion extent at stride 4.
  for (int c = 0; c < 2; ++c) {
    params.values[layout.size_head[1].bias_offset + c] = static_cast<Scalar>(std::log(std::expm1(2.0)));
    params.values[layout.offset_head[1].bias_offset + c] = Scalar(0.5);
  }
  return params;
}

namespace {

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const Matrix<Scalar>>;
template <typename Scalar>
using MatrixMap = Eigen::Map<Matrix<Scalar>>;

int conv_extent(int in, const ConvSpec& spec) {
  return (in + 2 * spec.pad - spec.dilation * (spec.kernel - 1) - 1) / spec.stride + 1;
}

template <typename Scalar>
Matrix<Scalar> im2col(const FeatureMap<Scalar>& in, const ConvSpec& spec, int out_h, int out_w) {
  const int k = spec.kernel;
  Matrix<Scalar> cols(in.channels() * k * k, static_cast<Eigen::Index>(out_h) * out_w);
  for (Eigen::Index c = 0; c < in.channels(); ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        Scalar* row = cols.row((c * k + ki) * k + kj).data();
        for (int oi = 0; oi < out_h; ++oi) {
          const int ii = oi * spec.stride - spec.pad + ki * spec.dilation;
          Scalar* dst = row + static_cast<Eigen::Index>(oi) * out_w;
          if (ii < 0 || ii >= in.height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          const Scalar* src = in.data.row(c).data() + static_cast<Eigen::Index>(ii) * in.width;
          for (int oj = 0; oj < out_w; ++oj) {
            const int jj = oj * spec.stride - spec.pad + kj * spec.dilation;
            dst[oj] = (jj < 0 || jj >= in.width) ? Scalar(0) : src[jj];
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
FeatureMap<Scalar> col2im(const Matrix<Scalar>& cols, const ConvSpec& spec, int in_h, int in_w,
                          int out_h, int out_w) {
  const int k = spec.kernel;
  FeatureMap<Scalar> grad{Matrix<Scalar>::Zero(spec.in_channels, static_cast<Eigen::Index>(in_h) * in_w),
                          in_h, in_w};
  for (int c = 0; c < spec.in_channels; ++c) {
    Scalar* plane = grad.data.row(c).data();
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const Scalar* row = cols.row((static_cast<Eigen::Index>(c) * k + ki) * k + kj).data();
        for (int oi = 0; oi < out_h; ++oi) {
          const int ii = oi * spec.stride - spec.pad + ki * spec.dilation;
          if (ii < 0 || ii >= in_h) continue;
          const Scalar* src = row + static_cast<Eigen::Index>(oi) * out_w;
          Scalar* dst = plane + static_cast<Eigen::Index>(ii) * in_w;
          for (int oj = 0; oj < out_w; ++oj) {
            const int jj = oj * spec.stride - spec.pad + kj * spec.dilation;
            if (jj >= 0 && jj < in_w) dst[jj] += src[oj];
          }
        }
      }
    }
  }
  return grad;
}

enum class Activation { none, relu };

template <typename Scalar>
typename ForwardCache<Scalar>::ConvRecord conv_forward(const Vector<Scalar>& values,
                                                       const ConvSpec& spec,
                                                       const FeatureMap<Scalar>& in,
                                                       Activation act) {
  typename ForwardCache<Scalar>::ConvRecord rec;
  rec.in_height = in.height;
  rec.in_width = in.width;
  const int out_h = conv_extent(in.height, spec);
  const int out_w = conv_extent(in.width, spec);
  rec.columns = im2col(in, spec, out_h, out_w);
  ConstMatrixMap<Scalar> weight(values.data() + spec.weight_offset, spec.out_channels, spec.fan_in());
  Eigen::Map<const Vector<Scalar>> bias(values.data() + spec.bias_offset, spec.out_channels);
  rec.output.height = out_h;
  rec.output.width = out_w;
  rec.output.data.noalias() = weight * rec.columns;
  rec.output.data.colwise() += bias;
  if (act == Activation::relu) rec.output.data = rec.output.data.cwiseMax(Scalar(0));
  return rec;
}

// `grad_out` is with respect to the pre-activation output. Returns the input
// gradient when `want_input` is set.
template <typename Scalar>
FeatureMap<Scalar> conv_backward(const Vector<Scalar>& values, const ConvSpec& spec,
                                 const typename ForwardCache<Scalar>::ConvRecord& rec,
                                 const Matrix<Scalar>& grad_out, Vector<Scalar>& grad,
                                 bool want_input) {
  MatrixMap<Scalar> dweight(grad.data() + spec.weight_offset, spec.out_channels, spec.fan_in());
  Eigen::Map<Vector<Scalar>> dbias(grad.data() + spec.bias_offset, spec.out_channels);
  dweight.noalias() += grad_out * rec.columns.transpose();
  dbias += grad_out.rowwise().sum();
  if (!want_input) return {};
  ConstMatrixMap<Scalar> weight(values.data() + spec.weight_offset, spec.out_channels, spec.fan_in());
  Matrix<Scalar> dcols = weight.transpose() * grad_out;
  return col2im(dcols, spec, rec.in_height, rec.in_width, rec.output.height, rec.output.width);
}

template <typename Scalar>
Matrix<Scalar> relu_backward(const Matrix<Scalar>& grad, const FeatureMap<Scalar>& output) {
  return (output.data.array() > Scalar(0)).select(grad, Scalar(0));
}

template <typename Scalar>
Image<Scalar> plane(const FeatureMap<Scalar>& map, Eigen::Index channel) {
  return Eigen::Map<const Image<Scalar>>(map.data.row(channel).data(), map.height, map.width);
}

template <typename Scalar>
Eigen::Matrix<Scalar, 1, Eigen::Dynamic> flat(const Image<Scalar>& image) {
  return Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(image.data(), image.size());
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(20) ? x : std::log1p(std::exp(x));
}

}  // namespace

template <typename Scalar>
FeatureMap<Scalar> fuse(std::span<const FeatureMap<Scalar>> inputs) {
  if (inputs.empty()) throw std::invalid_argument("fuse: empty input set");
  const auto& first = inputs.front();
  for (const auto& in : inputs)
    if (in.data.rows() != first.data.rows() || in.data.cols() != first.data.cols() ||
        in.height != first.height || in.width != first.width)
      throw ShapeMismatch("fuse: activation shapes differ");

  const auto n = inputs.size();
  const Eigen::Index channels = first.channels();
  const Eigen::Index cells = first.data.cols();
  FeatureMap<Scalar> out{Matrix<Scalar>(2 * channels, cells), first.height, first.width};
  std::vector<Scalar> values(n);
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (Eigen::Index e = 0; e < cells; ++e) {
      for (std::size_t i = 0; i < n; ++i) values[i] = inputs[i].data(c, e);
      std::sort(values.begin(), values.end());
      Scalar sum = 0;
      for (Scalar v : values) sum += v;
      const Scalar mean = sum * inv_n;
      Scalar sq = 0;
      for (Scalar v : values) sq += (v - mean) * (v - mean);
      out.data(c, e) = mean;
      out.data(channels + c, e) = sq * inv_n;
    }
  }
  return out;
}

template <typename Scalar>
DetectorOutput<Scalar> forward(const Parameters<Scalar>& params, const SequenceImages<Scalar>& images,
                               ForwardCache<Scalar>* cache) {
  const auto& config = params.config;
  if (images.empty()) throw std::invalid_argument("forward: no sequences given");
  const NetworkLayout layout = make_layout(config);
  if (params.values.size() != layout.parameter_count)
    throw ShapeMismatch("forward: parameter vector does not match the model config");

  ForwardCache<Scalar> local;
  ForwardCache<Scalar>& c = cache ? *cache : local;
  c = ForwardCache<Scalar>{};

  const auto height = images.front().second.rows();
  const auto width = images.front().second.cols();
  if (height % config.stride != 0 || width % config.stride != 0)
    throw std::invalid_argument("forward: image size must be divisible by the stride");
  std::set<int> seen;
  for (const auto& [name, image] : images) {
    const auto it = std::find(config.sequence_names.begin(), config.sequence_names.end(), name);
    if (it == config.sequence_names.end())
      throw std::invalid_argument("forward: unknown sequence '" + name + "'");
    const int index = static_cast<int>(it - config.sequence_names.begin());
    if (!seen.insert(index).second)
      throw std::invalid_argument("forward: sequence '" + name + "' given twice");
    if (image.rows() != height || image.cols() != width)
      throw std::invalid_argument("forward: sequence images differ in shape");
    FeatureMap<Scalar> input{flat(image), static_cast<int>(height), static_cast<int>(width)};
    c.stem_index.push_back(index);
    c.stems.push_back(conv_forward(params.values, layout.stems[index], input, Activation::relu));
  }

  std::vector<FeatureMap<Scalar>> activations;
  activations.reserve(c.stems.size());
  for (const auto& rec : c.stems) activations.push_back(rec.output);
  c.fused = fuse<Scalar>(activations);

  const FeatureMap<Scalar>* x = &c.fused;
  for (const auto& spec : layout.trunk) {
    c.trunk.push_back(conv_forward(params.values, spec, *x, Activation::relu));
    x = &c.trunk.back().output;
  }
  const FeatureMap<Scalar>& features = *x;

  auto run_head = [&](const std::array<ConvSpec, 2>& head, std::array<typename ForwardCache<Scalar>::ConvRecord, 2>& rec) {
    rec[0] = conv_forward(params.values, head[0], features, Activation::relu);
    rec[1] = conv_forward(params.values, head[1], rec[0].output, Activation::none);
  };
  run_head(layout.heat_head, c.heat);
  run_head(layout.size_head, c.size);
  run_head(layout.offset_head, c.offset);

  DetectorOutput<Scalar>& out = c.output;
  out.heatmap = plane(c.heat[1].output, 0).unaryExpr([](Scalar v) { return sigmoid(v); });
  for (int ch = 0; ch < 2; ++ch) {
    c.size_logits[ch] = plane(c.size[1].output, ch);
    out.size[ch] = c.size_logits[ch].unaryExpr([](Scalar v) { return softplus(v); });
    out.offset[ch] = plane(c.offset[1].output, ch);
  }
  return out;
}

template <typename Scalar>
void backward(const Parameters<Scalar>& params, const ForwardCache<Scalar>& cache,
              const DetectorOutput<Scalar>& grad_output, Vector<Scalar>& grad) {
  const NetworkLayout layout = make_layout(params.config);
  if (grad.size() != layout.parameter_count) grad = Vector<Scalar>::Zero(layout.parameter_count);
  const auto& values = params.values;
  const auto& out = cache.output;

  // Output-layer gradients with respect to the logits.
  const Image<Scalar> dheat =
      grad_output.heatmap.array() * out.heatmap.array() * (Scalar(1) - out.heatmap.array());
  Matrix<Scalar> dheat_logits = flat(dheat);
  Matrix<Scalar> dsize_logits(2, dheat.size());
  Matrix<Scalar> doffset(2, dheat.size());
  for (int ch = 0; ch < 2; ++ch) {
    const Image<Scalar> d = grad_output.size[ch].array() *
                            cache.size_logits[ch].unaryExpr([](Scalar v) { return sigmoid(v); }).array();
    dsize_logits.row(ch) = flat(d);
    doffset.row(ch) = flat(grad_output.offset[ch]);
  }

  const auto& features = cache.trunk.back().output;
  Matrix<Scalar> dfeatures = Matrix<Scalar>::Zero(features.channels(), features.data.cols());
  auto head_backward = [&](const std::array<ConvSpec, 2>& head,
                           const std::array<typename ForwardCache<Scalar>::ConvRecord, 2>& rec,
                           const Matrix<Scalar>& dlogits) {
    FeatureMap<Scalar> dhidden = conv_backward(values, head[1], rec[1], dlogits, grad, true);
    FeatureMap<Scalar> din =
        conv_backward(values, head[0], rec[0], relu_backward(dhidden.data, rec[0].output), grad, true);
    dfeatures += din.data;
  };
  head_backward(layout.heat_head, cache.heat, dheat_logits);
  head_backward(layout.size_head, cache.size, dsize_logits);
  head_backward(layout.offset_head, cache.offset, doffset);

  Matrix<Scalar> dx = std::move(dfeatures);
  for (std::size_t t = layout.trunk.size(); t-- > 0;) {
    FeatureMap<Scalar> din = conv_backward(values, layout.trunk[t], cache.trunk[t],
                                           relu_backward(dx, cache.trunk[t].output), grad, true);
    dx = std::move(din.data);
  }

  // Fusion: mean' = 1/n, var' = 2 (a_i - mean) / n.
  const Eigen::Index channels = dx.rows() / 2;
  const auto n = static_cast<Scalar>(cache.stems.size());
  const auto mean = cache.fused.data.topRows(channels);
  const auto dmean = dx.topRows(channels);
  const auto dvar = dx.bottomRows(channels);
  for (std::size_t s = 0; s < cache.stems.size(); ++s) {
    const auto& rec = cache.stems[s];
    Matrix<Scalar> da =
        (dmean.array() + Scalar(2) * dvar.array() * (rec.output.data.array() - mean.array())) / n;
    conv_backward(values, layout.stems[cache.stem_index[s]], rec, relu_backward(da, rec.output), grad,
                  false);
  }
}

template Parameters<float> init_params<float>(const ModelConfig&, Rng&);
template Parameters<double> init_params<double>(const ModelConfig&, Rng&);
template FeatureMap<float> fuse<float>(std::span<const FeatureMap<float>>);
template FeatureMap<double> fuse<double>(std::span<const FeatureMap<double>>);
template DetectorOutput<float> forward<float>(const Parameters<float>&, const SequenceImages<float>&,
                                              ForwardCache<float>*);
template DetectorOutput<double> forward<double>(const Parameters<double>&,
                                                const SequenceImages<double>&, ForwardCache<double>*);
template void backward<float>(const Parameters<float>&, const ForwardCache<float>&,
                              const DetectorOutput<float>&, Vector<float>&);
template void backward<double>(const Parameters<double>&, const ForwardCache<double>&,
                               const DetectorOutput<double>&, Vector<double>&);

}  // namespace mthd
