#include "fedwsidd/features.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "fedwsidd/archive.hpp"

namespace fedwsidd {

namespace {

// fixed input standardization; toy tissue intensities span roughly 0.5 +- 1/6
constexpr double kInputMean = 0.5;
constexpr double kInputGain = 6.0;

inline double squareplus(double z) { return 0.5 * (z + std::sqrt(z * z + 1.0)); }
inline double squareplus_grad(double z) { return 0.5 * (1.0 + z / std::sqrt(z * z + 1.0)); }

// Copies a (C,H,W) map into a zero-bordered (C,H+2,W+2) buffer.
void pad_into(const double* src, int channels, int h, int w, std::vector<double>& dst) {
  const int wp = w + 2;
  const int hp = h + 2;
  dst.assign(static_cast<std::size_t>(channels) * hp * wp, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < h; ++y) {
      const double* s = src + (static_cast<std::size_t>(c) * h + y) * w;
      std::copy(s, s + w, dst.data() + (static_cast<std::size_t>(c) * hp + y + 1) * wp + 1);
    }
  }
}

// out[o] = bias[o] + sum_i k[o][i] (*) in_pad[i], "same" 3x3 cross-correlation.
// Output channels are processed four at a time so each input row is loaded once
// per group.
void conv3x3(const double* __restrict in_pad, int in_channels, int h, int w, const double* __restrict kernels,
             const double* __restrict bias, int out_channels, double* __restrict out) {
  const int wp = w + 2;
  const std::size_t in_plane = static_cast<std::size_t>(h + 2) * wp;
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  for (int o = 0; o < out_channels; ++o) {
    std::fill(out + o * out_plane, out + (o + 1) * out_plane, bias ? bias[o] : 0.0);
  }
  int o = 0;
  for (; o + 4 <= out_channels; o += 4) {
    for (int i = 0; i < in_channels; ++i) {
      double k[4][9];
      for (int g = 0; g < 4; ++g)
        for (int t = 0; t < 9; ++t) k[g][t] = kernels[(static_cast<std::size_t>(o + g) * in_channels + i) * 9 + t];
      const double* src = in_pad + static_cast<std::size_t>(i) * in_plane;
      for (int y = 0; y < h; ++y) {
        const double* __restrict r0 = src + static_cast<std::size_t>(y) * wp;
        const double* __restrict r1 = r0 + wp;
        const double* __restrict r2 = r1 + wp;
        double* __restrict d0 = out + o * out_plane + static_cast<std::size_t>(y) * w;
        double* __restrict d1 = d0 + out_plane;
        double* __restrict d2 = d1 + out_plane;
        double* __restrict d3 = d2 + out_plane;
        for (int x = 0; x < w; ++x) {
          const double a0 = r0[x], a1 = r0[x + 1], a2 = r0[x + 2];
          const double b0 = r1[x], b1 = r1[x + 1], b2 = r1[x + 2];
          const double c0 = r2[x], c1 = r2[x + 1], c2 = r2[x + 2];
          d0[x] += k[0][0] * a0 + k[0][1] * a1 + k[0][2] * a2 + k[0][3] * b0 + k[0][4] * b1 + k[0][5] * b2 +
                   k[0][6] * c0 + k[0][7] * c1 + k[0][8] * c2;
          d1[x] += k[1][0] * a0 + k[1][1] * a1 + k[1][2] * a2 + k[1][3] * b0 + k[1][4] * b1 + k[1][5] * b2 +
                   k[1][6] * c0 + k[1][7] * c1 + k[1][8] * c2;
          d2[x] += k[2][0] * a0 + k[2][1] * a1 + k[2][2] * a2 + k[2][3] * b0 + k[2][4] * b1 + k[2][5] * b2 +
                   k[2][6] * c0 + k[2][7] * c1 + k[2][8] * c2;
          d3[x] += k[3][0] * a0 + k[3][1] * a1 + k[3][2] * a2 + k[3][3] * b0 + k[3][4] * b1 + k[3][5] * b2 +
                   k[3][6] * c0 + k[3][7] * c1 + k[3][8] * c2;
        }
      }
    }
  }
  for (; o < out_channels; ++o) {
    for (int i = 0; i < in_channels; ++i) {
      const double* k = kernels + (static_cast<std::size_t>(o) * in_channels + i) * 9;
      const double* src = in_pad + static_cast<std::size_t>(i) * in_plane;
      for (int y = 0; y < h; ++y) {
        const double* __restrict r0 = src + static_cast<std::size_t>(y) * wp;
        const double* __restrict r1 = r0 + wp;
        const double* __restrict r2 = r1 + wp;
        double* __restrict dst = out + o * out_plane + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
          dst[x] += k[0] * r0[x] + k[1] * r0[x + 1] + k[2] * r0[x + 2] + k[3] * r1[x] + k[4] * r1[x + 1] +
                    k[5] * r1[x + 2] + k[6] * r2[x] + k[7] * r2[x + 1] + k[8] * r2[x + 2];
        }
      }
    }
  }
}

// Kernels for the input gradient: transposed channels, spatially flipped.
std::vector<double> flipped_transpose(const SmallConvExtractor::Layer& layer) {
  std::vector<double> out(layer.weights.size());
  for (int o = 0; o < layer.out_channels; ++o)
    for (int i = 0; i < layer.in_channels; ++i)
      for (int t = 0; t < 9; ++t)
        out[(static_cast<std::size_t>(i) * layer.out_channels + o) * 9 + (8 - t)] =
            layer.weights[(static_cast<std::size_t>(o) * layer.in_channels + i) * 9 + t];
  return out;
}

class IdentityTape final : public FeatureTape {};

// Per-thread scratch space; large buffers are kept alive between calls.
struct Scratch {
  std::vector<double> act;
  std::vector<double> padded;
  std::vector<double> z;
  std::vector<double> pooled;
};

Scratch& scratch() {
  thread_local Scratch s;
  return s;
}

}  // namespace

struct SmallConvExtractor::Tape final : FeatureTape {
  std::array<std::vector<double>, 3> pre_activation;
};

void FeatureExtractor::check_input(const PatchTensor& patch) const {
  if (patch.channels != channels() || patch.height != input_height() || patch.width != input_width()) {
    throw Error(Errc::ShapeMismatch, "patch " + std::to_string(patch.channels) + "x" + std::to_string(patch.height) +
                                         "x" + std::to_string(patch.width) + " does not match extractor input " +
                                         std::to_string(channels()) + "x" + std::to_string(input_height()) + "x" +
                                         std::to_string(input_width()));
  }
}

std::unique_ptr<FeatureTape> FeatureExtractor::embed_recorded(std::span<const double> pixels,
                                                              std::span<double> out) const {
  auto tape = make_tape();
  embed_into(pixels, out, *tape);
  return tape;
}

std::unique_ptr<FeatureTape> FeatureExtractor::make_tape() const { return std::make_unique<IdentityTape>(); }

void FeatureExtractor::embed_into(std::span<const double> pixels, std::span<double> out, FeatureTape&) const {
  embed(pixels, out);
}

void FeatureExtractor::pullback(const FeatureTape&, std::span<const double>, std::span<double>) const {
  throw Error(Errc::UnsupportedExtractor, "extractor exposes no gradient path");
}

SmallConvExtractor::SmallConvExtractor(int input_height, int input_width, int embed_dim, RngStream& rng)
    : height_(input_height), width_(input_width), embed_dim_(embed_dim) {
  if (embed_dim < 1) throw Error(Errc::ConfigInvalid, "embed_dim must be >= 1");
  if (input_height < 8 || input_width < 8 || input_height % 8 != 0 || input_width % 8 != 0) {
    throw Error(Errc::ConfigInvalid, "small_conv input size must be a positive multiple of 8");
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Layer& layer = layers_[l];
    layer.in_channels = kWidths[l];
    layer.out_channels = kWidths[l + 1];
    const double stddev = std::sqrt(2.0 / (9.0 * layer.in_channels));
    layer.weights.resize(static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9);
    for (auto& w : layer.weights) w = rng.normal(0.0, stddev);
    layer.bias.resize(static_cast<std::size_t>(layer.out_channels));
    for (auto& b : layer.bias) b = rng.normal(0.0, 0.1);
  }
  const int last = kWidths.back();
  head_weights_.resize(static_cast<std::size_t>(embed_dim) * last);
  for (auto& w : head_weights_) w = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(last)));
  head_bias_.assign(static_cast<std::size_t>(embed_dim), 0.0);
  for (std::size_t l = 0; l < layers_.size(); ++l) backward_kernels_[l] = flipped_transpose(layers_[l]);
}

SmallConvExtractor::SmallConvExtractor(int input_height, int input_width, std::array<Layer, 3> layers,
                                       std::vector<double> head_weights, std::vector<double> head_bias)
    : height_(input_height),
      width_(input_width),
      embed_dim_(static_cast<int>(head_bias.size())),
      layers_(std::move(layers)),
      head_weights_(std::move(head_weights)),
      head_bias_(std::move(head_bias)) {
  if (input_height < 8 || input_width < 8 || input_height % 8 != 0 || input_width % 8 != 0) {
    throw Error(Errc::ConfigInvalid, "small_conv input size must be a positive multiple of 8");
  }
  int channels = 3;
  for (const auto& layer : layers_) {
    if (layer.in_channels != channels ||
        layer.weights.size() != static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9 ||
        layer.bias.size() != static_cast<std::size_t>(layer.out_channels)) {
      throw Error(Errc::ShapeMismatch, "inconsistent small_conv layer shapes");
    }
    channels = layer.out_channels;
  }
  if (embed_dim_ < 1 || head_weights_.size() != static_cast<std::size_t>(embed_dim_) * channels) {
    throw Error(Errc::ShapeMismatch, "inconsistent small_conv head shape");
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) backward_kernels_[l] = flipped_transpose(layers_[l]);
}

void SmallConvExtractor::run_forward(std::span<const double> pixels, std::span<double> out, Tape* tape) const {
  if (pixels.size() != input_size()) throw Error(Errc::ShapeMismatch, "pixel buffer does not match extractor input");
  if (out.size() != static_cast<std::size_t>(embed_dim_)) throw Error(Errc::ShapeMismatch, "bad embedding buffer");

  Scratch& ws = scratch();
  std::vector<double>& act = ws.act;
  std::vector<double>& padded = ws.padded;
  act.resize(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) act[i] = kInputGain * (pixels[i] - kInputMean);
  int h = height_;
  int w = width_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    pad_into(act.data(), layer.in_channels, h, w, padded);
    std::vector<double>& z = tape ? tape->pre_activation[l] : ws.z;
    z.resize(static_cast<std::size_t>(layer.out_channels) * h * w);
    conv3x3(padded.data(), layer.in_channels, h, w, layer.weights.data(), layer.bias.data(), layer.out_channels,
            z.data());
    const int ho = h / 2;
    const int wo = w / 2;
    act.assign(static_cast<std::size_t>(layer.out_channels) * ho * wo, 0.0);
    for (int c = 0; c < layer.out_channels; ++c) {
      const double* zc = z.data() + static_cast<std::size_t>(c) * h * w;
      double* ac = act.data() + static_cast<std::size_t>(c) * ho * wo;
      for (int y = 0; y < ho; ++y) {
        const double* r0 = zc + static_cast<std::size_t>(2 * y) * w;
        const double* r1 = r0 + w;
        for (int x = 0; x < wo; ++x) {
          ac[static_cast<std::size_t>(y) * wo + x] =
              0.25 * (squareplus(r0[2 * x]) + squareplus(r0[2 * x + 1]) + squareplus(r1[2 * x]) +
                      squareplus(r1[2 * x + 1]));
        }
      }
    }
    h = ho;
    w = wo;
  }

  const int last = layers_.back().out_channels;
  const double inv_area = 1.0 / (static_cast<double>(h) * w);
  std::vector<double>& pooled = ws.pooled;
  pooled.assign(static_cast<std::size_t>(last), 0.0);
  for (int c = 0; c < last; ++c) {
    double s = 0.0;
    for (int i = 0; i < h * w; ++i) s += act[static_cast<std::size_t>(c) * h * w + i];
    pooled[static_cast<std::size_t>(c)] = s * inv_area;
  }
  for (int e = 0; e < embed_dim_; ++e) {
    double s = head_bias_[static_cast<std::size_t>(e)];
    for (int c = 0; c < last; ++c) s += head_weights_[static_cast<std::size_t>(e) * last + c] * pooled[c];
    out[static_cast<std::size_t>(e)] = s;
  }
}

void SmallConvExtractor::embed(std::span<const double> pixels, std::span<double> out) const {
  run_forward(pixels, out, nullptr);
}

std::unique_ptr<FeatureTape> SmallConvExtractor::make_tape() const { return std::make_unique<Tape>(); }

void SmallConvExtractor::embed_into(std::span<const double> pixels, std::span<double> out, FeatureTape& base) const {
  auto* tape = dynamic_cast<Tape*>(&base);
  if (!tape) throw Error(Errc::UnsupportedExtractor, "tape was not created by this extractor");
  run_forward(pixels, out, tape);
}

void SmallConvExtractor::pullback(const FeatureTape& base, std::span<const double> cotangent,
                                  std::span<double> grad) const {
  const auto* tape = dynamic_cast<const Tape*>(&base);
  if (!tape) throw Error(Errc::UnsupportedExtractor, "tape was not recorded by this extractor");
  if (cotangent.size() != static_cast<std::size_t>(embed_dim_) || grad.size() != input_size()) {
    throw Error(Errc::ShapeMismatch, "bad cotangent or gradient buffer");
  }

  const int last = layers_.back().out_channels;
  int h = height_ >> 3;
  int w = width_ >> 3;
  const double inv_area = 1.0 / (static_cast<double>(h) * w);
  // Gradient w.r.t. the pooled output of the current block.
  Scratch& ws = scratch();
  std::vector<double>& g_act = ws.act;
  g_act.resize(static_cast<std::size_t>(last) * h * w);
  for (int c = 0; c < last; ++c) {
    double s = 0.0;
    for (int e = 0; e < embed_dim_; ++e) s += head_weights_[static_cast<std::size_t>(e) * last + c] * cotangent[e];
    std::fill_n(g_act.begin() + static_cast<std::ptrdiff_t>(c) * h * w, h * w, s * inv_area);
  }

  std::vector<double>& g_z = ws.z;
  std::vector<double>& g_z_padded = ws.padded;
  for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
    const Layer& layer = layers_[static_cast<std::size_t>(l)];
    const std::vector<double>& z = tape->pre_activation[static_cast<std::size_t>(l)];
    const int hi = h * 2;
    const int wi = w * 2;
    g_z.resize(static_cast<std::size_t>(layer.out_channels) * hi * wi);
    for (int c = 0; c < layer.out_channels; ++c) {
      for (int y = 0; y < hi; ++y) {
        for (int x = 0; x < wi; ++x) {
          const std::size_t idx = (static_cast<std::size_t>(c) * hi + y) * wi + x;
          g_z[idx] = 0.25 * g_act[(static_cast<std::size_t>(c) * h + y / 2) * w + x / 2] * squareplus_grad(z[idx]);
        }
      }
    }
    pad_into(g_z.data(), layer.out_channels, hi, wi, g_z_padded);
    const std::vector<double>& kernels = backward_kernels_[static_cast<std::size_t>(l)];
    g_act.resize(static_cast<std::size_t>(layer.in_channels) * hi * wi);
    conv3x3(g_z_padded.data(), layer.out_channels, hi, wi, kernels.data(), nullptr, layer.in_channels, g_act.data());
    h = hi;
    w = wi;
  }
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = kInputGain * g_act[i];
}

void SmallConvExtractor::save_weights(const std::string& path) const {
  std::vector<NamedTensor> entries;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const std::string prefix = "conv" + std::to_string(l + 1);
    entries.push_back(NamedTensor::from_double(prefix + ".weight",
                                               {static_cast<std::uint64_t>(layer.out_channels),
                                                static_cast<std::uint64_t>(layer.in_channels), 3, 3},
                                               layer.weights));
    entries.push_back(
        NamedTensor::from_double(prefix + ".bias", {static_cast<std::uint64_t>(layer.out_channels)}, layer.bias));
  }
  entries.push_back(NamedTensor::from_double(
      "head.weight",
      {static_cast<std::uint64_t>(embed_dim_), static_cast<std::uint64_t>(layers_.back().out_channels)},
      head_weights_));
  entries.push_back(NamedTensor::from_double("head.bias", {static_cast<std::uint64_t>(embed_dim_)}, head_bias_));
  write_archive(entries, path);
}

std::unique_ptr<SmallConvExtractor> SmallConvExtractor::load_weights(const std::string& path, int input_height,
                                                                     int input_width) {
  std::vector<NamedTensor> entries;
  try {
    entries = read_archive(path);
  } catch (const Error& e) {
    throw Error(Errc::MissingWeights, "cannot read extractor weights '" + path + "': " + e.what());
  }
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const auto& t : entries)
      if (t.name == name) return t;
    throw Error(Errc::MissingWeights, "weights archive '" + path + "' lacks tensor " + name);
  };
  std::array<Layer, 3> layers;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "conv" + std::to_string(l + 1);
    const NamedTensor& weight = find(prefix + ".weight");
    if (weight.shape.size() != 4) throw Error(Errc::ShapeMismatch, prefix + ".weight must be rank 4");
    layers[l].out_channels = static_cast<int>(weight.shape[0]);
    layers[l].in_channels = static_cast<int>(weight.shape[1]);
    layers[l].weights = weight.to_double();
    layers[l].bias = find(prefix + ".bias").to_double();
  }
  return std::make_unique<SmallConvExtractor>(input_height, input_width, std::move(layers),
                                              find("head.weight").to_double(), find("head.bias").to_double());
}

void IdentityExtractor::embed(std::span<const double> pixels, std::span<double> out) const {
  if (pixels.size() != out.size()) throw Error(Errc::ShapeMismatch, "identity extractor size mismatch");
  std::copy(pixels.begin(), pixels.end(), out.begin());
}

void IdentityExtractor::pullback(const FeatureTape&, std::span<const double> cotangent, std::span<double> grad) const {
  std::copy(cotangent.begin(), cotangent.end(), grad.begin());
}

std::shared_ptr<const FeatureExtractor> build_extractor(const FeatureExtractorSpec& spec, RngStream& rng) {
  if (!spec.frozen) throw Error(Errc::ConfigInvalid, "feature extractors are always frozen");
  if (spec.embed_dim < 1) throw Error(Errc::ConfigInvalid, "embed_dim must be >= 1");
  switch (spec.name) {
    case ExtractorKind::small_conv:
      return std::make_shared<SmallConvExtractor>(spec.input_height, spec.input_width, spec.embed_dim, rng);
    case ExtractorKind::external: {
      if (!spec.weights_ref || !std::filesystem::is_regular_file(*spec.weights_ref)) {
        throw Error(Errc::MissingWeights, "external weights not found: " + spec.weights_ref.value_or("<unset>"));
      }
      auto extractor = SmallConvExtractor::load_weights(*spec.weights_ref, spec.input_height, spec.input_width);
      if (extractor->embed_dim() != spec.embed_dim) {
        throw Error(Errc::ShapeMismatch, "external weights embed_dim " + std::to_string(extractor->embed_dim()) +
                                             " differs from spec " + std::to_string(spec.embed_dim));
      }
      return extractor;
    }
  }
  throw Error(Errc::ConfigInvalid, "unknown extractor kind");
}

std::vector<Embedding> extract(const FeatureExtractor& extractor, std::span<const PatchTensor> patches) {
  std::vector<Embedding> out;
  out.reserve(patches.size());
  for (const auto& patch : patches) {
    extractor.check_input(patch);
    const std::vector<double> pixels = patch.to_double();
    Embedding e(static_cast<std::size_t>(extractor.embed_dim()));
    extractor.embed(pixels, e);
    out.push_back(std::move(e));
  }
  return out;
}

Embedding mean_feature(const FeatureExtractor& extractor, std::span<const PatchTensor> patches) {
  if (patches.empty()) throw Error(Errc::EmptyBag, "mean_feature of an empty bag");
  Embedding mean(static_cast<std::size_t>(extractor.embed_dim()), 0.0);
  for (const auto& e : extract(extractor, patches))
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += e[i];
  for (auto& v : mean) v /= static_cast<double>(patches.size());
  return mean;
}

std::vector<std::vector<double>> backprop_to_pixels(const FeatureExtractor& extractor,
                                                    std::span<const PatchTensor> patches,
                                                    std::span<const double> cotangent) {
  if (cotangent.size() != static_cast<std::size_t>(extractor.embed_dim())) {
    throw Error(Errc::ShapeMismatch, "cotangent length differs from embed_dim");
  }
  if (!extractor.differentiable()) throw Error(Errc::UnsupportedExtractor, "extractor exposes no gradient path");
  std::vector<std::vector<double>> grads;
  grads.reserve(patches.size());
  std::vector<double> scaled(cotangent.begin(), cotangent.end());
  for (auto& v : scaled) v /= static_cast<double>(patches.size());
  Embedding scratch(static_cast<std::size_t>(extractor.embed_dim()));
  for (const auto& patch : patches) {
    extractor.check_input(patch);
    const std::vector<double> pixels = patch.to_double();
    auto tape = extractor.embed_recorded(pixels, scratch);
    std::vector<double> g(pixels.size());
    extractor.pullback(*tape, scaled, g);
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace fedwsidd
