#pragma once

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedwsidd/core.hpp"

namespace fedwsidd {

enum class ExtractorKind { small_conv, external };

struct FeatureExtractorSpec {
  ExtractorKind name = ExtractorKind::small_conv;
  int embed_dim = 64;
  int input_height = 64;
  int input_width = 64;
  std::optional<std::string> weights_ref;
  bool frozen = true;
};

using Embedding = std::vector<double>;

/// Opaque record of a forward pass, consumed by FeatureExtractor::pullback.
class FeatureTape {
 public:
  virtual ~FeatureTape() = default;
};

/// Frozen patch embedding map F. Implementations are immutable after
/// construction, so embed/pullback may be called concurrently.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual int embed_dim() const = 0;
  virtual int channels() const = 0;
  virtual int input_height() const = 0;
  virtual int input_width() const = 0;
  virtual bool differentiable() const = 0;

  virtual void embed(std::span<const double> pixels, std::span<double> out) const = 0;
  /// Forward pass that keeps what pullback needs.
  std::unique_ptr<FeatureTape> embed_recorded(std::span<const double> pixels, std::span<double> out) const;
  virtual std::unique_ptr<FeatureTape> make_tape() const;
  /// Forward pass recording into an existing tape (reuses its storage).
  virtual void embed_into(std::span<const double> pixels, std::span<double> out, FeatureTape& tape) const;
  /// grad = J^T cotangent for the pass recorded in tape.
  virtual void pullback(const FeatureTape& tape, std::span<const double> cotangent, std::span<double> grad) const;

  std::size_t input_size() const {
    return static_cast<std::size_t>(channels()) * input_height() * input_width();
  }
  void check_input(const PatchTensor& patch) const;
};

/// Three {3x3 conv, squareplus, 2x2 average pool} blocks, global average pooling
/// and a linear map to embed_dim.
class SmallConvExtractor final : public FeatureExtractor {
 public:
  static constexpr std::array<int, 4> kWidths = {3, 8, 16, 16};

  struct Layer {
    int in_channels = 0;
    int out_channels = 0;
    std::vector<double> weights;  // [out][in][3][3]
    std::vector<double> bias;     // [out]
  };

  SmallConvExtractor(int input_height, int input_width, int embed_dim, RngStream& rng);
  SmallConvExtractor(int input_height, int input_width, std::array<Layer, 3> layers, std::vector<double> head_weights,
                     std::vector<double> head_bias);

  int embed_dim() const override { return embed_dim_; }
  int channels() const override { return 3; }
  int input_height() const override { return height_; }
  int input_width() const override { return width_; }
  bool differentiable() const override { return true; }

  void embed(std::span<const double> pixels, std::span<double> out) const override;
  std::unique_ptr<FeatureTape> make_tape() const override;
  void embed_into(std::span<const double> pixels, std::span<double> out, FeatureTape& tape) const override;
  void pullback(const FeatureTape& tape, std::span<const double> cotangent, std::span<double> grad) const override;

  const std::array<Layer, 3>& layers() const { return layers_; }
  const std::vector<double>& head_weights() const { return head_weights_; }
  const std::vector<double>& head_bias() const { return head_bias_; }

  /// Named float32 tensors suitable for write_archive; loadable as an
  /// external extractor.
  void save_weights(const std::string& path) const;
  static std::unique_ptr<SmallConvExtractor> load_weights(const std::string& path, int input_height, int input_width);

 private:
  struct Tape;
  void run_forward(std::span<const double> pixels, std::span<double> out, Tape* tape) const;

  int height_;
  int width_;
  int embed_dim_;
  std::array<Layer, 3> layers_;
  std::array<std::vector<double>, 3> backward_kernels_;
  std::vector<double> head_weights_;  // [embed_dim][last width]
  std::vector<double> head_bias_;
};

/// F(p) = flattened pixels. Useful for checking losses by hand.
class IdentityExtractor final : public FeatureExtractor {
 public:
  IdentityExtractor(int channels, int height, int width) : c_(channels), h_(height), w_(width) {}

  int embed_dim() const override { return c_ * h_ * w_; }
  int channels() const override { return c_; }
  int input_height() const override { return h_; }
  int input_width() const override { return w_; }
  bool differentiable() const override { return true; }

  void embed(std::span<const double> pixels, std::span<double> out) const override;
  void pullback(const FeatureTape& tape, std::span<const double> cotangent, std::span<double> grad) const override;

 private:
  int c_, h_, w_;
};

/// Forward-only extractor around a user callback (e.g. a foreign model).
class CallbackExtractor final : public FeatureExtractor {
 public:
  using Fn = std::function<void(std::span<const double>, std::span<double>)>;

  CallbackExtractor(int channels, int height, int width, int embed_dim, Fn fn)
      : c_(channels), h_(height), w_(width), d_(embed_dim), fn_(std::move(fn)) {}

  int embed_dim() const override { return d_; }
  int channels() const override { return c_; }
  int input_height() const override { return h_; }
  int input_width() const override { return w_; }
  bool differentiable() const override { return false; }

  void embed(std::span<const double> pixels, std::span<double> out) const override { fn_(pixels, out); }

 private:
  int c_, h_, w_, d_;
  Fn fn_;
};

std::shared_ptr<const FeatureExtractor> build_extractor(const FeatureExtractorSpec& spec, RngStream& rng);

std::vector<Embedding> extract(const FeatureExtractor& extractor, std::span<const PatchTensor> patches);

/// Mean embedding over the bag. Throws EmptyBag.
Embedding mean_feature(const FeatureExtractor& extractor, std::span<const PatchTensor> patches);

/// Per-patch d<cotangent, mean_feature>/d pixels.
std::vector<std::vector<double>> backprop_to_pixels(const FeatureExtractor& extractor,
                                                    std::span<const PatchTensor> patches,
                                                    std::span<const double> cotangent);

}  // namespace fedwsidd
