#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedwsidd {

enum class Errc {
  ConfigInvalid,
  DegenerateTissue,
  MissingWeights,
  UnsupportedExtractor,
  ShapeMismatch,
  EmptyBag,
  EmptyDataset,
  InsufficientRealPatches,
  MissingClass,
  LengthMismatch,
  TooFewSamples,
  InconsistentCentres,
  MissingFile,
  UndecodableImage,
  ManifestSchema,
  ChecksumMismatch,
  BadMagic,
  TruncatedFile,
  SeedMismatch,
  Io,
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// C x H x W image patch, channel-major, intensities in [0,1].
struct PatchTensor {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  PatchTensor() = default;
  PatchTensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool same_shape(const PatchTensor& other) const {
    return channels == other.channels && height == other.height && width == other.width;
  }

  std::vector<double> to_double() const { return {data.begin(), data.end()}; }
  static PatchTensor from_double(int c, int h, int w, const std::vector<double>& values, bool clamp = true);

  bool operator==(const PatchTensor&) const = default;
};

enum class SlideKind { real, synthetic };

struct ClassLabel {
  int index = 0;
  std::string name;

  bool operator==(const ClassLabel&) const = default;
};

struct Slide {
  std::string id;
  std::string centre_id;
  ClassLabel label;
  std::vector<PatchTensor> patches;
  SlideKind kind = SlideKind::real;

  bool operator==(const Slide&) const = default;
};

struct ClientDataset {
  std::string centre_id;
  std::vector<Slide> train_slides;
  std::vector<Slide> test_slides;
  int num_classes = 2;
};

struct SyntheticSet {
  std::string centre_id;
  std::vector<Slide> slides;
  int slides_per_class = 0;
  int patches_per_slide = 0;

  int num_classes() const;
};

/// Deterministic random stream keyed by (seed, label). Not thread-safe; each
/// worker derives its own.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string label);

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }

  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) std::swap(values[i - 1], values[index(i)]);
  }

  /// Child stream whose label is "<label>/<suffix>".
  RngStream child(std::string_view suffix) const;

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::mt19937_64 engine_;
};

RngStream derive_stream(std::uint64_t root_seed, std::string_view label);

std::vector<std::string> validate_client_dataset(const ClientDataset& dataset);

}  // namespace fedwsidd
