#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedwsidd/core.hpp"
#include "fedwsidd/features.hpp"
#include "fedwsidd/stain.hpp"

namespace fedwsidd {

enum class OptimizerKind { adam, sgd };
enum class InitMode { random, real_sample };

struct DistillConfig {
  int rounds = 1000;
  double learning_rate = 0.0003;
  int slides_per_class = 10;    // M
  int patches_per_slide = 100;  // B
  int patch_height = 64;
  int patch_width = 64;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool stain_norm = true;
  InitMode init = InitMode::random;
  bool clamp = true;
  stain::StainBasis stain_target = stain::reference_basis();
  stain::StainParams stain_params;

  /// Throws Error(ConfigInvalid).
  void validate() const;
};

struct TraceEntry {
  int round = 0;
  int class_index = 0;
  double loss = 0.0;  // NaN when the class was skipped
  int degenerate_count = 0;
  bool skipped = false;
  double seconds = 0.0;
};

struct DistillTrace {
  std::vector<TraceEntry> entries;

  /// Columns: round,class_index,loss,degenerate_flag.
  void write_csv(const std::string& path) const;
  std::string to_csv() const;
};

/// Per-synthetic-slide optimizer state; moments persist across rounds.
struct OptimizerState {
  struct SlideState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    long steps = 0;
  };
  std::map<std::string, SlideState> slides;
};

SyntheticSet init_synthetic(const ClientDataset& client, const DistillConfig& cfg, RngStream& rng);
SyntheticSet init_synthetic(int num_classes, const DistillConfig& cfg, RngStream& rng, const std::string& centre_id = "");

/// ||mean F(real) - mean F(synthetic)||^2. Throws EmptyBag.
double fm_loss(const FeatureExtractor& extractor, std::span<const PatchTensor> real,
               std::span<const PatchTensor> synthetic);

/// Feature-matching loss of a synthetic bag against a fixed real mean
/// embedding, with its gradient w.r.t. the raw synthetic pixels. When stain
/// normalization is on, each synthetic patch goes through the frozen-statistics
/// map estimated from its current pixels.
struct FeatureMatchResult {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
  int degenerate_count = 0;
};

class FeatureMatchObjective {
 public:
  FeatureMatchObjective(const FeatureExtractor& extractor, bool stain_norm, stain::StainBasis target,
                        stain::StainParams params);

  /// Source statistics are re-estimated from the pixels on each call.
  FeatureMatchResult evaluate(std::span<const double> real_mean, std::span<const std::vector<double>> synthetic);
  /// Same, with explicitly supplied per-patch maps (frozen statistics).
  FeatureMatchResult evaluate(std::span<const double> real_mean, std::span<const std::vector<double>> synthetic,
                              std::span<const stain::FrozenStainMap> maps);

  /// Frozen map for one patch; identity when its statistics are degenerate.
  stain::FrozenStainMap map_for(std::span<const double> pixels, bool* degenerate = nullptr) const;

 private:
  const FeatureExtractor& extractor_;
  bool stain_norm_;
  stain::StainBasis target_;
  stain::StainParams params_;
  std::vector<std::unique_ptr<FeatureTape>> tapes_;
};

/// Stain-normalized mean embedding per real slide, computed once per slide id.
class RealFeatureCache {
 public:
  RealFeatureCache(const FeatureExtractor& extractor, bool stain_norm, stain::StainBasis target,
                   stain::StainParams params)
      : extractor_(extractor), stain_norm_(stain_norm), target_(std::move(target)), params_(params) {}

  const Embedding& mean_for(const Slide& slide);

 private:
  const FeatureExtractor& extractor_;
  bool stain_norm_;
  stain::StainBasis target_;
  stain::StainParams params_;
  std::map<std::string, Embedding> cache_;
};

/// Sequential distillation driver for one client.
class Distiller {
 public:
  Distiller(const ClientDataset& client, const FeatureExtractor& extractor, DistillConfig cfg);

  /// One pass over all classes. Returns one trace entry per class.
  std::vector<TraceEntry> round(SyntheticSet& synthetic, OptimizerState& state, RngStream& rng, int round_index = 0);

  const DistillConfig& config() const { return cfg_; }

 private:
  void step(Slide& slide, const std::vector<std::vector<double>>& grads, OptimizerState& state);

  const ClientDataset& client_;
  const FeatureExtractor& extractor_;
  DistillConfig cfg_;
  RealFeatureCache cache_;
  FeatureMatchObjective objective_;
  std::vector<std::vector<std::size_t>> real_by_class_;
};

std::vector<TraceEntry> distill_round(const ClientDataset& client, SyntheticSet& synthetic,
                                      const FeatureExtractor& extractor, const DistillConfig& cfg,
                                      OptimizerState& state, RngStream& rng);

struct DistillOutput {
  SyntheticSet synthetic;
  DistillTrace trace;
};

DistillOutput distill(const ClientDataset& client, const FeatureExtractor& extractor, const DistillConfig& cfg,
                      RngStream& rng);

}  // namespace fedwsidd
