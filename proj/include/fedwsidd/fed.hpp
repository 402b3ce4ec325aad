#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fedwsidd/archive.hpp"
#include "fedwsidd/core.hpp"
#include "fedwsidd/distill.hpp"
#include "fedwsidd/eval.hpp"
#include "fedwsidd/features.hpp"
#include "fedwsidd/mil.hpp"

namespace fedwsidd {

enum class FederationMode { homogeneous, heterogeneous, local_only };

const char* mode_name(FederationMode mode);
FederationMode parse_mode(const std::string& name);

struct FederationConfig {
  std::vector<std::string> clients;  // empty: every dataset takes part
  FederationMode mode = FederationMode::homogeneous;
  MilSpec homogeneous_spec;
  std::vector<MilSpec> pool;
  DistillConfig distill_cfg;
  TrainConfig train_cfg;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  bool include_own_synthetic = true;
  FeatureExtractorSpec extractor;
  std::uint64_t extractor_seed = 0;
  int jobs = 1;

  void validate() const;
};

struct CommunicationCost {
  std::uint64_t upload_per_client = 0;
  std::uint64_t broadcast = 0;
};

/// Payload bytes (float32) of one client's upload and of the broadcast union.
CommunicationCost communication_cost(const DistillConfig& cfg, int num_classes, int num_clients, int channels = 3);
CommunicationCost communication_cost(const FederationConfig& cfg, int num_classes);

/// Union of the sets in centre_id order. Throws ShapeMismatch.
SyntheticSet aggregate(const std::vector<SyntheticSet>& sets);

/// Real train slides followed by synthetic slides sorted by centre id.
std::vector<Slide> build_local_training_set(const ClientDataset& client, const SyntheticSet& global, bool include_own);

std::map<std::string, MilSpec> assign_models(const FederationConfig& cfg, const std::vector<std::string>& centres,
                                             RngStream& rng);

struct TranscriptMessage {
  std::uint64_t seed = 0;
  std::string direction;  // "upload" or "broadcast"
  std::string sender;
  std::vector<std::string> receivers;
  std::uint64_t payload_bytes = 0;
  std::uint64_t archive_bytes = 0;
  std::vector<ArchiveEntryHeader> entries;
};

struct PairedComparison {
  std::string baseline;
  TTestResult global;
  std::map<std::string, TTestResult> per_centre;
};

struct FederationReport {
  std::string mode;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> centres;
  std::vector<RunAccuracies> runs;
  SeedSummary summary;
  std::map<std::string, std::uint64_t> upload_bytes;
  std::uint64_t broadcast_bytes = 0;
  std::vector<std::map<std::string, std::string>> assignments;  // per seed
  std::vector<TranscriptMessage> transcript;
  std::vector<PairedComparison> comparisons;

  std::string to_json() const;
  static FederationReport from_json(const std::string& text);
};

/// Paired t-tests of run against baseline over matching seeds. Throws SeedMismatch.
PairedComparison compare_runs(const FederationReport& run, const FederationReport& baseline,
                              const std::string& baseline_name);

/// Optional observers, called from the orchestrating thread.
struct FederationHooks {
  std::function<void(const std::string&)> log;
  std::function<void(std::uint64_t seed, const std::string& centre, const DistillOutput&)> on_distilled;
  std::function<void(const TranscriptMessage&, const std::vector<std::uint8_t>& archive)> on_message;
};

/// Featurizes slides through F, stain-normalizing first when requested. Real
/// slides are memoized by id.
class BagFeaturizer {
 public:
  BagFeaturizer(std::shared_ptr<const FeatureExtractor> extractor, bool stain_norm, stain::StainBasis target,
                stain::StainParams params);

  BagFeatures featurize(const Slide& slide);

 private:
  std::shared_ptr<const FeatureExtractor> extractor_;
  bool stain_norm_;
  stain::StainBasis target_;
  stain::StainParams params_;
  std::map<std::string, Eigen::MatrixXd> real_cache_;
};

/// Reusable federation runner. Real-slide features and the extractor persist
/// across run() calls, so repeated runs on the same data (e.g. mode sweeps)
/// skip refeaturization.
class Federation {
 public:
  Federation(std::vector<ClientDataset> datasets, FederationConfig cfg, FederationHooks hooks = {});

  FederationReport run();
  const FederationConfig& config() const { return cfg_; }
  FederationConfig& config() { return cfg_; }
  const FeatureExtractor& extractor() const { return *extractor_; }

 private:
  void log(const std::string& msg) const;
  BagFeaturizer& featurizer(std::size_t client);

  std::vector<ClientDataset> datasets_;
  FederationConfig cfg_;
  FederationHooks hooks_;
  std::shared_ptr<const FeatureExtractor> extractor_;
  std::map<std::pair<std::size_t, bool>, std::unique_ptr<BagFeaturizer>> featurizers_;
};

FederationReport run_federation(const std::vector<ClientDataset>& datasets, const FederationConfig& cfg,
                                const FederationHooks& hooks = {});

}  // namespace fedwsidd
