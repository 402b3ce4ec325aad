#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedwsidd/archive.hpp"
#include "fedwsidd/core.hpp"

namespace fedwsidd {

struct ToyGenConfig {
  int num_centres = 2;
  int num_classes = 2;
  int slides_per_class_per_centre = 20;
  int patches_per_slide = 30;
  int patch_height = 64;
  int patch_width = 64;
  /// Optional explicit per-centre stain matrices; when empty they are the
  /// reference basis perturbed by stain_shift_strength.
  std::vector<Eigen::Matrix<double, 3, 2>> stain_matrices;
  double stain_shift_strength = 1.0;
  double class_signal = 1.0;
  double tumor_patch_fraction = 0.3;
  double test_fraction = 0.2;
  double pixel_noise = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

ToyGenConfig ca16_preset();
ToyGenConfig ca17_preset();

/// Pseudo-stain concentration maps (log10 OD units) for one patch.
struct ConcentrationField {
  int height = 0;
  int width = 0;
  std::vector<double> hematoxylin;
  std::vector<double> eosin;
};

/// Per-centre rendering parameters.
struct CentreStain {
  Eigen::Matrix<double, 3, 2> vectors;
  double intensity = 1.0;
};

std::string centre_name(int k);
CentreStain centre_stain(const ToyGenConfig& cfg, int centre);

/// tumor_level 0 renders normal tissue, higher levels denser and larger nuclei.
ConcentrationField sample_field(const ToyGenConfig& cfg, double tumor_level, RngStream& rng);
PatchTensor render_patch(const ConcentrationField& field, const CentreStain& stain, double pixel_noise, RngStream& rng);

/// Mean (over pixels) of the two concentration maps plus nuclear coverage:
/// the stain-free features a linear probe should separate.
std::vector<double> oracle_features(const ConcentrationField& field);

struct ToySlideRecord {
  std::string slide_id;
  std::vector<ConcentrationField> fields;
};

/// Datasets are returned sorted by centre id. When fields is given it
/// receives the concentration fields of every slide.
std::vector<ClientDataset> generate_toy_federation(const ToyGenConfig& cfg,
                                                   std::vector<ToySlideRecord>* fields = nullptr);

/// Box-filter resampling with fractional pixel coverage.
PatchTensor area_resize(const PatchTensor& patch, int height, int width);

/// 8-bit RGB PNG I/O. Reading throws MissingFile or UndecodableImage.
PatchTensor read_png(const std::string& path);
void write_png(const PatchTensor& patch, const std::string& path);

/// Manifest schema v1 (YAML):
///   schema: 1
///   centre: C1
///   num_classes: 2
///   class_names: [normal, tumor]      # optional
///   slides:
///     - id: C1_s000
///       label: 1
///       split: train | test
///       patches: [C1_s000/p000.png, ...]  # relative to the manifest
ClientDataset ingest_patch_directory(const std::string& root, const std::string& manifest_path, int patch_height,
                                     int patch_width);

/// Writes PNG patches and manifest.yaml under root; returns the manifest path.
std::string export_patch_directory(const ClientDataset& dataset, const std::string& root);

/// Tensor-archive encoding of slides. Each slide becomes one [T, C, H, W]
/// entry named "<kind>|<centre>|<id>|<label index>|<label name>".
std::vector<NamedTensor> slides_to_tensors(const std::vector<Slide>& slides);
std::vector<Slide> slides_from_tensors(const std::vector<NamedTensor>& tensors);

std::vector<NamedTensor> synthetic_to_tensors(const SyntheticSet& set);
SyntheticSet synthetic_from_tensors(const std::vector<NamedTensor>& tensors);

}  // namespace fedwsidd
