#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedwsidd/core.hpp"

namespace fedwsidd::stain {

/// Intensity floor used before taking optical density.
inline constexpr double kEpsilon = 1.0 / 255.0;

/// Macenko thresholds. beta is the OD-norm tissue cutoff, alpha the angular
/// percentile (in percent) and concentration_percentile the upper percentile
/// used as each stain's maximum concentration.
struct StainParams {
  double beta = 0.15;
  double alpha = 1.0;
  double concentration_percentile = 99.0;
};

/// Columns are unit OD vectors for hematoxylin (0) and eosin (1).
struct StainBasis {
  Eigen::Matrix<double, 3, 2> vectors = Eigen::Matrix<double, 3, 2>::Zero();
  Eigen::Vector2d max_concentrations = Eigen::Vector2d::Zero();

  /// 6 vector entries (column-major) followed by the 2 max concentrations.
  std::vector<double> to_values() const;
  static StainBasis from_values(std::span<const double> values);
  std::string to_string() const;
};

/// Widely used H&E reference. Max concentrations are expressed in log10 OD
/// units.
StainBasis reference_basis();

/// Optical density image, 3 x H x W, channel-major.
struct ODImage {
  int height = 0;
  int width = 0;
  std::vector<double> data;
};

ODImage rgb_to_od(const PatchTensor& patch);
/// Optical density of a channel-major pixel buffer (any channel count).
std::vector<double> od_planes(std::span<const double> pixels);
PatchTensor od_to_rgb(const ODImage& od);

/// Macenko basis estimation. Throws Error(DegenerateTissue) when the tissue
/// OD cloud has fewer than two pixels or is not rank 2.
StainBasis estimate_stain_basis(const PatchTensor& patch, double beta = 0.15, double alpha = 1.0,
                                double concentration_percentile = 99.0);
StainBasis estimate_stain_basis(std::span<const double> pixels, int height, int width,
                                const StainParams& params = {});
/// Estimation from a precomputed 3-plane optical density buffer.
StainBasis estimate_from_od(std::span<const double> od, const StainParams& params = {});

struct NormalizeResult {
  PatchTensor patch;
  bool degenerate = false;
};

/// Full Macenko normalization onto target. Background pixels (OD norm <= beta)
/// pass through unchanged; degenerate inputs are returned unchanged and flagged.
NormalizeResult normalize(const PatchTensor& patch, const StainBasis& target, double beta = 0.15,
                          double alpha = 1.0);
NormalizeResult normalize(const PatchTensor& patch, const StainBasis& target, const StainParams& params);

/// The normalization map with source statistics held fixed. Tissue pixels map
/// through p -> 10^(-A * OD(p)) with A = V_t diag(s) pinv(V_s); background
/// pixels are the identity. The tissue mask is recomputed from the input and
/// treated as constant for differentiation.
class FrozenStainMap {
 public:
  FrozenStainMap(const StainBasis& source, const StainBasis& target, double beta = 0.15);

  /// Identity map, used when the source statistics are degenerate.
  static FrozenStainMap identity(double beta = 0.15);

  void apply(std::span<const double> pixels, std::span<double> out) const;
  /// As apply, with the optical density of pixels already computed.
  void apply_od(std::span<const double> pixels, std::span<const double> od, std::span<double> out) const;
  /// Vector-Jacobian product: grad_in = J^T grad_out evaluated at pixels.
  void pullback(std::span<const double> pixels, std::span<const double> grad_out, std::span<double> grad_in) const;
  /// As pullback, reusing the od and out buffers of a previous apply_od.
  void pullback_recorded(std::span<const double> pixels, std::span<const double> od, std::span<const double> out,
                         std::span<const double> grad_out, std::span<double> grad_in) const;

  const Eigen::Matrix3d& od_transform() const { return transform_; }
  bool is_identity() const { return identity_; }

 private:
  FrozenStainMap() = default;

  Eigen::Matrix3d transform_ = Eigen::Matrix3d::Identity();
  double beta_ = 0.15;
  bool identity_ = false;
};

/// Differentiable normalization of a patch given frozen source statistics.
/// The result is clamped into [0,1] to satisfy the patch invariant; use
/// FrozenStainMap directly for the unclamped smooth map.
PatchTensor normalize_differentiable(const PatchTensor& patch, const StainBasis& target, const StainBasis& stats,
                                     double beta = 0.15);

/// Angle in degrees between two 3-vectors.
double angular_distance_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b);

}  // namespace fedwsidd::stain
