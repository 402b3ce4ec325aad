#include "fedwsidd/stain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "fedwsidd/numeric.hpp"

namespace fedwsidd::stain {

namespace {

constexpr double kLn10 = std::numbers::ln10;
// Minimum angle between the two recovered stain directions.
const double kMinSeparationCos = std::cos(1.0 * std::numbers::pi / 180.0);

Eigen::Matrix<double, 2, 3> unmixing_matrix(const Eigen::Matrix<double, 3, 2>& v) {
  const Eigen::Matrix2d gram = v.transpose() * v;
  return gram.inverse() * v.transpose();
}

void require_rgb(int channels) {
  if (channels != 3) throw Error(Errc::ShapeMismatch, "stain operations need 3-channel patches");
}

}  // namespace

std::vector<double> StainBasis::to_values() const {
  std::vector<double> values;
  values.reserve(8);
  for (int c = 0; c < 2; ++c)
    for (int r = 0; r < 3; ++r) values.push_back(vectors(r, c));
  values.push_back(max_concentrations(0));
  values.push_back(max_concentrations(1));
  return values;
}

StainBasis StainBasis::from_values(std::span<const double> values) {
  if (values.size() != 8) throw Error(Errc::ConfigInvalid, "stain basis needs 8 values");
  StainBasis basis;
  for (int c = 0; c < 2; ++c)
    for (int r = 0; r < 3; ++r) basis.vectors(r, c) = values[static_cast<std::size_t>(c * 3 + r)];
  basis.max_concentrations = {values[6], values[7]};
  return basis;
}

std::string StainBasis::to_string() const {
  std::string out;
  char buf[64];
  for (double v : to_values()) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (!out.empty()) out += ' ';
    out.append(buf, end);
  }
  return out;
}

StainBasis reference_basis() {
  StainBasis basis;
  Eigen::Vector3d h(0.5626, 0.7201, 0.4062);
  Eigen::Vector3d e(0.2159, 0.8012, 0.5581);
  basis.vectors.col(0) = h.normalized();
  basis.vectors.col(1) = e.normalized();
  // Reference maxima 1.9705 / 1.0308 are in natural-log OD; rescaled to log10.
  basis.max_concentrations = Eigen::Vector2d(1.9705, 1.0308) / kLn10;
  return basis;
}

ODImage rgb_to_od(const PatchTensor& patch) {
  require_rgb(patch.channels);
  ODImage od{patch.height, patch.width, std::vector<double>(patch.size())};
  od.data = od_planes(patch.to_double());
  return od;
}

PatchTensor od_to_rgb(const ODImage& od) {
  PatchTensor patch(3, od.height, od.width);
  for (std::size_t i = 0; i < od.data.size(); ++i) {
    patch.data[i] = static_cast<float>(std::clamp(std::exp(-kLn10 * od.data[i]), 0.0, 1.0));
  }
  return patch;
}

std::vector<double> od_planes(std::span<const double> pixels) {
  std::vector<double> od(pixels.size());
  constexpr double inv_ln10 = 1.0 / kLn10;
  for (std::size_t i = 0; i < pixels.size(); ++i) od[i] = -std::log(std::max(pixels[i], kEpsilon)) * inv_ln10;
  return od;
}

StainBasis estimate_from_od(std::span<const double> od, const StainParams& params) {
  const std::size_t plane = od.size() / 3;
  const double* r = od.data();
  const double* g = r + plane;
  const double* b = g + plane;
  const double beta2 = params.beta * params.beta;

  std::vector<std::size_t> tissue;
  tissue.reserve(plane);
  double sum[3] = {0, 0, 0};
  for (std::size_t i = 0; i < plane; ++i) {
    if (r[i] * r[i] + g[i] * g[i] + b[i] * b[i] > beta2) {
      tissue.push_back(i);
      sum[0] += r[i];
      sum[1] += g[i];
      sum[2] += b[i];
    }
  }
  if (tissue.size() < 2) {
    throw Error(Errc::DegenerateTissue, "fewer than 2 tissue pixels (" + std::to_string(tissue.size()) + ")");
  }
  const double n = static_cast<double>(tissue.size());
  const Eigen::Vector3d mean(sum[0] / n, sum[1] / n, sum[2] / n);
  double c00 = 0, c01 = 0, c02 = 0, c11 = 0, c12 = 0, c22 = 0;
  for (auto i : tissue) {
    const double dr = r[i] - mean(0), dg = g[i] - mean(1), db = b[i] - mean(2);
    c00 += dr * dr;
    c01 += dr * dg;
    c02 += dr * db;
    c11 += dg * dg;
    c12 += dg * db;
    c22 += db * db;
  }
  Eigen::Matrix3d cov;
  cov << c00, c01, c02, c01, c11, c12, c02, c12, c22;
  cov /= (n - 1.0);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const Eigen::Vector3d lambda = eig.eigenvalues();  // ascending
  if (!(lambda(2) > 1e-14) || lambda(1) <= 1e-6 * lambda(2)) {
    throw Error(Errc::DegenerateTissue, "tissue OD cloud is not rank 2");
  }
  Eigen::Vector3d e1 = eig.eigenvectors().col(2);
  Eigen::Vector3d e2 = eig.eigenvectors().col(1);
  if (mean.dot(e1) < 0) e1 = -e1;
  if (e2.sum() < 0) e2 = -e2;

  std::vector<double> phi(tissue.size());
  for (std::size_t k = 0; k < tissue.size(); ++k) {
    const auto i = tissue[k];
    const double t1 = e1(0) * r[i] + e1(1) * g[i] + e1(2) * b[i];
    const double t2 = e2(0) * r[i] + e2(1) * g[i] + e2(2) * b[i];
    phi[k] = std::atan2(t2, t1);
  }
  const double min_phi = numeric::percentile(phi, params.alpha);
  const double max_phi = numeric::percentile(phi, 100.0 - params.alpha);

  auto direction = [&](double angle) {
    Eigen::Vector3d v = e1 * std::cos(angle) + e2 * std::sin(angle);
    v = v.cwiseMax(0.0);
    const double norm = v.norm();
    if (norm < 1e-9) throw Error(Errc::DegenerateTissue, "extreme stain direction has no positive absorbance");
    return Eigen::Vector3d(v / norm);
  };
  const Eigen::Vector3d v_min = direction(min_phi);
  const Eigen::Vector3d v_max = direction(max_phi);
  if (v_min.dot(v_max) > kMinSeparationCos) {
    throw Error(Errc::DegenerateTissue, "stain directions are not separable");
  }

  StainBasis basis;
  // Hematoxylin absorbs red more strongly than eosin.
  if (v_min(0) > v_max(0)) {
    basis.vectors.col(0) = v_min;
    basis.vectors.col(1) = v_max;
  } else {
    basis.vectors.col(0) = v_max;
    basis.vectors.col(1) = v_min;
  }

  const Eigen::Matrix<double, 2, 3> unmix = unmixing_matrix(basis.vectors);
  std::vector<double> conc_h(plane);
  std::vector<double> conc_e(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    conc_h[i] = unmix(0, 0) * r[i] + unmix(0, 1) * g[i] + unmix(0, 2) * b[i];
    conc_e[i] = unmix(1, 0) * r[i] + unmix(1, 1) * g[i] + unmix(1, 2) * b[i];
  }
  basis.max_concentrations = {numeric::percentile(conc_h, params.concentration_percentile),
                              numeric::percentile(conc_e, params.concentration_percentile)};
  if (!(basis.max_concentrations(0) > 1e-9) || !(basis.max_concentrations(1) > 1e-9)) {
    throw Error(Errc::DegenerateTissue, "non-positive maximum stain concentration");
  }
  return basis;
}

StainBasis estimate_stain_basis(std::span<const double> pixels, int height, int width, const StainParams& params) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (pixels.size() != 3 * plane) throw Error(Errc::ShapeMismatch, "expected a 3-channel pixel buffer");
  return estimate_from_od(od_planes(pixels), params);
}

StainBasis estimate_stain_basis(const PatchTensor& patch, double beta, double alpha, double concentration_percentile) {
  require_rgb(patch.channels);
  const std::vector<double> pixels = patch.to_double();
  return estimate_stain_basis(pixels, patch.height, patch.width, StainParams{beta, alpha, concentration_percentile});
}

FrozenStainMap::FrozenStainMap(const StainBasis& source, const StainBasis& target, double beta) : beta_(beta) {
  const Eigen::Vector2d scale = target.max_concentrations.cwiseQuotient(source.max_concentrations);
  transform_ = target.vectors * scale.asDiagonal() * unmixing_matrix(source.vectors);
}

FrozenStainMap FrozenStainMap::identity(double beta) {
  FrozenStainMap map;
  map.beta_ = beta;
  map.identity_ = true;
  return map;
}

void FrozenStainMap::apply(std::span<const double> pixels, std::span<double> out) const {
  if (identity_) {
    std::copy(pixels.begin(), pixels.end(), out.begin());
    return;
  }
  apply_od(pixels, od_planes(pixels), out);
}

void FrozenStainMap::apply_od(std::span<const double> pixels, std::span<const double> od, std::span<double> out) const {
  if (identity_) {
    std::copy(pixels.begin(), pixels.end(), out.begin());
    return;
  }
  const std::size_t plane = pixels.size() / 3;
  const double beta2 = beta_ * beta_;
  const Eigen::Matrix3d& a = transform_;
  for (std::size_t i = 0; i < plane; ++i) {
    const double o0 = od[i], o1 = od[plane + i], o2 = od[2 * plane + i];
    if (o0 * o0 + o1 * o1 + o2 * o2 <= beta2) {
      out[i] = pixels[i];
      out[plane + i] = pixels[plane + i];
      out[2 * plane + i] = pixels[2 * plane + i];
      continue;
    }
    // negative recomposed OD would leave [0,1]; clip like od_to_rgb
    out[i] = std::exp(-kLn10 * std::max(0.0, a(0, 0) * o0 + a(0, 1) * o1 + a(0, 2) * o2));
    out[plane + i] = std::exp(-kLn10 * std::max(0.0, a(1, 0) * o0 + a(1, 1) * o1 + a(1, 2) * o2));
    out[2 * plane + i] = std::exp(-kLn10 * std::max(0.0, a(2, 0) * o0 + a(2, 1) * o1 + a(2, 2) * o2));
  }
}

void FrozenStainMap::pullback(std::span<const double> pixels, std::span<const double> grad_out,
                              std::span<double> grad_in) const {
  if (identity_) {
    std::copy(grad_out.begin(), grad_out.end(), grad_in.begin());
    return;
  }
  const std::vector<double> od = od_planes(pixels);
  std::vector<double> out(pixels.size());
  apply_od(pixels, od, out);
  pullback_recorded(pixels, od, out, grad_out, grad_in);
}

void FrozenStainMap::pullback_recorded(std::span<const double> pixels, std::span<const double> od,
                                       std::span<const double> out, std::span<const double> grad_out,
                                       std::span<double> grad_in) const {
  if (identity_) {
    std::copy(grad_out.begin(), grad_out.end(), grad_in.begin());
    return;
  }
  const std::size_t plane = pixels.size() / 3;
  const double beta2 = beta_ * beta_;
  const Eigen::Matrix3d& a = transform_;
  for (std::size_t i = 0; i < plane; ++i) {
    const std::size_t i0 = i, i1 = plane + i, i2 = 2 * plane + i;
    const double o0 = od[i0], o1 = od[i1], o2 = od[i2];
    if (o0 * o0 + o1 * o1 + o2 * o2 <= beta2) {
      grad_in[i0] = grad_out[i0];
      grad_in[i1] = grad_out[i1];
      grad_in[i2] = grad_out[i2];
      continue;
    }
    const double m0 = out[i0] < 1.0 ? -kLn10 * out[i0] * grad_out[i0] : 0.0;
    const double m1 = out[i1] < 1.0 ? -kLn10 * out[i1] * grad_out[i1] : 0.0;
    const double m2 = out[i2] < 1.0 ? -kLn10 * out[i2] * grad_out[i2] : 0.0;
    const double g0 = a(0, 0) * m0 + a(1, 0) * m1 + a(2, 0) * m2;
    const double g1 = a(0, 1) * m0 + a(1, 1) * m1 + a(2, 1) * m2;
    const double g2 = a(0, 2) * m0 + a(1, 2) * m1 + a(2, 2) * m2;
    grad_in[i0] = pixels[i0] > kEpsilon ? -g0 / (pixels[i0] * kLn10) : 0.0;
    grad_in[i1] = pixels[i1] > kEpsilon ? -g1 / (pixels[i1] * kLn10) : 0.0;
    grad_in[i2] = pixels[i2] > kEpsilon ? -g2 / (pixels[i2] * kLn10) : 0.0;
  }
}

NormalizeResult normalize(const PatchTensor& patch, const StainBasis& target, const StainParams& params) {
  require_rgb(patch.channels);
  const std::vector<double> pixels = patch.to_double();
  StainBasis source;
  try {
    source = estimate_stain_basis(pixels, patch.height, patch.width, params);
  } catch (const Error& e) {
    if (e.code() != Errc::DegenerateTissue) throw;
    return {patch, true};
  }
  std::vector<double> out(pixels.size());
  FrozenStainMap(source, target, params.beta).apply(pixels, out);
  return {PatchTensor::from_double(3, patch.height, patch.width, out), false};
}

NormalizeResult normalize(const PatchTensor& patch, const StainBasis& target, double beta, double alpha) {
  return normalize(patch, target, StainParams{beta, alpha, 99.0});
}

PatchTensor normalize_differentiable(const PatchTensor& patch, const StainBasis& target, const StainBasis& stats,
                                     double beta) {
  require_rgb(patch.channels);
  const std::vector<double> pixels = patch.to_double();
  std::vector<double> out(pixels.size());
  FrozenStainMap(stats, target, beta).apply(pixels, out);
  return PatchTensor::from_double(3, patch.height, patch.width, out);
}

double angular_distance_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

}  // namespace fedwsidd::stain
