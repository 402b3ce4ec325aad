#include "fedwsidd/eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include <boost/math/distributions/students_t.hpp>

#include "fedwsidd/core.hpp"

namespace fedwsidd {

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw Error(Errc::LengthMismatch, "predictions and labels differ in length");
  if (labels.empty()) throw Error(Errc::EmptyDataset, "accuracy of an empty list");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double weighted_global_average(const RunAccuracies& acc) {
  double num = 0.0, den = 0.0;
  for (const auto& [centre, a] : acc.per_centre) {
    auto it = acc.test_sizes.find(centre);
    if (it == acc.test_sizes.end()) throw Error(Errc::InconsistentCentres, "no test size for centre " + centre);
    num += it->second * a;
    den += it->second;
  }
  if (den <= 0.0) throw Error(Errc::EmptyDataset, "no test slides in run");
  return num / den;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw Error(Errc::EmptyDataset, "mean of no values");
  MeanStd out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size()));
  return out;
}

SeedSummary summarize_seeds(std::span<const RunAccuracies> runs) {
  if (runs.empty()) throw Error(Errc::EmptyDataset, "no runs to summarize");
  SeedSummary out;
  for (const auto& run : runs) {
    if (run.per_centre.size() != runs[0].per_centre.size()) {
      throw Error(Errc::InconsistentCentres, "runs cover different centres");
    }
    for (const auto& [centre, a] : runs[0].per_centre) {
      if (!run.per_centre.contains(centre)) throw Error(Errc::InconsistentCentres, "centre " + centre + " missing in a run");
    }
    out.global_per_seed.push_back(weighted_global_average(run));
  }
  for (const auto& [centre, a] : runs[0].per_centre) {
    std::vector<double> v;
    for (const auto& run : runs) v.push_back(run.per_centre.at(centre));
    out.per_centre[centre] = mean_std(v);
  }
  out.global = mean_std(out.global_per_seed);
  return out;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::LengthMismatch, "paired samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw Error(Errc::TooFewSamples, "paired t-test needs at least two pairs");

  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  bool all_zero = true;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    all_zero = all_zero && d == 0.0;
    ss += (d - mean) * (d - mean);
  }
  if (all_zero) return {0.0, 1.0};
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) return {std::copysign(std::numeric_limits<double>::infinity(), mean), 0.0};

  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(n - 1));
  const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
  return {t, std::min(1.0, p)};
}

std::string format_percent(const MeanStd& v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", 100.0 * v.mean, 100.0 * v.std);
  return buf;
}

}  // namespace fedwsidd
