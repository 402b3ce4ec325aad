#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace fedwsidd {

struct RunAccuracies {
  std::map<std::string, double> per_centre;
  std::map<std::string, int> test_sizes;
  std::uint64_t seed = 0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct SeedSummary {
  std::map<std::string, MeanStd> per_centre;
  MeanStd global;
  std::vector<double> global_per_seed;
};

struct TTestResult {
  double t_statistic = 0.0;
  double p_value = 1.0;
};

/// Throws LengthMismatch, EmptyDataset.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Test-size weighted mean of the per-centre accuracies.
double weighted_global_average(const RunAccuracies& acc);

MeanStd mean_std(std::span<const double> values);

/// Throws InconsistentCentres, EmptyDataset.
SeedSummary summarize_seeds(std::span<const RunAccuracies> runs);

/// Two-sided paired t-test on a - b. Throws LengthMismatch, TooFewSamples.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Percent with one decimal, e.g. "90.1 ± 0.1".
std::string format_percent(const MeanStd& v);

}  // namespace fedwsidd
