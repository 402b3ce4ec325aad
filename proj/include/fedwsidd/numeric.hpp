#pragma once

#include <span>
#include <vector>

namespace fedwsidd::numeric {

/// Percentile q in [0,100] with linear interpolation between order statistics
/// (the "linear" rule). Reorders values.
double percentile(std::vector<double>& values, double q);

double mean(std::span<const double> values);

}  // namespace fedwsidd::numeric
