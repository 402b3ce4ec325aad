#include "doctest.h"

#include <cmath>

#include "fedwsidd/eval.hpp"
#include "fedwsidd/core.hpp"

using namespace fedwsidd;

namespace {

// closed-form Student t CDFs for 2 and 4 degrees of freedom
double t_cdf_df2(double t) { return 0.5 + t / (2.0 * std::sqrt(2.0 + t * t)); }
double t_cdf_df4(double t) {
  const double q = 1.0 + t * t / 4.0;
  return 0.5 + 0.375 * (t / std::sqrt(q)) * (1.0 - t * t / (12.0 * q));
}

}  // namespace

TEST_CASE("accuracy counts matches") {
  const std::vector<int> p = {1, 0, 1, 1}, y = {1, 1, 1, 0};
  CHECK(accuracy(p, y) == doctest::Approx(0.5));
  CHECK_THROWS_AS(accuracy(p, std::vector<int>{1}), Error);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), Error);
}

TEST_CASE("table one arithmetic") {
  RunAccuracies ca16;
  ca16.per_centre = {{"C1", 0.942}, {"C2", 0.845}};
  ca16.test_sizes = {{"C1", 74}, {"C2", 55}};
  const double expect = (0.942 * 74 + 0.845 * 55) / 129.0;
  CHECK(weighted_global_average(ca16) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(std::fabs(100.0 * weighted_global_average(ca16) - 90.1) < 0.05);

  RunAccuracies ca17;
  const double accs[] = {0.86, 0.76, 0.89, 0.71, 0.84};
  for (int i = 0; i < 5; ++i) {
    ca17.per_centre["C" + std::to_string(i + 1)] = accs[i];
    ca17.test_sizes["C" + std::to_string(i + 1)] = 20;
  }
  CHECK(100.0 * weighted_global_average(ca17) == doctest::Approx(81.2).epsilon(1e-12));
}

TEST_CASE("global average needs test sizes") {
  RunAccuracies r;
  r.per_centre = {{"C1", 0.5}};
  CHECK_THROWS_AS(weighted_global_average(r), Error);
}

TEST_CASE("mean and population std") {
  const std::vector<double> v = {1, 2, 3, 4};
  const auto m = mean_std(v);
  CHECK(m.mean == doctest::Approx(2.5));
  CHECK(m.std == doctest::Approx(std::sqrt(1.25)));
}

TEST_CASE("seed summaries") {
  std::vector<RunAccuracies> runs(2);
  runs[0].per_centre = {{"C1", 1.0}, {"C2", 0.5}};
  runs[0].test_sizes = {{"C1", 1}, {"C2", 3}};
  runs[1].per_centre = {{"C1", 0.0}, {"C2", 0.5}};
  runs[1].test_sizes = {{"C1", 1}, {"C2", 3}};
  const auto s = summarize_seeds(runs);
  CHECK(s.global_per_seed[0] == doctest::Approx(0.625));
  CHECK(s.global_per_seed[1] == doctest::Approx(0.375));
  CHECK(s.per_centre.at("C1").mean == doctest::Approx(0.5));
  CHECK(s.per_centre.at("C1").std == doctest::Approx(0.5));
  CHECK(s.global.mean == doctest::Approx(0.5));
  runs[1].per_centre.erase("C2");
  CHECK_THROWS_AS(summarize_seeds(runs), Error);
}

TEST_CASE("paired t-test df=4 example") {
  const std::vector<double> a = {2, 3, 4, 5, 6}, b = {1, 1, 1, 1, 1};
  const auto r = paired_t_test(a, b);
  CHECK(r.t_statistic == doctest::Approx(3.0 * std::sqrt(2.0)).epsilon(1e-12));
  const double p = 2.0 * (1.0 - t_cdf_df4(r.t_statistic));
  CHECK(std::fabs(r.p_value - p) < 1e-10);
  CHECK(std::fabs(r.p_value - 0.0132) < 1e-4);
}

TEST_CASE("paired t-test df=2 against the closed form") {
  const std::vector<double> a = {0.3, 0.1, 0.9}, b = {0.1, 0.2, 0.4};
  const auto r = paired_t_test(a, b);
  const double mean = (0.2 - 0.1 + 0.5) / 3.0;
  const double sd = std::sqrt(((0.2 - mean) * (0.2 - mean) + (-0.1 - mean) * (-0.1 - mean) + (0.5 - mean) * (0.5 - mean)) / 2.0);
  const double t = mean / (sd / std::sqrt(3.0));
  CHECK(r.t_statistic == doctest::Approx(t));
  CHECK(r.p_value == doctest::Approx(2.0 * (1.0 - t_cdf_df2(std::fabs(t)))).epsilon(1e-10));
}

TEST_CASE("paired t-test edge cases") {
  const std::vector<double> a = {0.5, 0.6, 0.7};
  const auto same = paired_t_test(a, a);
  CHECK(same.p_value == 1.0);
  CHECK(same.t_statistic == 0.0);
  const std::vector<double> shifted = {0.6, 0.7, 0.8};
  CHECK(paired_t_test(shifted, a).p_value == doctest::Approx(0.0));
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1}, std::vector<double>{1}), Error);
  CHECK_THROWS_AS(paired_t_test(a, std::vector<double>{1, 2}), Error);
}

TEST_CASE("percent formatting") {
  CHECK(format_percent({0.90064, 0.0012}) == "90.1 ± 0.1");
  CHECK(format_percent({0.812, 0.0}) == "81.2 ± 0.0");
}
