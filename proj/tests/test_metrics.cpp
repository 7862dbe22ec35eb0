#include "deqff/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "doctest.h"

using namespace deqff;
using namespace deqff::metrics;

TEST_SUITE_BEGIN("metrics");

TEST_CASE("mae: identical series give zero, constant offset gives the offset") {
  std::vector<double> a = {1.0, -2.0, 3.5};
  CHECK(mae(a, a) == 0.0);
  std::vector<double> b = a;
  for (double& x : b) x += 0.75;
  CHECK(mae(b, a) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("mae: matches a brute-force recomputation with independent summation order") {
  Rng rng(1);
  std::vector<double> p(257), g(257);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.normal();
    g[i] = rng.normal();
  }
  // oracle: sum in reverse order with long double accumulation
  long double acc = 0.0L;
  for (std::size_t i = p.size(); i-- > 0;) acc += std::abs((long double)p[i] - g[i]);
  double want = double(acc / p.size());
  CHECK(mae(p, g) == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("minmax: {1,2,3} -> {0, 0.5, 1}") {
  auto out = minmax_normalize({1.0, 2.0, 3.0});
  CHECK(out[0] == 0.0);
  CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out[2] == 1.0);
}

TEST_CASE("minmax: equal values are a zero-range error") {
  CHECK_THROWS_AS(minmax_normalize({5.0, 5.0}), std::invalid_argument);
}

TEST_CASE("minmax: output hits 0 and 1 exactly on random sets") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(5);
    for (double& x : v) x = rng.normal();
    auto out = minmax_normalize(v);
    CHECK(*std::min_element(out.begin(), out.end()) == 0.0);
    CHECK(*std::max_element(out.begin(), out.end()) == 1.0);
    for (double x : out) CHECK((x >= 0.0 && x <= 1.0));
  }
}

TEST_CASE("minmax: invariant under positive affine rescaling of raw errors") {
  Rng rng(3);
  std::vector<double> v = {0.3, 1.7, 0.9, 2.4};
  auto base = minmax_normalize(v);
  double scale = 3.7, shift = -1.2;
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = scale * v[i] + shift;
  auto out = minmax_normalize(w);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(out[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("aggregate: single system is identity; permutation invariant") {
  CHECK(aggregate({0.42}) == doctest::Approx(0.42).epsilon(1e-15));
  std::vector<double> v = {0.1, 0.5, 0.9, 0.0};
  double a = aggregate(v);
  std::reverse(v.begin(), v.end());
  CHECK(aggregate(v) == doctest::Approx(a).epsilon(1e-15));
  // model best on every system -> 0
  CHECK(aggregate({0.0, 0.0, 0.0}) == 0.0);
}

TEST_CASE("step histogram: percentages sum to 100 and stats are right") {
  std::vector<int> steps = {3, 3, 4, 5, 5, 5, 7, 9, 3, 4};
  auto h = step_histogram(steps);
  double total = 0.0;
  for (auto& [k, p] : h.percent) total += p;
  CHECK(std::abs(total - 100.0) < 1e-9);
  CHECK(h.mean == doctest::Approx(4.8).epsilon(1e-12));
  CHECK(h.median == doctest::Approx(4.5).epsilon(1e-12));
  CHECK(h.percent.at(3) == doctest::Approx(30.0).epsilon(1e-12));
  // csv export parses back
  auto csv = h.csv();
  CHECK(csv.find("steps,percent\n") == 0);
}

TEST_CASE("force_mae: both conventions") {
  std::vector<Vec3> p = {{3, 4, 0}, {0, 0, 0}};
  std::vector<Vec3> g = {{0, 0, 0}, {0, 0, 0}};
  auto fm = force_mae(p, g);
  CHECK(fm.per_component == doctest::Approx(7.0 / 6.0).epsilon(1e-15));
  CHECK(fm.per_atom_norm == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_SUITE_END();
