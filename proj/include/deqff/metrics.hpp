#pragma once

#include <map>
#include <string>
#include <vector>

#include "deqff/common.hpp"

namespace deqff::metrics {

// mean absolute error over paired series
double mae(const std::vector<double>& pred, const std::vector<double>& gt);

// force errors in both conventions
struct ForceMae {
  double per_component = 0.0;  // mean over atoms and components (headline)
  double per_atom_norm = 0.0;  // mean over atoms of the error-vector norm
};
ForceMae force_mae(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt);

// (x - min)/(max - min) over one system's per-model errors.
// Throws when all values are equal (zero range).
std::vector<double> minmax_normalize(const std::vector<double>& errors);

// mean over systems of per-system normalized values (one value per system)
double aggregate(const std::vector<double>& normalized);

struct StepHistogram {
  std::map<int, double> percent;  // solver steps -> percentage of samples
  double mean = 0.0;
  double median = 0.0;

  std::string csv() const;  // columns: steps,percent
};
StepHistogram step_histogram(const std::vector<int>& steps);

// Wall-clock timing of repeated forward evaluations, first `warmup` calls
// excluded. Graph construction/IO are the caller's responsibility to keep
// outside fn.
double time_forward(const std::function<void()>& fn, int calls, int warmup = 10);

}  // namespace deqff::metrics
