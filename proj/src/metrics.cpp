#include "deqff/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace deqff::metrics {

double mae(const std::vector<double>& pred, const std::vector<double>& gt) {
  check(pred.size() == gt.size() && !pred.empty(), "mae: size mismatch or empty");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / double(pred.size());
}

ForceMae force_mae(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
  check(pred.size() == gt.size() && !pred.empty(), "force_mae: size mismatch or empty");
  ForceMae out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    Vec3 d = pred[i] - gt[i];
    out.per_component += std::abs(d.x) + std::abs(d.y) + std::abs(d.z);
    out.per_atom_norm += d.norm();
  }
  out.per_component /= 3.0 * double(pred.size());
  out.per_atom_norm /= double(pred.size());
  return out;
}

std::vector<double> minmax_normalize(const std::vector<double>& errors) {
  check(errors.size() >= 2, "minmax_normalize: need at least two values");
  double lo = *std::min_element(errors.begin(), errors.end());
  double hi = *std::max_element(errors.begin(), errors.end());
  if (hi == lo) throw std::invalid_argument("minmax_normalize: zero range (all values equal)");
  std::vector<double> out(errors.size());
  for (std::size_t i = 0; i < errors.size(); ++i) out[i] = (errors[i] - lo) / (hi - lo);
  return out;
}

double aggregate(const std::vector<double>& normalized) {
  check(!normalized.empty(), "aggregate: empty input");
  double s = 0.0;
  for (double v : normalized) s += v;
  return s / double(normalized.size());
}

StepHistogram step_histogram(const std::vector<int>& steps) {
  check(!steps.empty(), "step_histogram: empty input");
  StepHistogram h;
  std::map<int, long> counts;
  double sum = 0.0;
  for (int s : steps) {
    counts[s]++;
    sum += s;
  }
  for (auto& [k, c] : counts) h.percent[k] = 100.0 * double(c) / double(steps.size());
  h.mean = sum / double(steps.size());
  std::vector<int> sorted(steps);
  std::sort(sorted.begin(), sorted.end());
  std::size_t n = sorted.size();
  h.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return h;
}

std::string StepHistogram::csv() const {
  std::ostringstream os;
  os << "steps,percent\n";
  char buf[40];
  for (const auto& [k, p] : percent) {
    std::snprintf(buf, sizeof(buf), "%.17g", p);
    os << k << "," << buf << "\n";
  }
  return os.str();
}

double time_forward(const std::function<void()>& fn, int calls, int warmup) {
  check(calls >= 1, "time_forward: calls must be >= 1");
  for (int i = 0; i < warmup; ++i) fn();
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < calls; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / double(calls);
}

}  // namespace deqff::metrics
