#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace deqff {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// xorshift-free deterministic RNG utilities. std::mt19937_64 is portable,
// but the standard distributions are not; we roll the few we need so that
// seeded runs are bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; have_spare_ = false; }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Derive a child seed from a parent seed and a stream label; used to give
// every (epoch, step, sample) its own independent deterministic stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  Rng r(base ^ (a * 0xd6e8feb86659fd93ULL) ^ (b * 0xa5a5a5a5a5a5a5a5ULL) ^
        (c * 0x2545f4914f6cdd1dULL));
  return r.next_u64();
}

struct CheckError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Instrumented counter for node-feature-sized buffers. The DEQ forward and
// IFT backward must keep the number of live feature buffers bounded by a
// constant independent of solver step count; tests read `peak` around a
// forward+backward pass to verify that.
namespace memlog {
std::int64_t live();
std::int64_t peak();
void reset_peak();
void on_alloc();
void on_free();
}  // namespace memlog

// A flat per-graph feature vector (all nodes concatenated) whose lifetime is
// tracked by memlog. Used for solver iterates, ring buffers and cotangents.
class FeatVec {
 public:
  FeatVec() = default;
  explicit FeatVec(std::size_t n) : v_(n, 0.0) { memlog::on_alloc(); owns_ = true; }
  FeatVec(const FeatVec& o) : v_(o.v_) {
    if (o.owns_) { memlog::on_alloc(); owns_ = true; }
  }
  FeatVec(FeatVec&& o) noexcept : v_(std::move(o.v_)), owns_(o.owns_) { o.owns_ = false; }
  FeatVec& operator=(const FeatVec& o) {
    if (this != &o) {
      if (owns_ && !o.owns_) { memlog::on_free(); }
      if (!owns_ && o.owns_) { memlog::on_alloc(); }
      v_ = o.v_;
      owns_ = o.owns_;
    }
    return *this;
  }
  FeatVec& operator=(FeatVec&& o) noexcept {
    if (this != &o) {
      if (owns_) memlog::on_free();
      v_ = std::move(o.v_);
      owns_ = o.owns_;
      o.owns_ = false;
    }
    return *this;
  }
  ~FeatVec() {
    if (owns_) memlog::on_free();
  }

  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }
  std::vector<double>& raw() { return v_; }
  const std::vector<double>& raw() const { return v_; }
  void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

 private:
  std::vector<double> v_;
  bool owns_ = false;
};

inline double dot(const FeatVec& a, const FeatVec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const FeatVec& a) { return std::sqrt(dot(a, a)); }

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots; any reduction is done by the caller in index
// order so that the outcome does not depend on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// Thread cap: DEQFF_THREADS env var if set, else hardware concurrency.
int default_threads();

}  // namespace deqff
