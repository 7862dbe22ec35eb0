#pragma once

#include <utility>
#include <vector>

#include "deqff/common.hpp"

namespace deqff::irreps {

// Highest degree for which SH / Wigner-D / CG tables are built.
inline constexpr int kMaxDegree = 6;

// Ordered list of (degree l, multiplicity C) blocks. Flat data holds, for
// each entry in order, C consecutive blocks of 2l+1 components (m = -l..l).
struct IrrepsLayout {
  std::vector<std::pair<int, int>> entries;  // (l, multiplicity), l nondecreasing

  IrrepsLayout() = default;
  explicit IrrepsLayout(std::vector<std::pair<int, int>> e);

  // one entry (l, channels) for every l in 0..l_max
  static IrrepsLayout uniform(int l_max, int channels);

  int dim() const;
  int max_degree() const;
  // flat offset of the start of entry `entry`
  int entry_offset(int entry) const;
  bool operator==(const IrrepsLayout& o) const { return entries == o.entries; }
};

struct IrrepsTensor {
  IrrepsLayout layout;
  std::vector<double> data;

  IrrepsTensor() = default;
  explicit IrrepsTensor(IrrepsLayout l) : layout(std::move(l)), data(layout.dim(), 0.0) {}
};

// Proper rotation; the constructor rejects matrices that are not orthogonal
// with determinant +1 (tolerance 1e-12).
struct Rotation {
  double m[3][3];

  Rotation();  // identity
  explicit Rotation(const double mat[3][3]);

  Vec3 apply(const Vec3& v) const;
  Rotation transpose() const;
  Rotation compose(const Rotation& other) const;  // this * other

  static Rotation from_axis_angle(const Vec3& axis, double angle);
  static Rotation random(Rng& rng);  // uniform over SO(3)
};

// Real spherical harmonics of a unit vector, component normalization:
// sum_m Y_lm(u)^2 = 2l+1 for every u. Ordering m = -l..l; the degree-1
// block is Y_1(u) = sqrt(3) * (u_y, u_z, u_x).
// Rejects |‖u‖-1| > 1e-9 and l_max outside [0, kMaxDegree].
std::vector<std::vector<double>> spherical_harmonics(int l_max, const Vec3& u);

// All degrees up to l_max flattened into one vector of size (l_max+1)^2.
std::vector<double> spherical_harmonics_flat(int l_max, const Vec3& u);

// (2l+1)x(2l+1) rotation matrix acting on degree-l components, row-major.
// Determined numerically from Y_l(R u) = D_l(R) Y_l(u) over a fixed set of
// generic directions, so it is consistent with our SH convention by
// construction.
std::vector<double> wigner_d(int l, const Rotation& rot);

// Clebsch-Gordan coupling table. One dense coefficient array per path
// (l1,l2,l3); paths that violate |l1-l2| <= l3 <= l1+l2 are flagged empty.
// Coefficients are the unique (up to sign) equivariant coupling, normalized
// to unit Frobenius norm with a deterministic sign convention, e.g.
// (1,1,0) contracts two vectors to dot(f,g)/sqrt(3).
class CGTable {
 public:
  explicit CGTable(int l_max);

  struct Path {
    int l1 = 0, l2 = 0, l3 = 0;
    bool valid = false;                 // triangle rule satisfied
    std::vector<double> dense;          // (2l1+1)*(2l2+1)*(2l3+1), m3 fastest
    // sparse view: (m1, m2, m3, value) for nonzero entries
    struct Entry { int m1, m2, m3; double v; };
    std::vector<Entry> nonzero;
  };

  int l_max() const { return l_max_; }
  const Path& path(int l1, int l2, int l3) const;

  // process-wide table, built lazily; safe to share between threads
  static const CGTable& get(int l_max);

 private:
  int l_max_;
  std::vector<Path> paths_;
  int index(int l1, int l2, int l3) const;
};

// out[m3] += sum_{m1,m2} C[m1,m2,m3] f[m1] g[m2]
void cg_contract(const CGTable::Path& p, const double* f, const double* g, double* out,
                 double scale = 1.0);
// df[m1] += scale * sum_{m2,m3} C[m1,m2,m3] g[m2] u[m3]   (adjoint w.r.t. f)
void cg_contract_adj_f(const CGTable::Path& p, const double* g, const double* u, double* df,
                       double scale = 1.0);

// Weighted tensor product of two irreps tensors (Eq-style path sum).
// `g` must have multiplicity 1 per degree; `f` and the output must share
// multiplicities per path. weights are indexed [path][channel] where paths
// enumerate valid (l1 of f, l2 of g, l3 of out) combinations in layout order.
struct TensorProductPlan {
  struct PathRef {
    int f_entry, g_entry, out_entry;
    const CGTable::Path* cg;
  };
  IrrepsLayout f_layout, g_layout, out_layout;
  std::vector<PathRef> paths;

  static TensorProductPlan build(const IrrepsLayout& f, const IrrepsLayout& g,
                                 const IrrepsLayout& out);
  int num_paths() const { return int(paths.size()); }
};

IrrepsTensor tensor_product(const IrrepsTensor& f, const IrrepsTensor& g,
                            const std::vector<std::vector<double>>& weights,
                            const IrrepsLayout& out_layout);

// Rotates every (l, channel) block by D_l(rot).
IrrepsTensor apply_rotation(const IrrepsTensor& x, const Rotation& rot);

}  // namespace deqff::irreps
