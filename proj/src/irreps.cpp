#include "deqff/irreps.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

namespace deqff::irreps {

IrrepsLayout::IrrepsLayout(std::vector<std::pair<int, int>> e) : entries(std::move(e)) {
  int prev = -1;
  for (auto& [l, c] : entries) {
    check(l >= 0 && l <= kMaxDegree, "IrrepsLayout: degree out of range");
    check(c >= 1, "IrrepsLayout: multiplicity must be positive");
    check(l >= prev, "IrrepsLayout: degrees must be nondecreasing");
    prev = l;
  }
}

IrrepsLayout IrrepsLayout::uniform(int l_max, int channels) {
  std::vector<std::pair<int, int>> e;
  for (int l = 0; l <= l_max; ++l) e.emplace_back(l, channels);
  return IrrepsLayout(std::move(e));
}

int IrrepsLayout::dim() const {
  int d = 0;
  for (auto& [l, c] : entries) d += c * (2 * l + 1);
  return d;
}

int IrrepsLayout::max_degree() const {
  int m = 0;
  for (auto& [l, c] : entries) m = std::max(m, l);
  return m;
}

int IrrepsLayout::entry_offset(int entry) const {
  int off = 0;
  for (int i = 0; i < entry; ++i) off += entries[i].second * (2 * entries[i].first + 1);
  return off;
}

// ---------------------------------------------------------------------------
// Rotation

namespace {
void validate_rotation(const double m[3][3]) {
  // R R^T = I and det R = 1, both to 1e-12
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += m[i][k] * m[j][k];
      double want = (i == j) ? 1.0 : 0.0;
      check(std::abs(s - want) <= 1e-12, "Rotation: matrix is not orthogonal");
    }
  }
  double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
               m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  check(std::abs(det - 1.0) <= 1e-12, "Rotation: determinant is not +1");
}
}  // namespace

Rotation::Rotation() {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = (i == j) ? 1.0 : 0.0;
}

Rotation::Rotation(const double mat[3][3]) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = mat[i][j];
  validate_rotation(m);
}

Vec3 Rotation::apply(const Vec3& v) const {
  return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
          m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
          m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}

Rotation Rotation::transpose() const {
  double t[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  return Rotation(t);
}

Rotation Rotation::compose(const Rotation& other) const {
  double t[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += m[i][k] * other.m[k][j];
      t[i][j] = s;
    }
  return Rotation(t);
}

Rotation Rotation::from_axis_angle(const Vec3& axis, double angle) {
  double n = axis.norm();
  check(n > 1e-12, "Rotation: zero axis");
  Vec3 a = axis * (1.0 / n);
  double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  double mat[3][3] = {
      {c + a.x * a.x * t, a.x * a.y * t - a.z * s, a.x * a.z * t + a.y * s},
      {a.y * a.x * t + a.z * s, c + a.y * a.y * t, a.y * a.z * t - a.x * s},
      {a.z * a.x * t - a.y * s, a.z * a.y * t + a.x * s, c + a.z * a.z * t}};
  return Rotation(mat);
}

Rotation Rotation::random(Rng& rng) {
  // uniform quaternion
  double q[4];
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& qi : q) {
      qi = rng.normal();
      n2 += qi * qi;
    }
  } while (n2 < 1e-12);
  double inv = 1.0 / std::sqrt(n2);
  double w = q[0] * inv, x = q[1] * inv, y = q[2] * inv, z = q[3] * inv;
  double mat[3][3] = {{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
                      {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
                      {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
  // renormalize rows against rounding so the validity check at 1e-12 holds
  for (auto& row : mat) {
    double r = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
    for (double& v : row) v /= r;
  }
  // re-orthogonalize second/third rows (Gram-Schmidt)
  double d01 = mat[0][0] * mat[1][0] + mat[0][1] * mat[1][1] + mat[0][2] * mat[1][2];
  for (int j = 0; j < 3; ++j) mat[1][j] -= d01 * mat[0][j];
  double r1 = std::sqrt(mat[1][0] * mat[1][0] + mat[1][1] * mat[1][1] + mat[1][2] * mat[1][2]);
  for (double& v : mat[1]) v /= r1;
  mat[2][0] = mat[0][1] * mat[1][2] - mat[0][2] * mat[1][1];
  mat[2][1] = mat[0][2] * mat[1][0] - mat[0][0] * mat[1][2];
  mat[2][2] = mat[0][0] * mat[1][1] - mat[0][1] * mat[1][0];
  return Rotation(mat);
}

// ---------------------------------------------------------------------------
// Real spherical harmonics
//
// Y_lm = N_lm * q_l^|m|(z) * Re/Im((x+iy)^|m|), with q_l^m(z) the associated
// Legendre function divided by sin^m(theta) (a polynomial in z, finite at the
// poles) and N_lm chosen so that sum_m Y_lm^2 = 2l+1. No Condon-Shortley
// phase, so Y_1 = sqrt(3) (y, z, x).

namespace {

double normalization(int l, int m) {
  // sqrt((2l+1) (l-m)!/(l+m)!), m >= 0
  double v = 2.0 * l + 1.0;
  for (int k = l - m + 1; k <= l + m; ++k) v /= double(k);
  return std::sqrt(v);
}

}  // namespace

std::vector<std::vector<double>> spherical_harmonics(int l_max, const Vec3& u) {
  check(l_max >= 0 && l_max <= kMaxDegree, "spherical_harmonics: l_max out of cached range");
  check(std::abs(u.norm() - 1.0) <= 1e-9, "spherical_harmonics: input must be a unit vector");

  const double x = u.x, y = u.y, z = u.z;

  // q[l][m] = P_l^m(z) / sin^m(theta), m >= 0
  double q[kMaxDegree + 1][kMaxDegree + 1] = {};
  q[0][0] = 1.0;
  for (int m = 1; m <= l_max; ++m) q[m][m] = q[m - 1][m - 1] * (2 * m - 1);
  for (int m = 0; m < l_max; ++m) q[m + 1][m] = z * (2 * m + 1) * q[m][m];
  for (int m = 0; m <= l_max; ++m)
    for (int l = m + 2; l <= l_max; ++l)
      q[l][m] = ((2 * l - 1) * z * q[l - 1][m] - (l + m - 1) * q[l - 2][m]) / double(l - m);

  // c[m] = Re((x+iy)^m), s[m] = Im((x+iy)^m)
  double c[kMaxDegree + 1], s[kMaxDegree + 1];
  c[0] = 1.0;
  s[0] = 0.0;
  for (int m = 1; m <= l_max; ++m) {
    c[m] = c[m - 1] * x - s[m - 1] * y;
    s[m] = s[m - 1] * x + c[m - 1] * y;
  }

  std::vector<std::vector<double>> out(l_max + 1);
  const double sqrt2 = std::sqrt(2.0);
  for (int l = 0; l <= l_max; ++l) {
    out[l].assign(2 * l + 1, 0.0);
    out[l][l] = normalization(l, 0) * q[l][0];
    for (int m = 1; m <= l; ++m) {
      double k = sqrt2 * normalization(l, m) * q[l][m];
      out[l][l + m] = k * c[m];
      out[l][l - m] = k * s[m];
    }
  }
  return out;
}

std::vector<double> spherical_harmonics_flat(int l_max, const Vec3& u) {
  auto per_l = spherical_harmonics(l_max, u);
  std::vector<double> flat;
  flat.reserve((l_max + 1) * (l_max + 1));
  for (auto& blk : per_l) flat.insert(flat.end(), blk.begin(), blk.end());
  return flat;
}

// ---------------------------------------------------------------------------
// Wigner-D

namespace {

// Fixed generic directions used for the consistency solves; seeded once.
const std::vector<Vec3>& probe_directions() {
  static const std::vector<Vec3> dirs = [] {
    Rng rng(0x5eedd12ec7100ULL);
    std::vector<Vec3> v;
    for (int i = 0; i < 4 * (kMaxDegree + 1); ++i) {
      Vec3 d{rng.normal(), rng.normal(), rng.normal()};
      double n = d.norm();
      if (n < 1e-3) { --i; continue; }
      v.push_back(d * (1.0 / n));
    }
    return v;
  }();
  return dirs;
}

}  // namespace

std::vector<double> wigner_d(int l, const Rotation& rot) {
  check(l >= 0 && l <= kMaxDegree, "wigner_d: degree out of cached range");
  const int d = 2 * l + 1;
  if (l == 0) return {1.0};

  const auto& dirs = probe_directions();
  const int k = 2 * d + 2;  // overdetermined for a stable solve
  Eigen::MatrixXd A(d, k), B(d, k);
  for (int j = 0; j < k; ++j) {
    auto ya = spherical_harmonics(l, dirs[j]);
    auto yb = spherical_harmonics(l, rot.apply(dirs[j]));
    for (int i = 0; i < d; ++i) {
      A(i, j) = ya[l][i];
      B(i, j) = yb[l][i];
    }
  }
  // D A = B  =>  D = B A^T (A A^T)^-1
  Eigen::MatrixXd AAt = A * A.transpose();
  Eigen::MatrixXd D = (AAt.ldlt().solve(A * B.transpose())).transpose();

  std::vector<double> out(d * d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) out[i * d + j] = D(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Clebsch-Gordan table
//
// For each valid (l1,l2,l3) the equivariant coupling tensor is the
// one-dimensional null space of the constraint
//   sum_{m1,m2} C[m1,m2,m3] D1[m1,a] D2[m2,b] - sum_n D3[m3,n] C[a,b,n] = 0
// stacked over a few generic rotations. Generating it numerically, instead of
// transcribing a closed form, keeps the table consistent with whatever SH
// convention wigner_d encodes. Scale is fixed to unit Frobenius norm and the
// sign so that the first nonzero entry (lexicographic m1,m2,m3) is positive.

int CGTable::index(int l1, int l2, int l3) const {
  return (l1 * (l_max_ + 1) + l2) * (l_max_ + 1) + l3;
}

CGTable::CGTable(int l_max) : l_max_(l_max) {
  check(l_max >= 0 && l_max <= kMaxDegree, "CGTable: l_max out of range");
  paths_.resize((l_max + 1) * (l_max + 1) * (l_max + 1));

  Rng rng(0xc1eb5c4c0dacULL);
  std::vector<Rotation> rots;
  for (int i = 0; i < 3; ++i) rots.push_back(Rotation::random(rng));
  std::vector<std::vector<std::vector<double>>> dmats(rots.size());
  for (std::size_t r = 0; r < rots.size(); ++r) {
    dmats[r].resize(l_max + 1);
    for (int l = 0; l <= l_max; ++l) dmats[r][l] = wigner_d(l, rots[r]);
  }

  for (int l1 = 0; l1 <= l_max; ++l1)
    for (int l2 = 0; l2 <= l_max; ++l2)
      for (int l3 = 0; l3 <= l_max; ++l3) {
        Path& p = paths_[index(l1, l2, l3)];
        p.l1 = l1;
        p.l2 = l2;
        p.l3 = l3;
        const int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, d3 = 2 * l3 + 1;
        p.dense.assign(std::size_t(d1) * d2 * d3, 0.0);
        if (l3 < std::abs(l1 - l2) || l3 > l1 + l2) {
          p.valid = false;  // empty path, all-zero
          continue;
        }
        p.valid = true;

        const int n = d1 * d2 * d3;
        Eigen::MatrixXd M(int(rots.size()) * n, n);
        M.setZero();
        auto cidx = [&](int m1, int m2, int m3) { return (m1 * d2 + m2) * d3 + m3; };
        for (std::size_t r = 0; r < rots.size(); ++r) {
          const auto& D1 = dmats[r][l1];
          const auto& D2 = dmats[r][l2];
          const auto& D3 = dmats[r][l3];
          // row (a, b, m3): sum_{m1,m2} C[m1,m2,m3] D1[m1,a] D2[m2,b]
          //                 - sum_n D3[m3,n] C[a,b,n] = 0
          for (int a = 0; a < d1; ++a)
            for (int b = 0; b < d2; ++b)
              for (int m3 = 0; m3 < d3; ++m3) {
                int row = int(r) * n + cidx(a, b, m3);
                for (int m1 = 0; m1 < d1; ++m1)
                  for (int m2 = 0; m2 < d2; ++m2)
                    M(row, cidx(m1, m2, m3)) += D1[m1 * d1 + a] * D2[m2 * d2 + b];
                for (int m3n = 0; m3n < d3; ++m3n)
                  M(row, cidx(a, b, m3n)) -= D3[m3 * d3 + m3n];
              }
        }

        Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinV);
        Eigen::VectorXd c = svd.matrixV().col(n - 1);
        // deterministic sign: first entry with magnitude > 0.1*max is positive
        double maxabs = c.cwiseAbs().maxCoeff();
        for (int i = 0; i < n; ++i) {
          if (std::abs(c(i)) > 0.1 * maxabs) {
            if (c(i) < 0) c = -c;
            break;
          }
        }
        c /= c.norm();
        for (int i = 0; i < n; ++i) {
          double v = c(i);
          p.dense[i] = (std::abs(v) < 1e-11) ? 0.0 : v;
        }
        for (int m1 = 0; m1 < d1; ++m1)
          for (int m2 = 0; m2 < d2; ++m2)
            for (int m3 = 0; m3 < d3; ++m3) {
              double v = p.dense[cidx(m1, m2, m3)];
              if (v != 0.0) p.nonzero.push_back({m1, m2, m3, v});
            }
      }
}

const CGTable::Path& CGTable::path(int l1, int l2, int l3) const {
  check(l1 >= 0 && l1 <= l_max_ && l2 >= 0 && l2 <= l_max_ && l3 >= 0 && l3 <= l_max_,
        "CGTable: degree beyond cached l_max");
  return paths_[index(l1, l2, l3)];
}

const CGTable& CGTable::get(int l_max) {
  static std::mutex mu;
  static std::map<int, std::unique_ptr<CGTable>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(l_max);
  if (it == cache.end()) it = cache.emplace(l_max, std::make_unique<CGTable>(l_max)).first;
  return *it->second;
}

void cg_contract(const CGTable::Path& p, const double* f, const double* g, double* out,
                 double scale) {
  for (const auto& e : p.nonzero) out[e.m3] += scale * e.v * f[e.m1] * g[e.m2];
}

void cg_contract_adj_f(const CGTable::Path& p, const double* g, const double* u, double* df,
                       double scale) {
  for (const auto& e : p.nonzero) df[e.m1] += scale * e.v * g[e.m2] * u[e.m3];
}

// ---------------------------------------------------------------------------
// Weighted tensor product

TensorProductPlan TensorProductPlan::build(const IrrepsLayout& f, const IrrepsLayout& g,
                                           const IrrepsLayout& out) {
  int l_max = std::max({f.max_degree(), g.max_degree(), out.max_degree()});
  const CGTable& cg = CGTable::get(l_max);
  TensorProductPlan plan;
  plan.f_layout = f;
  plan.g_layout = g;
  plan.out_layout = out;
  for (std::size_t ge = 0; ge < g.entries.size(); ++ge)
    check(g.entries[ge].second == 1, "tensor_product: g must have multiplicity 1 per degree");
  for (std::size_t oe = 0; oe < out.entries.size(); ++oe) {
    for (std::size_t fe = 0; fe < f.entries.size(); ++fe) {
      check(f.entries[fe].second == out.entries[oe].second,
            "tensor_product: f/out multiplicities must match");
      for (std::size_t ge = 0; ge < g.entries.size(); ++ge) {
        int l1 = f.entries[fe].first, l2 = g.entries[ge].first, l3 = out.entries[oe].first;
        const auto& p = cg.path(l1, l2, l3);
        if (!p.valid) continue;
        plan.paths.push_back({int(fe), int(ge), int(oe), &p});
      }
    }
  }
  return plan;
}

IrrepsTensor tensor_product(const IrrepsTensor& f, const IrrepsTensor& g,
                            const std::vector<std::vector<double>>& weights,
                            const IrrepsLayout& out_layout) {
  check(int(f.data.size()) == f.layout.dim(), "tensor_product: f data/layout mismatch");
  check(int(g.data.size()) == g.layout.dim(), "tensor_product: g data/layout mismatch");
  auto plan = TensorProductPlan::build(f.layout, g.layout, out_layout);
  check(weights.size() == plan.paths.size(),
        "tensor_product: weights must have one entry per valid path");

  IrrepsTensor out(out_layout);
  for (std::size_t pi = 0; pi < plan.paths.size(); ++pi) {
    const auto& pr = plan.paths[pi];
    int channels = f.layout.entries[pr.f_entry].second;
    check(int(weights[pi].size()) == channels,
          "tensor_product: per-path weights must match channel count");
    int d1 = 2 * f.layout.entries[pr.f_entry].first + 1;
    int d3 = 2 * out_layout.entries[pr.out_entry].first + 1;
    const double* gp = g.data.data() + g.layout.entry_offset(pr.g_entry);
    for (int c = 0; c < channels; ++c) {
      const double* fp = f.data.data() + f.layout.entry_offset(pr.f_entry) + c * d1;
      double* op = out.data.data() + out_layout.entry_offset(pr.out_entry) + c * d3;
      cg_contract(*pr.cg, fp, gp, op, weights[pi][c]);
    }
  }
  return out;
}

IrrepsTensor apply_rotation(const IrrepsTensor& x, const Rotation& rot) {
  check(int(x.data.size()) == x.layout.dim(), "apply_rotation: data/layout mismatch");
  IrrepsTensor out(x.layout);
  for (std::size_t e = 0; e < x.layout.entries.size(); ++e) {
    auto [l, channels] = x.layout.entries[e];
    auto D = wigner_d(l, rot);
    int d = 2 * l + 1;
    int off = x.layout.entry_offset(int(e));
    for (int c = 0; c < channels; ++c) {
      const double* src = x.data.data() + off + c * d;
      double* dst = out.data.data() + off + c * d;
      for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += D[i * d + j] * src[j];
        dst[i] = s;
      }
    }
  }
  return out;
}

}  // namespace deqff::irreps
