#include "deqff/graph.hpp"

#include <algorithm>
#include <sstream>

namespace deqff::graph {

void AtomicSystem::validate() const {
  check(!atomic_numbers.empty(), "AtomicSystem: no atoms");
  check(positions.size() == atomic_numbers.size(), "AtomicSystem: positions size mismatch");
  check(velocities.empty() || velocities.size() == atomic_numbers.size(),
        "AtomicSystem: velocities size mismatch");
  check(masses.empty() || masses.size() == atomic_numbers.size(),
        "AtomicSystem: masses size mismatch");
  for (int z : atomic_numbers) check(z >= 1, "AtomicSystem: atomic number must be >= 1");
  for (double m : masses) check(m > 0.0, "AtomicSystem: masses must be positive");
}

EdgeList build_neighbor_list(const AtomicSystem& system, double r_cut, int max_neighbors) {
  system.validate();
  check(r_cut > 0.0, "build_neighbor_list: r_cut must be positive");
  check(max_neighbors >= 1, "build_neighbor_list: max_neighbors must be >= 1");

  const int n = system.size();
  struct Cand {
    double dist;
    int src;
    Vec3 r_vec;
  };
  std::vector<std::vector<Cand>> per_dst(n);
  for (int dst = 0; dst < n; ++dst) {
    for (int src = 0; src < n; ++src) {
      if (src == dst) continue;
      Vec3 rv = system.positions[src] - system.positions[dst];
      double d = rv.norm();
      if (d <= 1e-6) {
        std::ostringstream msg;
        msg << "build_neighbor_list: atoms " << dst << " and " << src
            << " coincide (distance " << d << " A)";
        throw std::invalid_argument(msg.str());
      }
      if (d <= r_cut) per_dst[dst].push_back({d, src, rv});
    }
  }

  EdgeList out;
  out.r_cut = r_cut;
  for (int dst = 0; dst < n; ++dst) {
    auto& cands = per_dst[dst];
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return a.dist != b.dist ? a.dist < b.dist : a.src < b.src;
    });
    if (int(cands.size()) > max_neighbors) cands.resize(max_neighbors);
    for (const auto& c : cands) {
      out.edges.push_back({c.src, dst});
      out.r_vec.push_back(c.r_vec);
      out.dist.push_back(c.dist);
    }
  }
  return out;
}

double RadialBasis::center(int k) const {
  if (num_basis == 1) return 0.0;
  return r_cut * double(k) / double(num_basis - 1);
}

double RadialBasis::effective_width() const {
  if (width > 0.0) return width;
  return num_basis > 1 ? r_cut / double(num_basis - 1) : r_cut;
}

double cutoff_envelope(double dist, double r_cut) {
  if (dist >= r_cut) return 0.0;
  double x = dist / r_cut;
  double x3 = x * x * x;
  return 1.0 - x3 * (10.0 - 15.0 * x + 6.0 * x * x);
}

void radial_embed(double dist, const RadialBasis& basis, double* out) {
  check(dist > 0.0 && dist <= basis.r_cut, "radial_embed: dist outside (0, r_cut]");
  double env = cutoff_envelope(dist, basis.r_cut);
  double w = basis.effective_width();
  double inv2w2 = 1.0 / (2.0 * w * w);
  for (int k = 0; k < basis.num_basis; ++k) {
    double d = dist - basis.center(k);
    out[k] = env * std::exp(-d * d * inv2w2);
  }
}

std::vector<double> radial_embed(double dist, const RadialBasis& basis) {
  std::vector<double> out(basis.num_basis);
  radial_embed(dist, basis, out.data());
  return out;
}

}  // namespace deqff::graph
