#pragma once

#include <optional>
#include <vector>

#include "deqff/common.hpp"

namespace deqff::graph {

struct AtomicSystem {
  std::vector<int> atomic_numbers;
  std::vector<Vec3> positions;        // Angstrom
  std::vector<Vec3> velocities;       // optional, Angstrom/fs; empty or per-atom
  std::vector<double> masses;         // optional, amu; empty or per-atom

  int size() const { return int(atomic_numbers.size()); }
  void validate() const;
};

// Directed edges (src -> dst); r_vec points from dst to src.
struct EdgeList {
  struct Edge {
    int src, dst;
  };
  std::vector<Edge> edges;
  std::vector<Vec3> r_vec;
  std::vector<double> dist;
  double r_cut = 0.0;

  int size() const { return int(edges.size()); }
};

// All ordered pairs within r_cut, no self edges. When a destination node has
// more than max_neighbors sources in range, the nearest are kept (ties broken
// by lower source index). Edges are sorted by (dst, dist, src).
// Throws if two atoms are closer than 1e-6 Angstrom, naming the pair.
EdgeList build_neighbor_list(const AtomicSystem& system, double r_cut, int max_neighbors);

struct RadialBasis {
  int num_basis = 8;
  double r_cut = 5.0;
  double width = 0.0;  // 0 -> center spacing

  double center(int k) const;
  double effective_width() const;
};

// Polynomial cutoff envelope: 1 at 0, vanishes with zero first and second
// derivative at r_cut.
double cutoff_envelope(double dist, double r_cut);

// Gaussian bumps times the cutoff envelope. Rejects dist outside (0, r_cut].
void radial_embed(double dist, const RadialBasis& basis, double* out);
std::vector<double> radial_embed(double dist, const RadialBasis& basis);

}  // namespace deqff::graph
