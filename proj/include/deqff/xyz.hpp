#pragma once

#include <string>
#include <vector>

#include "deqff/graph.hpp"

namespace deqff::xyz {

// One extended-XYZ frame: atom count line; comment line of key=value pairs
// (frame=, dt=, energy=); per-atom lines "symbol x y z fx fy fz [vx vy vz]".
// All numbers are written with 17 significant digits so written files
// re-parse and re-emit byte-identically.
struct Frame {
  graph::AtomicSystem system;  // velocities populated when present in file
  double energy = 0.0;
  std::vector<Vec3> forces;
  double dt = 0.0;
  long index = 0;
};

std::string element_symbol(int z);
int element_number(const std::string& symbol);
double atomic_mass(int z);  // amu

std::string format_g17(double v);

std::string write_frames(const std::vector<Frame>& frames);
std::vector<Frame> parse_frames(const std::string& text);

void save_frames(const std::string& path, const std::vector<Frame>& frames);
std::vector<Frame> load_frames(const std::string& path);

}  // namespace deqff::xyz
