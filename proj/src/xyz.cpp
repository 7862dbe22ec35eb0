#include "deqff/xyz.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace deqff::xyz {

namespace {

struct Element {
  const char* symbol;
  double mass;
};

// Z = 1..36
const Element kElements[] = {
    {"H", 1.008},    {"He", 4.0026},  {"Li", 6.94},    {"Be", 9.0122},  {"B", 10.81},
    {"C", 12.011},   {"N", 14.007},   {"O", 15.999},   {"F", 18.998},   {"Ne", 20.180},
    {"Na", 22.990},  {"Mg", 24.305},  {"Al", 26.982},  {"Si", 28.085},  {"P", 30.974},
    {"S", 32.06},    {"Cl", 35.45},   {"Ar", 39.948},  {"K", 39.098},   {"Ca", 40.078},
    {"Sc", 44.956},  {"Ti", 47.867},  {"V", 50.942},   {"Cr", 51.996},  {"Mn", 54.938},
    {"Fe", 55.845},  {"Co", 58.933},  {"Ni", 58.693},  {"Cu", 63.546},  {"Zn", 65.38},
    {"Ga", 69.723},  {"Ge", 72.630},  {"As", 74.922},  {"Se", 78.971},  {"Br", 79.904},
    {"Kr", 83.798}};

constexpr int kMaxZ = int(sizeof(kElements) / sizeof(kElements[0]));

}  // namespace

std::string element_symbol(int z) {
  check(z >= 1 && z <= kMaxZ, "element_symbol: atomic number out of table");
  return kElements[z - 1].symbol;
}

int element_number(const std::string& symbol) {
  for (int z = 1; z <= kMaxZ; ++z)
    if (symbol == kElements[z - 1].symbol) return z;
  throw std::invalid_argument("element_number: unknown symbol " + symbol);
}

double atomic_mass(int z) {
  check(z >= 1 && z <= kMaxZ, "atomic_mass: atomic number out of table");
  return kElements[z - 1].mass;
}

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string write_frames(const std::vector<Frame>& frames) {
  std::ostringstream os;
  for (const auto& fr : frames) {
    const auto& s = fr.system;
    const int n = s.size();
    check(int(fr.forces.size()) == n, "write_frames: forces size mismatch");
    const bool with_vel = !s.velocities.empty();
    os << n << "\n";
    os << "frame=" << fr.index << " dt=" << format_g17(fr.dt)
       << " energy=" << format_g17(fr.energy) << "\n";
    for (int i = 0; i < n; ++i) {
      os << element_symbol(s.atomic_numbers[i]) << " " << format_g17(s.positions[i].x) << " "
         << format_g17(s.positions[i].y) << " " << format_g17(s.positions[i].z) << " "
         << format_g17(fr.forces[i].x) << " " << format_g17(fr.forces[i].y) << " "
         << format_g17(fr.forces[i].z);
      if (with_vel)
        os << " " << format_g17(s.velocities[i].x) << " " << format_g17(s.velocities[i].y) << " "
           << format_g17(s.velocities[i].z);
      os << "\n";
    }
  }
  return os.str();
}

std::vector<Frame> parse_frames(const std::string& text) {
  std::istringstream is(text);
  std::vector<Frame> frames;
  std::string line;
  long lineno = 0;
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("xyz parse error at line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++lineno;
    // skip blank separators between frames
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    int n = 0;
    try {
      n = std::stoi(line);
    } catch (...) {
      fail("expected atom count");
    }
    if (n <= 0) fail("atom count must be positive");
    Frame fr;
    if (!std::getline(is, line)) fail("missing comment line");
    ++lineno;
    {
      std::istringstream cs(line);
      std::string kv;
      while (cs >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "frame") fr.index = std::stol(val);
        else if (key == "dt") fr.dt = std::strtod(val.c_str(), nullptr);
        else if (key == "energy") fr.energy = std::strtod(val.c_str(), nullptr);
      }
    }
    bool saw_vel = false;
    for (int i = 0; i < n; ++i) {
      if (!std::getline(is, line)) fail("truncated frame body");
      ++lineno;
      std::istringstream as(line);
      std::string sym;
      std::vector<double> nums;
      as >> sym;
      double v;
      while (as >> v) nums.push_back(v);
      if (nums.size() != 6 && nums.size() != 9)
        fail("expected 'symbol x y z fx fy fz [vx vy vz]'");
      fr.system.atomic_numbers.push_back(element_number(sym));
      fr.system.positions.push_back({nums[0], nums[1], nums[2]});
      fr.forces.push_back({nums[3], nums[4], nums[5]});
      if (nums.size() == 9) {
        fr.system.velocities.push_back({nums[6], nums[7], nums[8]});
        saw_vel = true;
      } else if (saw_vel) {
        fail("inconsistent velocity columns within a frame");
      }
    }
    for (int z : fr.system.atomic_numbers) fr.system.masses.push_back(atomic_mass(z));
    frames.push_back(std::move(fr));
  }
  return frames;
}

void save_frames(const std::string& path, const std::vector<Frame>& frames) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("xyz: cannot open " + path + " for writing");
  f << write_frames(frames);
}

std::vector<Frame> load_frames(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("xyz: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_frames(ss.str());
}

}  // namespace deqff::xyz
