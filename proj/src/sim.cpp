#include "deqff/sim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace deqff::sim {

void OraclePotential::validate(int n_atoms) const {
  for (const auto& b : bonds) {
    check(b.i >= 0 && b.i < n_atoms && b.j >= 0 && b.j < n_atoms && b.i != b.j,
          "OraclePotential: bond indices out of range");
    check(b.r0 > 0.0 && b.k >= 0.0, "OraclePotential: bad bond parameters");
  }
  check(lj_epsilon >= 0.0 && lj_sigma > 0.0 && lj_cut > 0.0,
        "OraclePotential: bad LJ parameters");
}

EnergyForces oracle_eval(const graph::AtomicSystem& system, const OraclePotential& pot) {
  system.validate();
  const int n = system.size();
  pot.validate(n);
  EnergyForces out;
  out.forces.assign(n, Vec3{});

  for (const auto& b : pot.bonds) {
    Vec3 d = system.positions[b.j] - system.positions[b.i];
    double r = d.norm();
    check(r > 1e-9, "oracle_eval: bonded atoms coincide");
    double dr = r - b.r0;
    out.energy += 0.5 * b.k * dr * dr;
    // dE/dr = k dr; force on i is +k dr * dhat (toward j when stretched)
    Vec3 f = d * (b.k * dr / r);
    out.forces[b.i] += f;
    out.forces[b.j] -= f;
  }

  if (pot.lj_epsilon > 0.0) {
    std::set<std::pair<int, int>> bonded;
    for (const auto& b : pot.bonds)
      bonded.insert({std::min(b.i, b.j), std::max(b.i, b.j)});
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        if (bonded.count({i, j})) continue;
        Vec3 d = system.positions[j] - system.positions[i];
        double r = d.norm();
        if (r >= pot.lj_cut) continue;
        check(r > 1e-9, "oracle_eval: LJ atoms coincide");
        double sr = pot.lj_sigma / r;
        double sr6 = sr * sr * sr;
        sr6 *= sr6;
        double sr12 = sr6 * sr6;
        double e_raw = 4.0 * pot.lj_epsilon * (sr12 - sr6);
        // dE_raw/dr
        double de_raw = 4.0 * pot.lj_epsilon * (-12.0 * sr12 + 6.0 * sr6) / r;
        double x = r / pot.lj_cut;
        double env = 1.0 - x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
        double denv = (-30.0 * x * x + 60.0 * x * x * x - 30.0 * x * x * x * x) / pot.lj_cut;
        out.energy += e_raw * env;
        double de = de_raw * env + e_raw * denv;
        Vec3 f = d * (de / r);  // force on i = -dE/dri = +de * dhat
        out.forces[i] += f;
        out.forces[j] -= f;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Integration

std::vector<Vec3> velocity_verlet_step(
    graph::AtomicSystem& system, const std::vector<Vec3>& forces, double dt,
    const std::function<std::vector<Vec3>(const graph::AtomicSystem&)>& force_fn) {
  check(dt > 0.0, "velocity_verlet_step: dt must be positive");
  const int n = system.size();
  check(int(forces.size()) == n, "velocity_verlet_step: forces size mismatch");
  check(int(system.velocities.size()) == n, "velocity_verlet_step: velocities required");
  check(int(system.masses.size()) == n, "velocity_verlet_step: masses required");
  for (int i = 0; i < n; ++i) {
    double a = kAccel / system.masses[i];
    system.velocities[i] += forces[i] * (0.5 * dt * a);
    system.positions[i] += system.velocities[i] * dt;
  }
  auto new_forces = force_fn(system);
  for (int i = 0; i < n; ++i) {
    double a = kAccel / system.masses[i];
    system.velocities[i] += new_forces[i] * (0.5 * dt * a);
  }
  return new_forces;
}

void init_velocities(graph::AtomicSystem& system, double temperature, std::uint64_t seed) {
  check(temperature >= 0.0, "init_velocities: temperature must be >= 0");
  check(!system.masses.empty(), "init_velocities: masses required");
  Rng rng(seed);
  system.velocities.assign(system.size(), Vec3{});
  for (int i = 0; i < system.size(); ++i) {
    double sigma = std::sqrt(kBoltzmann * temperature / system.masses[i] * kAccel);
    system.velocities[i] = {sigma * rng.normal(), sigma * rng.normal(), sigma * rng.normal()};
  }
}

// ---------------------------------------------------------------------------
// Model force field

EnergyForces ModelFF::eval(const graph::AtomicSystem& system) {
  const FeatVec* warm = nullptr;
  if (reuse_ && !carry_.empty()) warm = &carry_;
  auto r = deq::deq_forward(system, *params_, cfg_, warm);
  stats_ = r.stats;
  have_stats_ = true;
  carry_ = std::move(r.z_star);
  return {r.energy + shift_, std::move(r.forces)};
}

// ---------------------------------------------------------------------------
// Drivers

namespace {

xyz::Frame make_frame(const graph::AtomicSystem& system, const EnergyForces& ef, double dt,
                      long index) {
  xyz::Frame fr;
  fr.system = system;
  fr.energy = ef.energy;
  fr.forces = ef.forces;
  fr.dt = dt;
  fr.index = index;
  return fr;
}

FrameStats stats_of(const ForceField& ff) {
  FrameStats st;
  if (const deq::DeqStats* s = ff.last_stats()) {
    st.solver_steps = s->steps;
    st.residual = s->residual;
    st.wall_seconds = s->wall_seconds;
    st.reused = s->reuse_used;
  }
  return st;
}

}  // namespace

Trajectory run_md(ForceField& ff, graph::AtomicSystem system, int n_steps, double dt) {
  check(n_steps >= 0, "run_md: n_steps must be >= 0");
  system.validate();
  if (system.masses.empty())
    for (int z : system.atomic_numbers) system.masses.push_back(xyz::atomic_mass(z));
  if (system.velocities.empty()) system.velocities.assign(system.size(), Vec3{});

  Trajectory traj;
  EnergyForces ef;
  try {
    ef = ff.eval(system);
  } catch (const deq::SolverDivergence& e) {
    traj.truncated = true;
    traj.truncated_at = 0;
    traj.truncation_reason = e.what();
    return traj;
  }
  traj.frames.push_back(make_frame(system, ef, dt, 0));
  if (ff.last_stats()) traj.stats.push_back(stats_of(ff));

  auto force_fn = [&](const graph::AtomicSystem& s) {
    ef = ff.eval(s);
    return ef.forces;
  };
  std::vector<Vec3> forces = ef.forces;
  for (int step = 1; step <= n_steps; ++step) {
    try {
      forces = velocity_verlet_step(system, forces, dt, force_fn);
    } catch (const deq::SolverDivergence& e) {
      traj.truncated = true;
      traj.truncated_at = step;
      traj.truncation_reason = e.what();
      break;
    }
    traj.frames.push_back(make_frame(system, ef, dt, step));
    if (ff.last_stats()) traj.stats.push_back(stats_of(ff));
  }
  return traj;
}

RelaxResult relax(ForceField& ff, graph::AtomicSystem system, int n_steps, double step_size,
                  double f_max) {
  check(n_steps >= 0, "relax: n_steps must be >= 0");
  check(step_size > 0.0, "relax: step_size must be positive");
  check(f_max >= 0.0, "relax: f_max must be >= 0");
  system.validate();
  constexpr double kMaxMove = 0.2;  // A per atom per step

  RelaxResult out;
  auto t0 = std::chrono::steady_clock::now();
  double steps_sum = 0.0;
  long evals = 0;
  EnergyForces ef = ff.eval(system);
  if (ff.last_stats()) {
    steps_sum += ff.last_stats()->steps;
    ++evals;
  }
  out.energy_trace.push_back(ef.energy);
  for (int step = 0; step < n_steps; ++step) {
    double max_f = 0.0;
    for (const auto& f : ef.forces) max_f = std::max(max_f, f.norm());
    if (max_f < f_max) {
      out.reached_fmax = true;
      break;
    }
    for (int i = 0; i < system.size(); ++i) {
      Vec3 d = ef.forces[i] * step_size;
      double dn = d.norm();
      if (dn > kMaxMove) d = d * (kMaxMove / dn);
      system.positions[i] += d;
    }
    ef = ff.eval(system);
    if (ff.last_stats()) {
      steps_sum += ff.last_stats()->steps;
      ++evals;
    }
    out.energy_trace.push_back(ef.energy);
    out.steps_taken = step + 1;
  }
  auto t1 = std::chrono::steady_clock::now();
  out.system = std::move(system);
  out.final_energy = ef.energy;
  out.mean_solver_steps = evals ? steps_sum / double(evals) : 0.0;
  out.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  return out;
}

MarkovReport markov_deviation(const eqnet::ModelParams& params, const deq::SolverConfig& cfg,
                              const std::vector<xyz::Frame>& traj, double energy_shift) {
  check(!traj.empty(), "markov_deviation: empty trajectory");
  (void)energy_shift;
  MarkovReport rep;
  ModelFF cold(params, cfg, /*reuse=*/false);
  ModelFF warm(params, cfg, /*reuse=*/true);
  double steps_cold = 0.0, steps_warm = 0.0;
  for (const auto& fr : traj) {
    auto a = cold.eval(fr.system);
    auto b = warm.eval(fr.system);
    steps_cold += cold.last_stats()->steps;
    steps_warm += warm.last_stats()->steps;
    double acc = 0.0;
    long counted = 0;
    for (std::size_t i = 0; i < a.forces.size(); ++i) {
      double na = a.forces[i].norm(), nb = b.forces[i].norm();
      if (na < 1e-10 && nb < 1e-10) {
        rep.excluded_atoms++;
        continue;
      }
      acc += (b.forces[i] - a.forces[i]).norm() / (0.5 * (na + nb));
      ++counted;
    }
    rep.per_frame.push_back(counted ? acc / double(counted) : 0.0);
  }
  rep.dF_rel = std::accumulate(rep.per_frame.begin(), rep.per_frame.end(), 0.0) /
               double(rep.per_frame.size());
  rep.mean_steps_cold = steps_cold / double(traj.size());
  rep.mean_steps_reuse = steps_warm / double(traj.size());
  return rep;
}

Trajectory gen_dataset(const OraclePotential& pot, graph::AtomicSystem system0, int n_frames,
                       double dt, double temperature, std::uint64_t seed) {
  check(n_frames >= 1, "gen_dataset: n_frames must be >= 1");
  if (system0.masses.empty())
    for (int z : system0.atomic_numbers) system0.masses.push_back(xyz::atomic_mass(z));
  init_velocities(system0, temperature, seed);
  OracleFF ff(pot);
  return run_md(ff, std::move(system0), n_frames - 1, dt);
}

// ---------------------------------------------------------------------------
// Presets

Preset make_preset(const std::string& name) {
  Preset p;
  if (name == "ch4") {
    // tetrahedral methane-like toy
    const double r0 = 1.09;
    const double a = r0 / std::sqrt(3.0);
    p.system.atomic_numbers = {6, 1, 1, 1, 1};
    p.system.positions = {{0, 0, 0}, {a, a, a}, {a, -a, -a}, {-a, a, -a}, {-a, -a, a}};
    for (int h = 1; h <= 4; ++h) p.potential.bonds.push_back({0, h, r0, 20.0});
    p.potential.lj_epsilon = 0.08;
    p.potential.lj_sigma = 1.7;
    p.potential.lj_cut = 4.0;
  } else if (name == "h2o") {
    // bent water-like toy: O-H bonds plus H-H repulsion setting the angle
    const double r0 = 0.96;
    const double ang = 104.5 * M_PI / 180.0;
    p.system.atomic_numbers = {8, 1, 1};
    p.system.positions = {{0, 0, 0},
                          {r0 * std::sin(ang / 2), 0, r0 * std::cos(ang / 2)},
                          {-r0 * std::sin(ang / 2), 0, r0 * std::cos(ang / 2)}};
    p.potential.bonds.push_back({0, 1, r0, 30.0});
    p.potential.bonds.push_back({0, 2, r0, 30.0});
    p.potential.lj_epsilon = 0.06;
    p.potential.lj_sigma = 1.4;
    p.potential.lj_cut = 4.0;
  } else if (name == "chain4") {
    // 4-atom zigzag chain
    p.system.atomic_numbers = {6, 6, 6, 6};
    p.system.positions = {{0, 0, 0}, {1.4, 0.3, 0}, {2.8, -0.3, 0}, {4.2, 0.3, 0}};
    for (int i = 0; i < 3; ++i)
      p.potential.bonds.push_back({i, i + 1, 1.45, 18.0});
    p.potential.lj_epsilon = 0.05;
    p.potential.lj_sigma = 2.2;
    p.potential.lj_cut = 5.0;
  } else {
    throw std::invalid_argument("make_preset: unknown preset " + name);
  }
  for (int z : p.system.atomic_numbers) p.system.masses.push_back(xyz::atomic_mass(z));
  return p;
}

}  // namespace deqff::sim
