#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deqff/deq.hpp"
#include "deqff/xyz.hpp"

namespace deqff::sim {

// eV/(A*amu) expressed as A/fs^2, and Boltzmann's constant in eV/K
inline constexpr double kAccel = 9.64853321233e-3;
inline constexpr double kBoltzmann = 8.617333262e-5;

struct Bond {
  int i, j;
  double r0;  // rest length, A
  double k;   // stiffness, eV/A^2
};

// Harmonic bonds plus pairwise Lennard-Jones with a smooth cutoff; bonded
// pairs are excluded from the LJ sum. Forces are exact analytic gradients.
struct OraclePotential {
  std::vector<Bond> bonds;
  double lj_epsilon = 0.0;  // 0 disables LJ
  double lj_sigma = 1.0;
  double lj_cut = 5.0;

  void validate(int n_atoms) const;
};

struct EnergyForces {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

EnergyForces oracle_eval(const graph::AtomicSystem& system, const OraclePotential& pot);

// Abstract force provider for the MD/relaxation drivers.
class ForceField {
 public:
  virtual ~ForceField() = default;
  virtual EnergyForces eval(const graph::AtomicSystem& system) = 0;
  // solver stats of the last eval, when model-driven
  virtual const deq::DeqStats* last_stats() const { return nullptr; }
  virtual void reset_state() {}
};

class OracleFF : public ForceField {
 public:
  explicit OracleFF(OraclePotential pot) : pot_(std::move(pot)) {}
  EnergyForces eval(const graph::AtomicSystem& system) override {
    return oracle_eval(system, pot_);
  }

 private:
  OraclePotential pot_;
};

// Model-backed force field with optional fixed-point reuse across calls.
// The first call always solves from zero init at eps_train; with reuse
// enabled, later calls warm-start from the previous fixed point at
// eps_reuse. If the atom count changes the carried state is dropped.
class ModelFF : public ForceField {
 public:
  ModelFF(const eqnet::ModelParams& params, deq::SolverConfig cfg, bool reuse,
          double energy_shift = 0.0)
      : params_(&params), cfg_(cfg), reuse_(reuse), shift_(energy_shift) {}

  EnergyForces eval(const graph::AtomicSystem& system) override;
  const deq::DeqStats* last_stats() const override { return have_stats_ ? &stats_ : nullptr; }
  void reset_state() override { carry_ = FeatVec(); }

 private:
  const eqnet::ModelParams* params_;
  deq::SolverConfig cfg_;
  bool reuse_;
  double shift_;
  FeatVec carry_;
  deq::DeqStats stats_;
  bool have_stats_ = false;
};

struct FrameStats {
  int solver_steps = 0;
  double residual = 0.0;
  double wall_seconds = 0.0;
  bool reused = false;
};

struct Trajectory {
  std::vector<xyz::Frame> frames;
  std::vector<FrameStats> stats;  // empty unless model-driven
  bool truncated = false;
  int truncated_at = -1;
  std::string truncation_reason;
};

// One velocity-Verlet step; force_fn supplies forces at the new positions.
// Returns the forces at the updated positions for reuse by the caller.
std::vector<Vec3> velocity_verlet_step(graph::AtomicSystem& system,
                                       const std::vector<Vec3>& forces, double dt,
                                       const std::function<std::vector<Vec3>(
                                           const graph::AtomicSystem&)>& force_fn);

// seeded Maxwell-Boltzmann velocities at the given temperature (K)
void init_velocities(graph::AtomicSystem& system, double temperature, std::uint64_t seed);

// NVE run; frame 0 is the initial state. Solver divergence truncates the
// trajectory and records the frame index.
Trajectory run_md(ForceField& ff, graph::AtomicSystem system, int n_steps, double dt);

struct RelaxResult {
  graph::AtomicSystem system;
  int steps_taken = 0;
  bool reached_fmax = false;
  double final_energy = 0.0;
  double mean_solver_steps = 0.0;
  double wall_seconds = 0.0;
  std::vector<double> energy_trace;
};

// Clipped steepest descent on positions along the predicted forces
// (max displacement 0.2 A per atom per step), stopping early when the
// largest per-atom force norm drops below f_max.
RelaxResult relax(ForceField& ff, graph::AtomicSystem system, int n_steps, double step_size,
                  double f_max);

struct MarkovReport {
  double dF_rel = 0.0;               // mean over samples
  std::vector<double> per_frame;     // per-sample series
  long excluded_atoms = 0;           // near-zero denominators
  double mean_steps_cold = 0.0;
  double mean_steps_reuse = 0.0;
};

// Runs predictions along the trajectory twice (zero init at eps_train vs
// reuse at eps_reuse) and reports the relative force deviation.
MarkovReport markov_deviation(const eqnet::ModelParams& params, const deq::SolverConfig& cfg,
                              const std::vector<xyz::Frame>& traj, double energy_shift = 0.0);

// Oracle-driven NVE trajectory with exact labels.
Trajectory gen_dataset(const OraclePotential& pot, graph::AtomicSystem system0, int n_frames,
                       double dt, double temperature, std::uint64_t seed);

// Named toy systems with their oracle potentials.
struct Preset {
  graph::AtomicSystem system;
  OraclePotential potential;
};
Preset make_preset(const std::string& name);  // "ch4", "h2o", "chain4"

}  // namespace deqff::sim
