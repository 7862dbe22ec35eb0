#pragma once

#include <string>
#include <vector>

#include "deqff/config.hpp"
#include "deqff/sim.hpp"

namespace deqff::cli {

// Command implementations, callable in-process (the binary is a thin shim).
// Each writes its outputs under the given paths and throws on error.

struct GenDataArgs {
  std::string potential = "ch4";
  int frames = 1000;
  double dt = 0.5;
  double temperature = 300.0;
  std::uint64_t seed = 0;
  std::string out_dir;
};
void cmd_gen_data(const GenDataArgs& a);

struct TrainArgs {
  std::string config_path;  // optional
  std::string data_path;    // extended-XYZ trajectory
  std::string out_dir;
  std::uint64_t seed = ~0ULL;  // overrides config when set
};
void cmd_train(const TrainArgs& a);

struct EvalArgs {
  std::string checkpoint;
  std::string data_path;
  std::string report_path;
  int max_samples = 0;  // 0 = all
};
struct EvalSummary {
  double force_mae_component = 0.0;
  double force_mae_atom_norm = 0.0;
  double energy_mae = 0.0;
  double mean_steps = 0.0;
  double median_steps = 0.0;
  double mean_wall_seconds = 0.0;
  long n_samples = 0;
};
EvalSummary cmd_eval(const EvalArgs& a);

struct MdArgs {
  std::string checkpoint;
  std::string init_path;  // xyz; frame 0 used
  int steps = 100;
  double dt = 0.5;
  bool reuse = true;
  double eps_reuse = -1.0;  // <0 keeps checkpoint value
  double temperature = -1.0;  // <0 keeps velocities from file (or zero)
  std::uint64_t seed = 0;
  std::string out_traj;
  std::string out_stats;
};
void cmd_md(const MdArgs& a);

struct RelaxArgs {
  std::string checkpoint;
  std::string init_path;
  int steps = 100;
  double step_size = 0.01;  // A per (eV/A)
  double f_max = 1e-3;
  bool ablation = false;
  int n_systems = 1;        // ablation perturbs this many copies
  double perturb = 0.15;    // A, seeded perturbation for ablation copies
  std::uint64_t seed = 0;
  std::string out_path;     // table CSV (ablation) or relaxed xyz
};
struct RelaxAblationRow {
  std::string fp_reuse;  // "no" / "yes"
  std::string eps_reuse; // "-" or value
  double mean_solver_steps = 0.0;
  double wall_seconds = 0.0;
  double final_energy = 0.0;
};
std::vector<RelaxAblationRow> cmd_relax(const RelaxArgs& a);

struct BenchFpreuseArgs {
  std::string checkpoint;
  std::string traj_path;
  int max_frames = 0;  // 0 = all
  std::string out_hist;
  std::string out_dfrel;
};
sim::MarkovReport cmd_bench_fpreuse(const BenchFpreuseArgs& a);

struct SweepTolArgs {
  std::string checkpoint;
  std::string data_path;
  std::vector<double> tolerances = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  int max_samples = 0;
  std::string out_path;
};
struct SweepRow {
  double tolerance;
  double force_mae;
  double mean_time_s;
  double mean_steps;
};
std::vector<SweepRow> cmd_sweep_tol(const SweepTolArgs& a);

int run_cli(int argc, char** argv);

}  // namespace deqff::cli
