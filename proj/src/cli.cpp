#include "deqff/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "json.hpp"

#include "deqff/metrics.hpp"

namespace deqff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
}

std::vector<train::LabeledFrame> frames_to_dataset(const std::vector<xyz::Frame>& frames) {
  std::vector<train::LabeledFrame> out;
  out.reserve(frames.size());
  for (const auto& fr : frames) out.push_back({fr.system, fr.energy, fr.forces});
  return out;
}

std::string g17(double v) { return xyz::format_g17(v); }

}  // namespace

void cmd_gen_data(const GenDataArgs& a) {
  check(a.frames >= 1, "gen-data: --frames must be >= 1");
  auto preset = sim::make_preset(a.potential);
  auto traj = sim::gen_dataset(preset.potential, preset.system, a.frames, a.dt, a.temperature,
                               a.seed);
  if (traj.truncated)
    throw CheckError("gen-data: oracle trajectory truncated at frame " +
                     std::to_string(traj.truncated_at));
  fs::create_directories(a.out_dir);
  xyz::save_frames((fs::path(a.out_dir) / "traj.xyz").string(), traj.frames);

  json manifest;
  manifest["potential"] = a.potential;
  manifest["frames"] = a.frames;
  manifest["dt"] = a.dt;
  manifest["temperature"] = a.temperature;
  manifest["seed"] = a.seed;
  json bonds = json::array();
  for (const auto& b : preset.potential.bonds)
    bonds.push_back({{"i", b.i}, {"j", b.j}, {"r0", b.r0}, {"k", b.k}});
  manifest["oracle"] = {{"bonds", bonds},
                        {"lj_epsilon", preset.potential.lj_epsilon},
                        {"lj_sigma", preset.potential.lj_sigma},
                        {"lj_cut", preset.potential.lj_cut}};
  write_text((fs::path(a.out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

void cmd_train(const TrainArgs& a) {
  config::RunConfig cfg;
  if (!a.config_path.empty()) cfg = config::load_config(a.config_path);
  if (a.seed != ~0ULL) cfg.train.seed = a.seed;
  auto frames = xyz::load_frames(a.data_path);
  check(!frames.empty(), "train: no frames in " + a.data_path);
  auto dataset = frames_to_dataset(frames);

  auto result = train::train_loop(dataset, cfg.model, cfg.solver, cfg.train);
  fs::create_directories(a.out_dir);
  train::save_checkpoint((fs::path(a.out_dir) / "checkpoint.deqf").string(), result.checkpoint);
  write_text((fs::path(a.out_dir) / "metrics.csv").string(), train::metrics_csv(result.metrics));
}

EvalSummary cmd_eval(const EvalArgs& a) {
  auto ck = train::load_checkpoint(a.checkpoint);
  auto frames = xyz::load_frames(a.data_path);
  check(!frames.empty(), "eval: no frames in " + a.data_path);
  if (a.max_samples > 0 && int(frames.size()) > a.max_samples) frames.resize(a.max_samples);

  // warm up the timing path on the first frame
  for (int i = 0; i < 10; ++i) deq::deq_forward(frames[0].system, ck.params, ck.solver);

  struct Row {
    double f_comp, f_norm, e_err, wall;
    int steps;
  };
  std::vector<Row> rows(frames.size());
  const int threads = default_threads();
  parallel_for(frames.size(), threads, [&](std::size_t i) {
    auto r = deq::deq_forward(frames[i].system, ck.params, ck.solver);
    auto fm = metrics::force_mae(r.forces, frames[i].forces);
    rows[i] = {fm.per_component, fm.per_atom_norm,
               std::abs(r.energy + ck.energy_shift - frames[i].energy), r.stats.wall_seconds,
               r.stats.steps};
  });

  EvalSummary s;
  s.n_samples = long(rows.size());
  std::vector<int> steps;
  for (const auto& r : rows) {
    s.force_mae_component += r.f_comp;
    s.force_mae_atom_norm += r.f_norm;
    s.energy_mae += r.e_err;
    s.mean_wall_seconds += r.wall;
    steps.push_back(r.steps);
  }
  s.force_mae_component /= double(rows.size());
  s.force_mae_atom_norm /= double(rows.size());
  s.energy_mae /= double(rows.size());
  s.mean_wall_seconds /= double(rows.size());
  auto hist = metrics::step_histogram(steps);
  s.mean_steps = hist.mean;
  s.median_steps = hist.median;

  if (!a.report_path.empty()) {
    std::ostringstream os;
    os << "# deqff eval report\n";
    os << "# force_mae_component=" << g17(s.force_mae_component)
       << " force_mae_atom_norm=" << g17(s.force_mae_atom_norm)
       << " energy_mae=" << g17(s.energy_mae) << "\n";
    os << "# mean_steps=" << g17(s.mean_steps) << " median_steps=" << g17(s.median_steps)
       << " mean_wall_seconds=" << g17(s.mean_wall_seconds) << "\n";
    os << "sample,force_mae_component,force_mae_atom_norm,energy_abs_err,steps\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
      os << i << "," << g17(rows[i].f_comp) << "," << g17(rows[i].f_norm) << ","
         << g17(rows[i].e_err) << "," << rows[i].steps << "\n";
    write_text(a.report_path, os.str());
  }
  return s;
}

void cmd_md(const MdArgs& a) {
  auto ck = train::load_checkpoint(a.checkpoint);
  if (a.eps_reuse > 0.0) ck.solver.eps_reuse = a.eps_reuse;
  auto frames = xyz::load_frames(a.init_path);
  check(!frames.empty(), "md: no frames in " + a.init_path);
  auto system = frames[0].system;
  if (system.masses.empty())
    for (int z : system.atomic_numbers) system.masses.push_back(xyz::atomic_mass(z));
  if (a.temperature >= 0.0) sim::init_velocities(system, a.temperature, a.seed);

  sim::ModelFF ff(ck.params, ck.solver, a.reuse, ck.energy_shift);
  auto traj = sim::run_md(ff, system, a.steps, a.dt);
  if (!a.out_traj.empty()) xyz::save_frames(a.out_traj, traj.frames);
  if (!a.out_stats.empty()) {
    std::ostringstream os;
    os << "# deqff md per-frame solver stats\n";
    if (traj.truncated)
      os << "# truncated_at=" << traj.truncated_at << " reason=" << traj.truncation_reason
         << "\n";
    os << "frame,steps,residual,reused\n";
    for (std::size_t i = 0; i < traj.stats.size(); ++i)
      os << i << "," << traj.stats[i].solver_steps << "," << g17(traj.stats[i].residual) << ","
         << (traj.stats[i].reused ? 1 : 0) << "\n";
    write_text(a.out_stats, os.str());
  }
  if (traj.truncated)
    throw CheckError("md: trajectory truncated at frame " + std::to_string(traj.truncated_at) +
                     ": " + traj.truncation_reason);
}

std::vector<RelaxAblationRow> cmd_relax(const RelaxArgs& a) {
  auto ck = train::load_checkpoint(a.checkpoint);
  auto frames = xyz::load_frames(a.init_path);
  check(!frames.empty(), "relax: no frames in " + a.init_path);
  auto base = frames[0].system;
  if (base.masses.empty())
    for (int z : base.atomic_numbers) base.masses.push_back(xyz::atomic_mass(z));
  base.velocities.clear();

  std::vector<RelaxAblationRow> rows;
  if (!a.ablation) {
    sim::ModelFF ff(ck.params, ck.solver, true, ck.energy_shift);
    auto r = sim::relax(ff, base, a.steps, a.step_size, a.f_max);
    if (!a.out_path.empty()) {
      xyz::Frame fr;
      fr.system = r.system;
      fr.energy = r.final_energy;
      fr.forces.assign(r.system.size(), Vec3{});
      xyz::save_frames(a.out_path, {fr});
    }
    rows.push_back({"yes", g17(ck.solver.eps_reuse), r.mean_solver_steps, r.wall_seconds,
                    r.final_energy});
    return rows;
  }

  // three-way ablation: no reuse / reuse at eps_train / reuse at eps_reuse,
  // averaged over seeded perturbed copies of the initial system
  std::vector<graph::AtomicSystem> systems;
  Rng rng(a.seed);
  for (int i = 0; i < std::max(1, a.n_systems); ++i) {
    auto s = base;
    for (auto& p : s.positions)
      p += Vec3{a.perturb * rng.normal(), a.perturb * rng.normal(), a.perturb * rng.normal()};
    systems.push_back(std::move(s));
  }

  struct Variant {
    const char* reuse_label;
    const char* eps_label;
    bool reuse;
    bool relaxed_eps;
  };
  deq::SolverConfig tight = ck.solver;
  tight.eps_reuse = tight.eps_train;  // reuse without the relaxed threshold
  const Variant variants[3] = {{"no", "-", false, false},
                               {"yes", "-", true, false},
                               {"yes", g17(ck.solver.eps_reuse).c_str(), true, true}};
  std::string relaxed_eps_str = g17(ck.solver.eps_reuse);
  for (int vi = 0; vi < 3; ++vi) {
    const auto& var = variants[vi];
    double steps_sum = 0.0, wall_sum = 0.0, energy_sum = 0.0;
    for (const auto& s : systems) {
      sim::ModelFF ff(ck.params, var.relaxed_eps ? ck.solver : tight, var.reuse,
                      ck.energy_shift);
      auto r = sim::relax(ff, s, a.steps, a.step_size, a.f_max);
      steps_sum += r.mean_solver_steps;
      wall_sum += r.wall_seconds;
      energy_sum += r.final_energy;
    }
    const double n = double(systems.size());
    rows.push_back({var.reuse_label, vi == 2 ? relaxed_eps_str : var.eps_label, steps_sum / n,
                    wall_sum / n, energy_sum / n});
  }

  if (!a.out_path.empty()) {
    std::ostringstream os;
    os << "# deqff relax ablation (" << systems.size() << " systems x " << a.steps
       << " steps)\n";
    os << "FP reuse,eps_FPreuse_test,# Solver steps,Time [s],final_energy\n";
    for (const auto& r : rows)
      os << r.fp_reuse << "," << r.eps_reuse << "," << g17(r.mean_solver_steps) << ","
         << g17(r.wall_seconds) << "," << g17(r.final_energy) << "\n";
    write_text(a.out_path, os.str());
  }
  return rows;
}

sim::MarkovReport cmd_bench_fpreuse(const BenchFpreuseArgs& a) {
  auto ck = train::load_checkpoint(a.checkpoint);
  auto frames = xyz::load_frames(a.traj_path);
  check(!frames.empty(), "bench-fpreuse: no frames in " + a.traj_path);
  if (a.max_frames > 0 && int(frames.size()) > a.max_frames) frames.resize(a.max_frames);

  auto rep = sim::markov_deviation(ck.params, ck.solver, frames, ck.energy_shift);

  // paired step histograms need the raw per-frame counts
  std::vector<int> steps_cold, steps_warm;
  {
    sim::ModelFF cold(ck.params, ck.solver, false, ck.energy_shift);
    sim::ModelFF warm(ck.params, ck.solver, true, ck.energy_shift);
    for (const auto& fr : frames) {
      cold.eval(fr.system);
      warm.eval(fr.system);
      steps_cold.push_back(cold.last_stats()->steps);
      steps_warm.push_back(warm.last_stats()->steps);
    }
  }
  auto hc = metrics::step_histogram(steps_cold);
  auto hw = metrics::step_histogram(steps_warm);

  if (!a.out_hist.empty()) {
    std::ostringstream os;
    os << "# deqff bench-fpreuse step histograms\n";
    os << "# mean_no_reuse=" << g17(hc.mean) << " median_no_reuse=" << g17(hc.median)
       << " mean_reuse=" << g17(hw.mean) << " median_reuse=" << g17(hw.median) << "\n";
    os << "steps,percent_no_reuse,percent_reuse\n";
    std::set<int> keys;
    for (auto& [k, v] : hc.percent) keys.insert(k);
    for (auto& [k, v] : hw.percent) keys.insert(k);
    for (int k : keys) {
      double a1 = hc.percent.count(k) ? hc.percent.at(k) : 0.0;
      double b1 = hw.percent.count(k) ? hw.percent.at(k) : 0.0;
      os << k << "," << g17(a1) << "," << g17(b1) << "\n";
    }
    write_text(a.out_hist, os.str());
  }
  if (!a.out_dfrel.empty()) {
    std::ostringstream os;
    os << "# deqff bench-fpreuse relative force deviation\n";
    os << "# dF_rel=" << g17(rep.dF_rel) << " excluded_atoms=" << rep.excluded_atoms << "\n";
    os << "frame,dF_rel\n";
    for (std::size_t i = 0; i < rep.per_frame.size(); ++i)
      os << i << "," << g17(rep.per_frame[i]) << "\n";
    write_text(a.out_dfrel, os.str());
  }
  return rep;
}

std::vector<SweepRow> cmd_sweep_tol(const SweepTolArgs& a) {
  auto ck = train::load_checkpoint(a.checkpoint);
  auto frames = xyz::load_frames(a.data_path);
  check(!frames.empty(), "sweep-tol: no frames in " + a.data_path);
  if (a.max_samples > 0 && int(frames.size()) > a.max_samples) frames.resize(a.max_samples);
  check(!a.tolerances.empty(), "sweep-tol: no tolerances given");

  // warm up timing
  for (int i = 0; i < 10; ++i) deq::deq_forward(frames[0].system, ck.params, ck.solver);

  std::vector<SweepRow> rows;
  for (double tol : a.tolerances) {
    deq::SolverConfig cfg = ck.solver;
    cfg.eps_train = tol;
    cfg.eps_reuse = std::max(tol, cfg.eps_reuse);
    double fsum = 0.0, tsum = 0.0, ssum = 0.0;
    for (const auto& fr : frames) {
      auto r = deq::deq_forward(fr.system, ck.params, cfg);
      fsum += metrics::force_mae(r.forces, fr.forces).per_component;
      tsum += r.stats.wall_seconds;
      ssum += r.stats.steps;
    }
    rows.push_back({tol, fsum / double(frames.size()), tsum / double(frames.size()),
                    ssum / double(frames.size())});
  }
  if (!a.out_path.empty()) {
    std::ostringstream os;
    os << "# deqff sweep-tol over " << frames.size() << " samples\n";
    os << "tolerance,force_mae,mean_time_s,mean_steps\n";
    for (const auto& r : rows)
      os << g17(r.tolerance) << "," << g17(r.force_mae) << "," << g17(r.mean_time_s) << ","
         << g17(r.mean_steps) << "\n";
    write_text(a.out_path, os.str());
  }
  return rows;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, char** argv) {
  CLI::App app{"deqff: deep-equilibrium equivariant force field"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate an oracle-labeled trajectory");
  gen->add_option("--potential", gd.potential, "preset name (ch4, h2o, chain4)");
  gen->add_option("--frames", gd.frames, "number of frames")->required();
  gen->add_option("--dt", gd.dt, "timestep in fs");
  gen->add_option("--temp", gd.temperature, "temperature in K");
  gen->add_option("--seed", gd.seed, "RNG seed");
  gen->add_option("--out", gd.out_dir, "output directory")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model on a labeled trajectory");
  tr->add_option("--config", ta.config_path, "config file (dotted keys)");
  tr->add_option("--data", ta.data_path, "training trajectory (extended XYZ)")->required();
  tr->add_option("--out", ta.out_dir, "output directory")->required();
  tr->add_option("--seed", ta.seed, "override the config seed");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on labeled data");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--data", ea.data_path)->required();
  ev->add_option("--report", ea.report_path, "per-sample report CSV")->required();
  ev->add_option("--max-samples", ea.max_samples);

  MdArgs ma;
  auto* md = app.add_subcommand("md", "run model-driven molecular dynamics");
  md->add_option("--checkpoint", ma.checkpoint)->required();
  md->add_option("--init", ma.init_path, "initial frame (extended XYZ)")->required();
  md->add_option("--steps", ma.steps)->required();
  md->add_option("--dt", ma.dt);
  md->add_option("--reuse", [&ma](const std::vector<std::string>& v) {
      if (v.empty()) return false;
      if (v[0] == "on") ma.reuse = true;
      else if (v[0] == "off") ma.reuse = false;
      else return false;
      return true;
    }, "fixed-point reuse: on|off")->type_name("on|off");
  md->add_option("--eps-reuse", ma.eps_reuse, "override the relaxed tolerance");
  md->add_option("--temp", ma.temperature, "resample velocities at this temperature");
  md->add_option("--seed", ma.seed);
  md->add_option("--out-traj", ma.out_traj);
  md->add_option("--out-stats", ma.out_stats);

  RelaxArgs ra;
  auto* rx = app.add_subcommand("relax", "structure relaxation along predicted forces");
  rx->add_option("--checkpoint", ra.checkpoint)->required();
  rx->add_option("--init", ra.init_path)->required();
  rx->add_option("--steps", ra.steps);
  rx->add_option("--step-size", ra.step_size);
  rx->add_option("--fmax", ra.f_max);
  rx->add_flag("--ablation", ra.ablation, "emit the three-row reuse ablation table");
  rx->add_option("--systems", ra.n_systems, "perturbed copies for the ablation");
  rx->add_option("--perturb", ra.perturb, "perturbation scale in A");
  rx->add_option("--seed", ra.seed);
  rx->add_option("--out", ra.out_path)->required();

  BenchFpreuseArgs ba;
  auto* bf = app.add_subcommand("bench-fpreuse", "paired reuse/no-reuse solver statistics");
  bf->add_option("--checkpoint", ba.checkpoint)->required();
  bf->add_option("--traj", ba.traj_path)->required();
  bf->add_option("--max-frames", ba.max_frames);
  bf->add_option("--out-hist", ba.out_hist)->required();
  bf->add_option("--out-dfrel", ba.out_dfrel)->required();

  SweepTolArgs sa;
  std::string tols_str;
  auto* sw = app.add_subcommand("sweep-tol", "tolerance/accuracy/time sweep");
  sw->add_option("--checkpoint", sa.checkpoint)->required();
  sw->add_option("--data", sa.data_path)->required();
  sw->add_option("--tols", tols_str, "comma-separated tolerances");
  sw->add_option("--max-samples", sa.max_samples);
  sw->add_option("--out", sa.out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) cmd_gen_data(gd);
    if (*tr) cmd_train(ta);
    if (*ev) cmd_eval(ea);
    if (*md) cmd_md(ma);
    if (*rx) cmd_relax(ra);
    if (*bf) cmd_bench_fpreuse(ba);
    if (*sw) {
      if (!tols_str.empty()) {
        sa.tolerances.clear();
        std::istringstream is(tols_str);
        std::string tok;
        while (std::getline(is, tok, ',')) sa.tolerances.push_back(std::stod(tok));
      }
      cmd_sweep_tol(sa);
    }
  } catch (const std::exception& e) {
    std::cerr << "deqff: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace deqff::cli
