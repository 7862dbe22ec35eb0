#include "deqff/sim.hpp"

#include <cmath>
#include <numeric>

#include "doctest.h"

using namespace deqff;
using namespace deqff::sim;

namespace {

graph::AtomicSystem two_atoms(double dist) {
  graph::AtomicSystem s;
  s.atomic_numbers = {1, 1};
  s.positions = {{0, 0, 0}, {dist, 0, 0}};
  s.masses = {1.008, 1.008};
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("sim");

TEST_CASE("oracle: atoms at rest lengths with LJ disabled give zero energy and forces") {
  auto s = two_atoms(1.2);
  OraclePotential pot;
  pot.bonds.push_back({0, 1, 1.2, 10.0});
  auto ef = oracle_eval(s, pot);
  CHECK(ef.energy == doctest::Approx(0.0).epsilon(1e-15));
  for (const auto& f : ef.forces) CHECK(f.norm() < 1e-14);
}

TEST_CASE("oracle: stretched bond gives the Hooke restoring force") {
  double delta = 0.15;
  auto s = two_atoms(1.2 + delta);
  OraclePotential pot;
  pot.bonds.push_back({0, 1, 1.2, 10.0});
  auto ef = oracle_eval(s, pot);
  CHECK(ef.energy == doctest::Approx(0.5 * 10.0 * delta * delta).epsilon(1e-12));
  // atom 0 pulled toward +x, atom 1 toward -x, magnitude k*delta
  CHECK(ef.forces[0].x == doctest::Approx(10.0 * delta).epsilon(1e-12));
  CHECK(ef.forces[1].x == doctest::Approx(-10.0 * delta).epsilon(1e-12));
  CHECK(std::abs(ef.forces[0].y) < 1e-14);
}

TEST_CASE("oracle: forces equal the negative finite-difference energy gradient") {
  auto preset = make_preset("ch4");
  Rng rng(1);
  for (auto& p : preset.system.positions)
    p += Vec3{0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal()};
  auto ef = oracle_eval(preset.system, preset.potential);
  const double h = 1e-6;
  double max_err = 0.0;
  for (int i = 0; i < preset.system.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      auto sp = preset.system, sm = preset.system;
      sp.positions[i][c] += h;
      sm.positions[i][c] -= h;
      double fd = -(oracle_eval(sp, preset.potential).energy -
                    oracle_eval(sm, preset.potential).energy) /
                  (2 * h);
      max_err = std::max(max_err, std::abs(fd - ef.forces[i][c]));
    }
  }
  CHECK(max_err < 1e-7);
}

TEST_CASE("oracle: rotation, translation and permutation symmetry") {
  auto preset = make_preset("h2o");
  Rng rng(2);
  auto& s = preset.system;
  for (auto& p : s.positions) p += Vec3{0.05 * rng.normal(), 0.05 * rng.normal(), 0.05 * rng.normal()};
  auto ef = oracle_eval(s, preset.potential);

  auto R = irreps::Rotation::random(rng);
  Vec3 t{1.0, -2.0, 0.5};
  auto s2 = s;
  for (auto& p : s2.positions) p = R.apply(p) + t;
  auto ef2 = oracle_eval(s2, preset.potential);
  CHECK(ef2.energy == doctest::Approx(ef.energy).epsilon(1e-12));
  for (int i = 0; i < s.size(); ++i)
    CHECK((ef2.forces[i] - R.apply(ef.forces[i])).norm() < 1e-12 * (1 + ef.forces[i].norm()));

  // permuting the two H atoms permutes their forces
  auto s3 = s;
  std::swap(s3.positions[1], s3.positions[2]);
  OraclePotential pot3 = preset.potential;  // bonds 0-1, 0-2 are symmetric
  auto ef3 = oracle_eval(s3, pot3);
  CHECK(ef3.energy == doctest::Approx(ef.energy).epsilon(1e-12));
  CHECK((ef3.forces[1] - ef.forces[2]).norm() < 1e-12);
  CHECK((ef3.forces[2] - ef.forces[1]).norm() < 1e-12);
}

TEST_CASE("velocity verlet: zero forces give uniform linear motion") {
  auto s = two_atoms(3.0);
  s.velocities = {{0.01, 0.02, -0.01}, {-0.01, 0.0, 0.01}};
  auto zero_f = [](const graph::AtomicSystem& sys) {
    return std::vector<Vec3>(sys.size(), Vec3{});
  };
  std::vector<Vec3> f(2, Vec3{});
  auto x0 = s.positions;
  auto v0 = s.velocities;
  for (int i = 0; i < 10; ++i) f = velocity_verlet_step(s, f, 0.5, zero_f);
  for (int i = 0; i < 2; ++i) {
    Vec3 want = x0[i] + v0[i] * 5.0;
    CHECK((s.positions[i] - want).norm() < 1e-12);
    CHECK((s.velocities[i] - v0[i]).norm() < 1e-15);
  }
}

TEST_CASE("velocity verlet: harmonic oscillator period matches 2*pi*sqrt(m/k)") {
  // two equal masses on one bond: reduced mass m/2
  const double k = 5.0, m = 1.008, r0 = 1.2, amp = 0.1;
  auto s = two_atoms(r0 + amp);
  s.velocities = {{0, 0, 0}, {0, 0, 0}};
  OraclePotential pot;
  pot.bonds.push_back({0, 1, r0, k});
  OracleFF ff(pot);
  auto force_fn = [&](const graph::AtomicSystem& sys) { return ff.eval(sys).forces; };

  const double mu = m / 2.0;
  const double period = 2.0 * M_PI * std::sqrt(mu / (k * kAccel));
  const double dt = period / 1000.0;
  auto f = ff.eval(s).forces;
  // integrate ten periods, track the bond-length maxima crossings
  double prev_sep = (s.positions[1] - s.positions[0]).norm();
  int crossings = 0;
  double first_cross = 0.0, last_cross = 0.0;
  double prev_delta = prev_sep - r0;
  for (long step = 1; step <= long(10.5 * period / dt); ++step) {
    f = velocity_verlet_step(s, f, dt, force_fn);
    double delta = (s.positions[1] - s.positions[0]).norm() - r0;
    if (prev_delta < 0 && delta >= 0) {  // upward zero crossing
      double frac = prev_delta / (prev_delta - delta);
      double t = (double(step) - 1.0 + frac) * dt;
      if (crossings == 0) first_cross = t;
      last_cross = t;
      ++crossings;
    }
    prev_delta = delta;
  }
  REQUIRE(crossings >= 10);
  double measured = (last_cross - first_cross) / double(crossings - 1);
  CHECK(std::abs(measured - period) / period < 1e-3);
}

TEST_CASE("velocity verlet: NVE energy drift stays below 1e-3 over 1e4 steps") {
  auto preset = make_preset("h2o");
  auto system = preset.system;
  init_velocities(system, 250.0, 42);
  OracleFF ff(preset.potential);
  auto force_fn = [&](const graph::AtomicSystem& sys) { return ff.eval(sys).forces; };

  auto total_energy = [&](const graph::AtomicSystem& sys) {
    double e = oracle_eval(sys, preset.potential).energy;
    for (int i = 0; i < sys.size(); ++i)
      e += 0.5 * sys.masses[i] * sys.velocities[i].dot(sys.velocities[i]) / kAccel;
    return e;
  };
  const double dt = 0.2;
  double e0 = total_energy(system);
  auto f = ff.eval(system).forces;
  double max_dev = 0.0;
  for (int step = 0; step < 10000; ++step) {
    f = velocity_verlet_step(system, f, dt, force_fn);
    max_dev = std::max(max_dev, std::abs(total_energy(system) - e0));
  }
  double scale = std::abs(e0) > 0.01 ? std::abs(e0) : 0.01;
  CHECK(max_dev / scale < 1e-3);
}

TEST_CASE("velocity verlet: reversing velocities returns to the start") {
  auto preset = make_preset("ch4");
  auto system = preset.system;
  init_velocities(system, 300.0, 7);
  OracleFF ff(preset.potential);
  auto force_fn = [&](const graph::AtomicSystem& sys) { return ff.eval(sys).forces; };
  auto x0 = system.positions;
  auto f = ff.eval(system).forces;
  const double dt = 0.25;
  for (int i = 0; i < 100; ++i) f = velocity_verlet_step(system, f, dt, force_fn);
  for (auto& v : system.velocities) v = v * -1.0;
  f = ff.eval(system).forces;
  for (int i = 0; i < 100; ++i) f = velocity_verlet_step(system, f, dt, force_fn);
  for (int i = 0; i < system.size(); ++i) CHECK((system.positions[i] - x0[i]).norm() < 1e-6);
}

TEST_CASE("run_md: zero steps returns only the initial frame") {
  auto preset = make_preset("h2o");
  OracleFF ff(preset.potential);
  auto traj = run_md(ff, preset.system, 0, 0.5);
  CHECK(traj.frames.size() == 1);
  CHECK_FALSE(traj.truncated);
}

TEST_CASE("run_md: model-driven reuse at a tight tolerance matches no-reuse") {
  auto preset = make_preset("h2o");
  auto system = preset.system;
  init_velocities(system, 150.0, 3);

  eqnet::ModelConfig mc;
  mc.l_max = 1;
  mc.channels = 3;
  mc.n_layers = 1;
  mc.d_att = mc.d_rad = mc.d_head = 4;
  mc.num_basis = 4;
  mc.r_cut = 4.0;
  auto P = eqnet::ModelParams::make(mc);
  Rng rng(9);
  P.init(rng, 2.0);

  deq::SolverConfig sc;
  sc.eps_train = 1e-8;
  sc.eps_reuse = 1e-8;  // tight on purpose
  sc.max_steps = 200;

  ModelFF cold(P, sc, false);
  ModelFF warm(P, sc, true);
  auto t1 = run_md(cold, system, 30, 0.1);
  auto t2 = run_md(warm, system, 30, 0.1);
  REQUIRE(t1.frames.size() == t2.frames.size());
  for (std::size_t fr = 0; fr < t1.frames.size(); ++fr) {
    for (int i = 0; i < 3; ++i) {
      double fn = t1.frames[fr].forces[i].norm();
      double dev = (t1.frames[fr].forces[i] - t2.frames[fr].forces[i]).norm();
      CHECK(dev <= 1e-6 * (1.0 + fn));
    }
  }
}

TEST_CASE("relax: oracle forces at the minimum move nothing") {
  auto preset = make_preset("ch4");
  // ch4 preset rest geometry is the bond minimum; relax with a tight fmax
  OracleFF ff(preset.potential);
  auto ef0 = oracle_eval(preset.system, preset.potential);
  double fmax0 = 0.0;
  for (auto& f : ef0.forces) fmax0 = std::max(fmax0, f.norm());
  auto r = relax(ff, preset.system, 50, 0.05, fmax0 + 1e-9);
  CHECK(r.steps_taken == 0);
  CHECK(r.reached_fmax);
  for (int i = 0; i < preset.system.size(); ++i)
    CHECK((r.system.positions[i] - preset.system.positions[i]).norm() == 0.0);
}

TEST_CASE("relax: monotone energy decrease in a quadratic basin") {
  auto preset = make_preset("ch4");
  Rng rng(5);
  auto system = preset.system;
  for (auto& p : system.positions)
    p += Vec3{0.12 * rng.normal(), 0.12 * rng.normal(), 0.12 * rng.normal()};
  OracleFF ff(preset.potential);
  auto r = relax(ff, system, 200, 0.01, 1e-3);
  REQUIRE(r.energy_trace.size() >= 3);
  for (std::size_t i = 1; i < r.energy_trace.size(); ++i)
    CHECK(r.energy_trace[i] <= r.energy_trace[i - 1] + 1e-12);
  CHECK(r.reached_fmax);
  CHECK(r.final_energy < r.energy_trace.front());
}

TEST_CASE("markov deviation: identical tolerances give near-zero deviation") {
  auto preset = make_preset("h2o");
  auto traj = gen_dataset(preset.potential, preset.system, 10, 0.3, 150.0, 21);
  REQUIRE_FALSE(traj.truncated);

  eqnet::ModelConfig mc;
  mc.l_max = 1;
  mc.channels = 3;
  mc.n_layers = 1;
  mc.d_att = mc.d_rad = mc.d_head = 4;
  mc.num_basis = 4;
  mc.r_cut = 4.0;
  auto P = eqnet::ModelParams::make(mc);
  Rng rng(6);
  P.init(rng, 2.0);
  deq::SolverConfig sc;
  sc.eps_train = 1e-10;
  sc.eps_reuse = 1e-10;
  sc.max_steps = 300;
  auto rep = markov_deviation(P, sc, traj.frames);
  CHECK(rep.dF_rel < 1e-7);
  CHECK(rep.per_frame.size() == traj.frames.size());
}

TEST_CASE("gen_dataset: deterministic from the seed, xyz round-trips bit-exact") {
  auto preset = make_preset("chain4");
  auto t1 = gen_dataset(preset.potential, preset.system, 5, 0.4, 200.0, 77);
  auto t2 = gen_dataset(preset.potential, preset.system, 5, 0.4, 200.0, 77);
  auto s1 = xyz::write_frames(t1.frames);
  auto s2 = xyz::write_frames(t2.frames);
  CHECK(s1 == s2);

  auto parsed = xyz::parse_frames(s1);
  REQUIRE(parsed.size() == t1.frames.size());
  CHECK(xyz::write_frames(parsed) == s1);  // bit-identical re-emission
  // values survive exactly
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    CHECK(parsed[i].energy == t1.frames[i].energy);
    for (int j = 0; j < parsed[i].system.size(); ++j) {
      CHECK(parsed[i].system.positions[j].x == t1.frames[i].system.positions[j].x);
      CHECK(parsed[i].forces[j].z == t1.frames[i].forces[j].z);
      CHECK(parsed[i].system.velocities[j].y == t1.frames[i].system.velocities[j].y);
    }
  }
}

TEST_CASE("xyz: malformed input is rejected with a line number") {
  CHECK_THROWS(xyz::parse_frames("2\nframe=0\nH 0 0 0 0 0 0\n"));  // truncated
  CHECK_THROWS(xyz::parse_frames("1\nframe=0\nQq 0 0 0 0 0 0\n"));  // unknown element
  CHECK_THROWS(xyz::parse_frames("1\nframe=0\nH 0 0 0\n"));         // missing forces
}

TEST_SUITE_END();
