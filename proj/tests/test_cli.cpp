#include "deqff/cli.hpp"

#include <filesystem>
#include <fstream>

#include "doctest.h"

using namespace deqff;
using namespace deqff::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path workdir() {
  auto p = fs::temp_directory_path() / "deqff_cli_test";
  fs::create_directories(p);
  return p;
}

// strip '#' comment lines so byte comparisons cover only the body
std::string body_of(const std::string& csv) {
  std::istringstream is(csv);
  std::ostringstream os;
  std::string line;
  while (std::getline(is, line))
    if (line.empty() || line[0] != '#') os << line << "\n";
  return os.str();
}

struct Pipeline {
  fs::path dir;
  std::string data, ckpt;
  Pipeline() {
    dir = workdir();
    GenDataArgs gd;
    gd.potential = "h2o";
    gd.frames = 30;
    gd.dt = 0.4;
    gd.temperature = 200.0;
    gd.seed = 31;
    gd.out_dir = (dir / "data").string();
    cmd_gen_data(gd);
    data = (dir / "data" / "traj.xyz").string();

    config::RunConfig cfg;
    cfg.model.l_max = 1;
    cfg.model.channels = 3;
    cfg.model.n_layers = 1;
    cfg.model.d_att = cfg.model.d_rad = cfg.model.d_head = 4;
    cfg.model.num_basis = 4;
    cfg.model.r_cut = 4.0;
    cfg.solver.max_steps = 80;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.seed = 3;
    cfg.train.lr_max = 2e-4;
    cfg.train.warmup_epochs = 1.0;
    config::save_config((dir / "cfg.txt").string(), cfg);

    TrainArgs ta;
    ta.config_path = (dir / "cfg.txt").string();
    ta.data_path = data;
    ta.out_dir = (dir / "run").string();
    cmd_train(ta);
    ckpt = (dir / "run" / "checkpoint.deqf").string();
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("config: serialize/parse round trip is a fixed point") {
  config::RunConfig cfg;
  cfg.model.channels = 12;
  cfg.solver.eps_reuse = 0.25;
  cfg.train.seed = 99;
  cfg.potential = "chain4";
  auto s1 = config::serialize_config(cfg);
  auto cfg2 = config::parse_config(s1);
  auto s2 = config::serialize_config(cfg2);
  CHECK(s1 == s2);
  auto cfg3 = config::parse_config(s2);
  CHECK(config::serialize_config(cfg3) == s2);
}

TEST_CASE("config: unknown keys and malformed lines are rejected") {
  CHECK_THROWS_AS(config::parse_config("model.does_not_exist = 3\n"), std::invalid_argument);
  CHECK_THROWS_AS(config::parse_config("model.l_max 2\n"), std::invalid_argument);
  CHECK_THROWS_AS(config::parse_config("deq.solver = nonsense\n"), std::invalid_argument);
  // comments and blanks are fine
  auto cfg = config::parse_config("# comment\n\nmodel.l_max = 1\n");
  CHECK(cfg.model.l_max == 1);
}

TEST_CASE("gen-data: deterministic and complete output") {
  auto dir = workdir();
  GenDataArgs gd;
  gd.potential = "ch4";
  gd.frames = 4;
  gd.dt = 0.5;
  gd.temperature = 300.0;
  gd.seed = 7;
  gd.out_dir = (dir / "gen1").string();
  cmd_gen_data(gd);
  gd.out_dir = (dir / "gen2").string();
  cmd_gen_data(gd);
  CHECK(slurp((dir / "gen1" / "traj.xyz").string()) ==
        slurp((dir / "gen2" / "traj.xyz").string()));
  CHECK(slurp((dir / "gen1" / "manifest.json").string()) ==
        slurp((dir / "gen2" / "manifest.json").string()));
  auto frames = xyz::load_frames((dir / "gen1" / "traj.xyz").string());
  CHECK(frames.size() == 4);
  CHECK(frames[0].system.size() == 5);
}

TEST_CASE("pipeline: gen-data, train, eval round-trips with no schema errors") {
  auto& p = pipeline();
  EvalArgs ea;
  ea.checkpoint = p.ckpt;
  ea.data_path = p.data;
  ea.report_path = (p.dir / "report.csv").string();
  auto s = cmd_eval(ea);
  CHECK(s.n_samples == 30);
  CHECK(s.force_mae_component > 0.0);
  CHECK(std::isfinite(s.energy_mae));
  auto text = slurp(ea.report_path);
  CHECK(text.find("sample,force_mae_component") != std::string::npos);

  // deterministic body across reruns
  ea.report_path = (p.dir / "report2.csv").string();
  cmd_eval(ea);
  CHECK(body_of(slurp((p.dir / "report.csv").string())) ==
        body_of(slurp((p.dir / "report2.csv").string())));
}

TEST_CASE("md: runs, writes trajectory and deterministic stats body") {
  auto& p = pipeline();
  MdArgs ma;
  ma.checkpoint = p.ckpt;
  ma.init_path = p.data;
  ma.steps = 5;
  ma.dt = 0.2;
  ma.reuse = true;
  ma.temperature = 100.0;
  ma.seed = 5;
  ma.out_traj = (p.dir / "md.xyz").string();
  ma.out_stats = (p.dir / "md_stats.csv").string();
  cmd_md(ma);
  auto frames = xyz::load_frames(ma.out_traj);
  CHECK(frames.size() == 6);
  auto stats1 = body_of(slurp(ma.out_stats));
  ma.out_stats = (p.dir / "md_stats2.csv").string();
  cmd_md(ma);
  CHECK(stats1 == body_of(slurp(ma.out_stats)));
  CHECK(stats1.find("frame,steps,residual,reused\n") == 0);
}

TEST_CASE("relax --ablation: exactly three rows with the expected columns") {
  auto& p = pipeline();
  RelaxArgs ra;
  ra.checkpoint = p.ckpt;
  ra.init_path = p.data;
  ra.steps = 5;
  ra.step_size = 0.005;
  ra.f_max = 1e-6;
  ra.ablation = true;
  ra.n_systems = 2;
  ra.seed = 8;
  ra.out_path = (p.dir / "ablation.csv").string();
  auto rows = cmd_relax(ra);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].fp_reuse == "no");
  CHECK(rows[1].fp_reuse == "yes");
  CHECK(rows[2].fp_reuse == "yes");
  auto text = slurp(ra.out_path);
  CHECK(text.find("FP reuse,eps_FPreuse_test,# Solver steps,Time [s]") != std::string::npos);
  int data_rows = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty() && line[0] != '#' && line.find("FP reuse") == std::string::npos) ++data_rows;
  CHECK(data_rows == 3);
}

TEST_CASE("sweep-tol: nonincreasing mean steps as tolerance loosens") {
  auto& p = pipeline();
  SweepTolArgs sa;
  sa.checkpoint = p.ckpt;
  sa.data_path = p.data;
  sa.max_samples = 10;
  sa.out_path = (p.dir / "sweep.csv").string();
  auto rows = cmd_sweep_tol(sa);
  REQUIRE(rows.size() == 5);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].tolerance > rows[i - 1].tolerance);
    CHECK(rows[i].mean_steps <= rows[i - 1].mean_steps);
  }
  auto text = slurp(sa.out_path);
  CHECK(text.find("tolerance,force_mae,mean_time_s,mean_steps") != std::string::npos);
}

TEST_CASE("bench-fpreuse: histograms and deviation series") {
  auto& p = pipeline();
  BenchFpreuseArgs ba;
  ba.checkpoint = p.ckpt;
  ba.traj_path = p.data;
  ba.max_frames = 12;
  ba.out_hist = (p.dir / "hist.csv").string();
  ba.out_dfrel = (p.dir / "dfrel.csv").string();
  auto rep = cmd_bench_fpreuse(ba);
  CHECK(rep.per_frame.size() == 12);
  CHECK(rep.dF_rel >= 0.0);
  CHECK(rep.mean_steps_reuse <= rep.mean_steps_cold);
  auto text = slurp(ba.out_hist);
  CHECK(text.find("steps,percent_no_reuse,percent_reuse") != std::string::npos);
}

TEST_SUITE_END();
