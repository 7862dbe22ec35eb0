#include "deqff/deq.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "doctest.h"

using namespace deqff;
using namespace deqff::deq;

namespace {

// random affine contraction z -> A z + b with given spectral radius
struct AffineMap {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;

  static AffineMap random(int dim, double rho, Rng& rng) {
    AffineMap m;
    m.A.resize(dim, dim);
    m.b.resize(dim);
    for (int i = 0; i < dim; ++i) {
      m.b(i) = rng.normal();
      for (int j = 0; j < dim; ++j) m.A(i, j) = rng.normal();
    }
    double sr = m.A.eigenvalues().cwiseAbs().maxCoeff();
    m.A *= rho / sr;
    return m;
  }

  MapFn fn() const {
    return [this](const double* z, double* out) {
      Eigen::Map<const Eigen::VectorXd> zv(z, A.rows());
      Eigen::VectorXd r = A * zv + b;
      for (int i = 0; i < A.rows(); ++i) out[i] = r(i);
    };
  }

  Eigen::VectorXd fixed_point() const {
    return (Eigen::MatrixXd::Identity(A.rows(), A.rows()) - A).lu().solve(b);
  }
};

eqnet::ModelConfig tiny_cfg() {
  eqnet::ModelConfig c;
  c.l_max = 1;
  c.channels = 4;
  c.d_att = 6;
  c.d_rad = 6;
  c.d_head = 6;
  c.num_basis = 6;
  c.n_layers = 1;
  c.z_max = 8;
  return c;
}

graph::AtomicSystem small_molecule(Rng& rng, int n = 5) {
  graph::AtomicSystem s;
  for (int i = 0; i < n; ++i) {
    s.atomic_numbers.push_back(1 + int(rng.next_u64() % 5));
    s.positions.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if ((s.positions[i] - s.positions[j]).norm() < 0.5) s.positions[j].z += 0.8;
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("deq");

TEST_CASE("input_inject: z = 0 returns the injection exactly") {
  Rng rng(1);
  int nodes = 3, dim = 7;
  std::vector<double> z(nodes * dim, 0.0), x(nodes * dim), out(nodes * dim);
  for (double& v : x) v = rng.normal();
  input_inject(z.data(), x.data(), nodes, dim, out.data());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("input_inject: z = x renormalizes back to the injection") {
  Rng rng(2);
  int nodes = 2, dim = 5;
  std::vector<double> x(nodes * dim), out(nodes * dim);
  for (double& v : x) v = rng.normal();
  input_inject(x.data(), x.data(), nodes, dim, out.data());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-13));
}

TEST_CASE("input_inject: per-node output norm equals the injection norm") {
  Rng rng(3);
  int nodes = 4, dim = 9;
  std::vector<double> z(nodes * dim), x(nodes * dim), out(nodes * dim);
  for (double& v : z) v = rng.normal();
  for (double& v : x) v = rng.normal();
  input_inject(z.data(), x.data(), nodes, dim, out.data());
  for (int n = 0; n < nodes; ++n) {
    double nx = 0.0, no = 0.0;
    for (int i = 0; i < dim; ++i) {
      nx += x[n * dim + i] * x[n * dim + i];
      no += out[n * dim + i] * out[n * dim + i];
    }
    CHECK(std::sqrt(no) == doctest::Approx(std::sqrt(nx)).epsilon(1e-12));
  }
}

TEST_CASE("input_inject: degenerate |z + x| returns x unchanged") {
  int nodes = 1, dim = 4;
  std::vector<double> z = {1.0, -2.0, 0.5, 0.25};
  std::vector<double> x = {-1.0, 2.0, -0.5, -0.25};  // z + x = 0
  std::vector<double> out(dim);
  input_inject(z.data(), x.data(), nodes, dim, out.data());
  for (int i = 0; i < dim; ++i) CHECK(out[i] == x[i]);
}

TEST_CASE("anderson: affine contraction reaches the direct-solve fixed point") {
  Rng rng(4);
  SolverConfig cfg;
  cfg.max_steps = 400;
  for (int trial = 0; trial < 5; ++trial) {
    auto m = AffineMap::random(16, 0.9, rng);
    auto zstar = m.fixed_point();
    FeatVec z0(16);
    auto st = anderson_solve(m.fn(), z0, cfg, 1e-10);
    CHECK(st.converged);
    double err = 0.0;
    for (int i = 0; i < 16; ++i) err += (st.z[i] - zstar(i)) * (st.z[i] - zstar(i));
    CHECK(std::sqrt(err) < 1e-8 * (1.0 + zstar.norm()));

    auto stp = picard_solve(m.fn(), z0, cfg, 1e-10);
    CHECK(stp.converged);
    CHECK(st.step < stp.step);
  }
}

TEST_CASE("solvers: z0 already a fixed point returns in one map evaluation") {
  Rng rng(5);
  auto m = AffineMap::random(8, 0.5, rng);
  auto zstar = m.fixed_point();
  FeatVec z0(8);
  for (int i = 0; i < 8; ++i) z0[i] = zstar(i);
  SolverConfig cfg;
  for (auto kind : {SolverKind::anderson, SolverKind::broyden, SolverKind::picard}) {
    cfg.solver = kind;
    auto st = solve(m.fn(), z0, cfg, 1e-6);
    CHECK(st.converged);
    CHECK(st.map_evals == 1);
    CHECK(st.step == 0);
  }
}

TEST_CASE("anderson: max_steps = 1 on a non-fixed start reports unconverged") {
  Rng rng(6);
  auto m = AffineMap::random(8, 0.9, rng);
  SolverConfig cfg;
  cfg.max_steps = 1;
  FeatVec z0(8);
  auto st = anderson_solve(m.fn(), z0, cfg, 1e-12);
  CHECK_FALSE(st.converged);
  CHECK(st.step == 1);
  CHECK(st.residual > 0.0);
  CHECK(st.residual_trace.size() == 2);
}

TEST_CASE("broyden: affine contraction oracle") {
  Rng rng(7);
  SolverConfig cfg;
  cfg.solver = SolverKind::broyden;
  cfg.max_steps = 400;
  for (int trial = 0; trial < 5; ++trial) {
    auto m = AffineMap::random(16, 0.9, rng);
    auto zstar = m.fixed_point();
    FeatVec z0(16);
    auto st = broyden_solve(m.fn(), z0, cfg, 1e-10);
    CHECK(st.converged);
    double err = 0.0;
    for (int i = 0; i < 16; ++i) err += (st.z[i] - zstar(i)) * (st.z[i] - zstar(i));
    CHECK(std::sqrt(err) < 1e-8 * (1.0 + zstar.norm()));
  }
}

TEST_CASE("broyden: constant map converges in one update step") {
  Rng rng(8);
  Eigen::VectorXd c(12);
  for (int i = 0; i < 12; ++i) c(i) = rng.normal();
  MapFn fn = [&](const double* z, double* out) {
    (void)z;
    for (int i = 0; i < 12; ++i) out[i] = c(i);
  };
  FeatVec z0(12);
  for (int i = 0; i < 12; ++i) z0[i] = rng.normal();
  SolverConfig cfg;
  auto st = broyden_solve(fn, z0, cfg, 1e-12);
  CHECK(st.converged);
  CHECK(st.step == 1);
}

TEST_CASE("solvers: expanding map raises a divergence error before overflow") {
  Rng rng(123);
  auto m = AffineMap::random(16, 2.0, rng);
  FeatVec z0(16);
  SolverConfig cfg;
  cfg.max_steps = 500;
  CHECK_THROWS_AS(broyden_solve(m.fn(), z0, cfg, 1e-12), SolverDivergence);
  CHECK_THROWS_AS(picard_solve(m.fn(), z0, cfg, 1e-12), SolverDivergence);
  try {
    picard_solve(m.fn(), z0, cfg, 1e-12);
  } catch (const SolverDivergence& e) {
    CHECK(e.step > 0);
    CHECK(e.step < 500);
  }
}

TEST_CASE("anderson: stopping contract holds on re-evaluation") {
  Rng rng(9);
  auto m = AffineMap::random(16, 0.9, rng);
  SolverConfig cfg;
  cfg.max_steps = 200;
  for (double tol : {1e-2, 1e-4, 1e-8}) {
    FeatVec z0(16);
    auto st = anderson_solve(m.fn(), z0, cfg, tol);
    REQUIRE(st.converged);
    // independent re-evaluation of the residual at the returned iterate
    std::vector<double> g(16);
    m.fn()(st.z.data(), g.data());
    double ra = 0.0, zn = 0.0;
    for (int i = 0; i < 16; ++i) {
      ra += (g[i] - st.z[i]) * (g[i] - st.z[i]);
      zn += st.z[i] * st.z[i];
    }
    CHECK(std::sqrt(ra) / std::max(std::sqrt(zn), kResidualFloor) <= tol);
  }
}

TEST_CASE("anderson: step counts are monotone as tolerance tightens") {
  Rng rng(10);
  auto m = AffineMap::random(16, 0.9, rng);
  SolverConfig cfg;
  cfg.max_steps = 400;
  FeatVec z0(16);
  int prev = 0;
  for (double tol : {1e-1, 1e-2, 1e-4}) {
    auto st = anderson_solve(m.fn(), z0, cfg, tol);
    CHECK(st.converged);
    CHECK(st.step >= prev);
    prev = st.step;
  }
}

TEST_CASE("correction sampling: bounded count and plausible quarter points") {
  Rng rng(11);
  auto m = AffineMap::random(16, 0.9, rng);
  SolverConfig cfg;
  cfg.solver = SolverKind::picard;
  cfg.max_steps = 400;
  FeatVec z0(16);
  auto st = picard_solve(m.fn(), z0, cfg, 1e-9, 3);
  REQUIRE(st.converged);
  REQUIRE(st.sampled.size() <= 3);
  REQUIRE(st.sampled.size() == st.sampled_steps.size());
  for (std::size_t j = 0; j < st.sampled_steps.size(); ++j) {
    int target = int((j + 1) * st.step + 3) / 4;
    CHECK(std::abs(st.sampled_steps[j] - target) <= 8);  // thinning stride bound
    CHECK(st.sampled_steps[j] >= 1);
    CHECK(st.sampled_steps[j] <= st.step);
  }
  // samples hold the actual iterates: Picard iterate k has closed form
  // z_k = (I - A^k)(I - A)^-1 b
  auto zstar = m.fixed_point();
  for (std::size_t j = 0; j < st.sampled.size(); ++j) {
    Eigen::MatrixXd Ak = Eigen::MatrixXd::Identity(16, 16);
    for (int p = 0; p < st.sampled_steps[j]; ++p) Ak = m.A * Ak;
    Eigen::VectorXd want = zstar - Ak * zstar;
    for (int i = 0; i < 16; ++i) CHECK(st.sampled[j][i] == doctest::Approx(want(i)).epsilon(1e-7));
  }
}

TEST_CASE("f_theta: dropping all edges reduces to the input injection") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(12);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  DropoutMask mask;
  mask.keep.assign(edges.size(), 0);
  FThetaModel model(s, edges, P, mask);
  FeatVec z(model.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
  std::vector<double> out(model.dim()), want(model.dim());
  model.eval(z.data(), out.data());
  input_inject(z.data(), model.x_tilde().data(), model.n_nodes(), model.node_dim(), want.data());
  for (int i = 0; i < model.dim(); ++i) CHECK(out[i] == doctest::Approx(want[i]).epsilon(1e-14));
}

TEST_CASE("f_theta: bit-identical on repeated evaluation") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(13);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  FThetaModel model(s, edges, P, DropoutMask::sample(edges.size(), 0.3, 99));
  FeatVec z(model.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
  std::vector<double> out1(model.dim()), out2(model.dim());
  model.eval(z.data(), out1.data());
  model.eval(z.data(), out2.data());
  for (int i = 0; i < model.dim(); ++i) CHECK(out1[i] == out2[i]);
}

TEST_CASE("deq_forward: reuse of the exact fixed point returns immediately") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(14);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  SolverConfig scfg;
  scfg.max_steps = 200;
  scfg.eps_train = 1e-10;
  auto cold = deq_forward(s, P, scfg);
  REQUIRE(cold.stats.converged);
  auto warm = deq_forward(s, P, scfg, &cold.z_star);
  CHECK(warm.stats.converged);
  CHECK(warm.stats.reuse_used);
  CHECK(warm.stats.map_evals <= 1);
  CHECK(warm.stats.steps == 0);
}

TEST_CASE("deq_forward: solved output is equivariant from zero init") {
  auto cfg = tiny_cfg();
  cfg.l_max = 2;
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(15);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto R = irreps::Rotation::random(rng);
  graph::AtomicSystem s2 = s;
  for (auto& p : s2.positions) p = R.apply(p);

  SolverConfig scfg;
  scfg.eps_train = 1e-8;
  scfg.max_steps = 200;
  auto a = deq_forward(s, P, scfg);
  auto b = deq_forward(s2, P, scfg);
  REQUIRE(a.stats.converged);
  REQUIRE(b.stats.converged);
  double fn = 0.0, err = 0.0;
  for (int i = 0; i < s.size(); ++i) {
    Vec3 want = R.apply(a.forces[i]);
    err += (b.forces[i] - want).dot(b.forces[i] - want);
    fn += want.dot(want);
  }
  CHECK(std::sqrt(err) <= 1e-8 * (1.0 + std::sqrt(fn)));
  CHECK(std::abs(a.energy - b.energy) <= 1e-8 * (1.0 + std::abs(a.energy)));
}

TEST_CASE("deq_forward: mismatched reuse state falls back to zero init") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(16);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  SolverConfig scfg;
  scfg.max_steps = 200;
  FeatVec wrong(7);  // wrong size
  auto r = deq_forward(s, P, scfg, &wrong);
  CHECK(r.stats.reuse_rejected);
  CHECK_FALSE(r.stats.reuse_used);
  CHECK(r.stats.tol_used == scfg.eps_train);
}

TEST_SUITE_END();
