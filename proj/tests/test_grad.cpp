#include "deqff/grad.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "doctest.h"

using namespace deqff;
using namespace deqff::grad;

namespace {

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

struct AffineHooks {
  Eigen::MatrixXd A;  // f(z, theta) = A z + theta
  AdjointHooks hooks;

  explicit AffineHooks(const Eigen::MatrixXd& A_) : A(A_) {
    hooks.dim = int(A.rows());
    hooks.vjp_z = [this](const double* u, double* out) {
      Eigen::Map<const Eigen::VectorXd> uv(u, A.rows());
      Eigen::VectorXd r = A.transpose() * uv;
      for (int i = 0; i < A.rows(); ++i) out[i] = r(i);
    };
    hooks.vjp_theta = [this](const double* u, GradReport& rep) {
      auto& b = rep.arrays["b"];
      if (b.empty()) b.assign(A.rows(), 0.0);
      for (int i = 0; i < A.rows(); ++i) b[i] += u[i];
    };
  }
};

Eigen::MatrixXd random_contraction(int dim, double rho, Rng& rng) {
  Eigen::MatrixXd A(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) A(i, j) = rng.normal();
  A *= rho / A.eigenvalues().cwiseAbs().maxCoeff();
  return A;
}

}  // namespace

TEST_SUITE_BEGIN("grad");

TEST_CASE("vjp linearity in the cotangent") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(1);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::all_keep(edges.size()));

  FeatVec z(model.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
  auto hooks = make_model_hooks(model, z);

  std::vector<double> u1(model.dim()), u2(model.dim()), ucomb(model.dim());
  for (int i = 0; i < model.dim(); ++i) {
    u1[i] = rng.normal();
    u2[i] = rng.normal();
  }
  double a = 0.37, b = -1.42;
  for (int i = 0; i < model.dim(); ++i) ucomb[i] = a * u1[i] + b * u2[i];
  std::vector<double> o1(model.dim()), o2(model.dim()), oc(model.dim());
  hooks.vjp_z(u1.data(), o1.data());
  hooks.vjp_z(u2.data(), o2.data());
  hooks.vjp_z(ucomb.data(), oc.data());
  for (int i = 0; i < model.dim(); ++i)
    CHECK(std::abs(oc[i] - (a * o1[i] + b * o2[i])) < 1e-12 * (1.0 + std::abs(oc[i])));
}

TEST_CASE("vjp matches finite-difference JVP of f_theta") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(2);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  // include dropout to cover the masked path
  deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::sample(edges.size(), 0.2, 77));
  const int dim = model.dim();

  FeatVec z(dim);
  for (int i = 0; i < dim; ++i) z[i] = rng.normal();
  auto hooks = make_model_hooks(model, z);

  std::vector<double> u(dim), v(dim), vjp(dim);
  for (int i = 0; i < dim; ++i) {
    u[i] = rng.normal();
    v[i] = rng.normal();
  }
  hooks.vjp_z(u.data(), vjp.data());
  double lhs = 0.0;
  for (int i = 0; i < dim; ++i) lhs += vjp[i] * v[i];

  const double h = 1e-6;
  std::vector<double> zp(dim), zm(dim), fp(dim), fm(dim);
  for (int i = 0; i < dim; ++i) {
    zp[i] = z[i] + h * v[i];
    zm[i] = z[i] - h * v[i];
  }
  model.eval(zp.data(), fp.data());
  model.eval(zm.data(), fm.data());
  double rhs = 0.0;
  for (int i = 0; i < dim; ++i) rhs += u[i] * (fp[i] - fm[i]) / (2.0 * h);
  CHECK(std::abs(lhs - rhs) < 1e-5 * (1.0 + std::abs(lhs)));
}

TEST_CASE("ift_backward: affine model matches the (I-A)^-T closed form") {
  Rng rng(3);
  const int dim = 12;
  auto A = random_contraction(dim, 0.9, rng);
  AffineHooks ah(A);
  Eigen::VectorXd dL(dim);
  for (int i = 0; i < dim; ++i) dL(i) = rng.normal();

  deq::SolverConfig cfg;
  cfg.eps_train = 1e-13;
  cfg.max_steps = 400;
  FeatVec dl(dim);
  for (int i = 0; i < dim; ++i) dl[i] = dL(i);
  auto rep = ift_backward(dl, ah.hooks, cfg);
  Eigen::VectorXd want =
      (Eigen::MatrixXd::Identity(dim, dim) - A).transpose().lu().solve(dL);
  REQUIRE(rep.arrays.count("b") == 1);
  for (int i = 0; i < dim; ++i)
    CHECK(std::abs(rep.arrays["b"][i] - want(i)) < 1e-10 * (1.0 + std::abs(want(i))));
  CHECK(rep.adjoint_converged);
}

TEST_CASE("ift equals phantom when the map ignores z") {
  Rng rng(4);
  const int dim = 10;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(dim, dim);
  AffineHooks ah(A);
  FeatVec dl(dim);
  for (int i = 0; i < dim; ++i) dl[i] = rng.normal();
  deq::SolverConfig cfg;
  cfg.eps_train = 1e-12;
  auto rep_ift = ift_backward(dl, ah.hooks, cfg);
  AffineHooks ah2(A);
  auto rep_ph = phantom_1step(dl, ah2.hooks);
  for (int i = 0; i < dim; ++i)
    CHECK(rep_ift.arrays["b"][i] == doctest::Approx(rep_ph.arrays["b"][i]).epsilon(1e-12));
}

TEST_CASE("phantom: Neumann truncation error matches the closed form at rho=0.9") {
  Rng rng(5);
  const int dim = 12;
  auto A = random_contraction(dim, 0.9, rng);
  Eigen::VectorXd dL(dim);
  for (int i = 0; i < dim; ++i) dL(i) = rng.normal();
  FeatVec dl(dim);
  for (int i = 0; i < dim; ++i) dl[i] = dL(i);

  AffineHooks ah(A);
  deq::SolverConfig cfg;
  cfg.eps_train = 1e-14;
  cfg.max_steps = 600;
  auto rep_ift = ift_backward(dl, ah.hooks, cfg);
  AffineHooks ah2(A);
  auto rep_ph = phantom_1step(dl, ah2.hooks);

  // analytic discrepancy: ((I-A)^-T - I) dL
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::VectorXd tail = (I - A).transpose().lu().solve(dL) - dL;
  for (int i = 0; i < dim; ++i) {
    double got = rep_ift.arrays["b"][i] - rep_ph.arrays["b"][i];
    CHECK(std::abs(got - tail(i)) < 1e-10 * (1.0 + std::abs(tail(i))));
  }
}

TEST_CASE("phantom: exactly one vjp_theta evaluation and no vjp_z") {
  Rng rng(6);
  auto A = random_contraction(8, 0.5, rng);
  AffineHooks ah(A);
  FeatVec dl(8);
  for (int i = 0; i < 8; ++i) dl[i] = rng.normal();
  phantom_1step(dl, ah.hooks);
  CHECK(ah.hooks.vjp_theta_calls == 1);
  CHECK(ah.hooks.vjp_z_calls == 0);
}

TEST_CASE("ift_backward: unconverged adjoint is a hard error") {
  Rng rng(7);
  auto A = random_contraction(8, 0.97, rng);
  AffineHooks ah(A);
  FeatVec dl(8);
  for (int i = 0; i < 8; ++i) dl[i] = rng.normal();
  deq::SolverConfig cfg;
  cfg.eps_train = 1e-13;
  cfg.max_steps = 2;  // cannot converge this fast
  CHECK_THROWS_AS(ift_backward(dl, ah.hooks, cfg), CheckError);
}

TEST_CASE("model pipeline: IFT gradient matches finite differences") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(8);
  P.init(rng, 4.0);
  auto s = small_molecule(rng, 5);

  // quadratic loss against fixed random targets
  const int n = s.size();
  std::vector<Vec3> f_t(n);
  for (auto& f : f_t) f = {rng.normal(), rng.normal(), rng.normal()};
  const double e_t = rng.normal();

  deq::SolverConfig scfg;
  scfg.eps_train = 1e-12;
  scfg.max_steps = 300;

  auto loss_of = [&](const eqnet::ModelParams& params) {
    auto r = deq::deq_forward(s, params, scfg, nullptr, nullptr, true);
    REQUIRE(r.stats.converged);
    double L = 0.5 * (r.energy - e_t) * (r.energy - e_t);
    for (int i = 0; i < n; ++i) {
      Vec3 d = r.forces[i] - f_t[i];
      L += 0.5 * d.dot(d);
    }
    return L;
  };

  // analytic gradient
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::all_keep(edges.size()));
  deq::MapFn map = [&](const double* z, double* out) { model.eval(z, out); };
  FeatVec z0(model.dim());
  auto st = deq::solve(map, z0, scfg, scfg.eps_train, 0);
  REQUIRE(st.converged);

  eqnet::HeadsCtx hctx;
  auto ef = model.run_heads(st.z.data(), hctx);
  double dE = ef.energy - e_t;
  std::vector<Vec3> dF(n);
  for (int i = 0; i < n; ++i) dF[i] = ef.forces[i] - f_t[i];

  auto head_grads = P.zeros_like();
  FeatVec dl(model.dim());
  model.heads_vjp(dE, dF, st.z.data(), dl.data(), hctx, &head_grads);
  auto hooks = make_model_hooks(model, st.z);
  auto rep = ift_backward(dl, hooks, scfg);
  rep.add_scaled(to_report(std::move(head_grads)), 1.0);

  // spot-check a spread of parameters with central differences
  struct Probe {
    const char* name;
    int idx;
  };
  std::vector<std::pair<std::string, int>> probes = {
      {"embed.atom_emb", 5},  {"embed.alpha", 0},   {"embed.rad_w2", 3},
      {"layer0.gamma", 2},    {"layer0.w_mix", 7},  {"layer0.rad_w1", 4},
      {"layer0.att_w", 9},    {"layer0.att_k", 1},  {"layer0.w_out", 11},
      {"fhead.w_mix", 13},    {"fhead.readout", 2}, {"ehead.w1", 6},
      {"ehead.w2", 3},        {"ehead.b1", 1},      {"layer0.rad_b2", 5},
  };
  for (auto& [name, j] : probes) {
    auto it = std::find_if(P.arrays.begin(), P.arrays.end(),
                           [&](const eqnet::ParamArray& a) { return a.name == name; });
    REQUIRE(it != P.arrays.end());
    REQUIRE(j < int(it->v.size()));
    double h = 1e-5 * std::max(1.0, std::abs(it->v[j]));
    eqnet::ModelParams Pp = P, Pm = P;
    Pp.arrays[it - P.arrays.begin()].v[j] += h;
    Pm.arrays[it - P.arrays.begin()].v[j] -= h;
    double fd = (loss_of(Pp) - loss_of(Pm)) / (2.0 * h);
    double an = rep.arrays[name][j];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
    INFO(name << "[" << j << "] fd=" << fd << " an=" << an);
    CHECK(std::abs(fd - an) / denom < 1e-4);
  }
}

TEST_CASE("correction gradients: empty list gives zero report") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(9);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::all_keep(edges.size()));
  LossFn loss = [](double E, const std::vector<Vec3>& F, double& dE, std::vector<Vec3>& dF) {
    dE = E;
    for (std::size_t i = 0; i < F.size(); ++i) dF[i] = F[i];
    return 0.0;
  };
  auto rep = correction_gradients({}, model, loss);
  CHECK(rep.correction_terms == 0);
  CHECK(rep.arrays.empty());
}

TEST_CASE("correction gradients: [z*] duplicates the phantom gradient of the main loss") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(10);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::all_keep(edges.size()));

  FeatVec z(model.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();

  const double e_t = 0.3;
  LossFn loss = [&](double E, const std::vector<Vec3>& F, double& dE, std::vector<Vec3>& dF) {
    dE = E - e_t;
    double L = 0.5 * dE * dE;
    for (std::size_t i = 0; i < F.size(); ++i) {
      dF[i] = F[i];
      L += 0.5 * F[i].dot(F[i]);
    }
    return L;
  };

  // phantom of the "main" loss at z: heads backward then one vjp_theta
  eqnet::HeadsCtx hctx;
  auto ef = model.run_heads(z.data(), hctx);
  double dE = 0.0;
  std::vector<Vec3> dF(ef.forces.size());
  loss(ef.energy, ef.forces, dE, dF);
  auto g = P.zeros_like();
  FeatVec dl(model.dim());
  model.heads_vjp(dE, dF, z.data(), dl.data(), hctx, &g);
  auto hooks = make_model_hooks(model, z);
  auto want = phantom_1step(dl, hooks);
  want.add_scaled(to_report(std::move(g)), 1.0);

  auto got = correction_gradients({z}, model, loss);
  CHECK(got.correction_terms == 1);
  for (auto& [name, v] : want.arrays) {
    REQUIRE(got.arrays.count(name) == 1);
    for (std::size_t i = 0; i < v.size(); ++i)
      CHECK(got.arrays[name][i] == doctest::Approx(v[i]).epsilon(1e-11));
  }
}

TEST_CASE("correction gradients: additive across samples") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(11);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);
  auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
  deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::all_keep(edges.size()));

  FeatVec z1(model.dim()), z2(model.dim());
  for (std::size_t i = 0; i < z1.size(); ++i) {
    z1[i] = rng.normal();
    z2[i] = rng.normal();
  }
  LossFn loss = [](double E, const std::vector<Vec3>& F, double& dE, std::vector<Vec3>& dF) {
    dE = 2.0 * E;
    for (std::size_t i = 0; i < F.size(); ++i) dF[i] = F[i] * 0.5;
    return 0.0;
  };
  auto a = correction_gradients({z1}, model, loss);
  auto b = correction_gradients({z2}, model, loss);
  auto ab = correction_gradients({z1, z2}, model, loss);
  a.add_scaled(b, 1.0);
  CHECK(ab.correction_terms == 2);
  for (auto& [name, v] : ab.arrays)
    for (std::size_t i = 0; i < v.size(); ++i)
      CHECK(v[i] == doctest::Approx(a.arrays[name][i]).epsilon(1e-12));
}

TEST_CASE("memory: retained feature buffers independent of solver depth") {
  auto cfg = tiny_cfg();
  auto P = eqnet::ModelParams::make(cfg);
  Rng rng(12);
  P.init(rng, 4.0);
  auto s = small_molecule(rng);

  auto run = [&](int max_steps) {
    auto edges = graph::build_neighbor_list(s, cfg.r_cut, cfg.max_neighbors);
    deq::FThetaModel model(s, edges, P, eqnet::DropoutMask::all_keep(edges.size()));
    deq::SolverConfig scfg;
    scfg.max_steps = max_steps;
    scfg.eps_train = 1e-300;  // force the step cap in every configuration
    deq::MapFn map = [&](const double* z, double* out) { model.eval(z, out); };
    memlog::reset_peak();
    FeatVec z0(model.dim());
    auto st = deq::anderson_solve(map, z0, scfg, scfg.eps_train, 3);
    eqnet::HeadsCtx hctx;
    auto ef = model.run_heads(st.z.data(), hctx);
    auto g = P.zeros_like();
    FeatVec dl(model.dim());
    std::vector<Vec3> dF(ef.forces.size(), Vec3{1, 0, 0});
    model.heads_vjp(1.0, dF, st.z.data(), dl.data(), hctx, &g);
    auto hooks = make_model_hooks(model, st.z);
    deq::SolverConfig acfg = scfg;
    acfg.eps_train = 1e-10;
    acfg.max_steps = 200;
    ift_backward(dl, hooks, acfg);
    return memlog::peak();
  };

  auto p5 = run(5);
  auto p10 = run(10);
  auto p40 = run(40);
  CHECK(p5 == p10);
  CHECK(p10 == p40);
}

TEST_SUITE_END();
