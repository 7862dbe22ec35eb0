#include "deqff/deq.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>

namespace deqff::deq {

SolverKind solver_from_string(const std::string& s) {
  if (s == "anderson") return SolverKind::anderson;
  if (s == "broyden") return SolverKind::broyden;
  if (s == "picard") return SolverKind::picard;
  throw std::invalid_argument("unknown solver: " + s);
}

std::string to_string(SolverKind k) {
  switch (k) {
    case SolverKind::anderson: return "anderson";
    case SolverKind::broyden: return "broyden";
    case SolverKind::picard: return "picard";
  }
  return "?";
}

void SolverConfig::validate() const {
  check(eps_train > 0.0 && eps_train <= eps_reuse, "SolverConfig: need 0 < eps_train <= eps_reuse");
  check(max_steps >= 1, "SolverConfig: max_steps must be >= 1");
  check(anderson_memory >= 1, "SolverConfig: anderson memory must be >= 1");
  check(anderson_beta > 0.0 && anderson_beta <= 1.0, "SolverConfig: beta must be in (0,1]");
  check(correction_samples >= 0, "SolverConfig: correction_samples must be >= 0");
}

// ---------------------------------------------------------------------------
// Input injection

void input_inject(const double* z, const double* x, int n_nodes, int node_dim, double* out) {
  for (int n = 0; n < n_nodes; ++n) {
    const double* zn = z + std::size_t(n) * node_dim;
    const double* xn = x + std::size_t(n) * node_dim;
    double* on = out + std::size_t(n) * node_dim;
    double nw2 = 0.0, nx2 = 0.0;
    for (int i = 0; i < node_dim; ++i) {
      double w = zn[i] + xn[i];
      on[i] = w;
      nw2 += w * w;
      nx2 += xn[i] * xn[i];
    }
    double nw = std::sqrt(nw2);
    if (nw < 1e-12) {
      for (int i = 0; i < node_dim; ++i) on[i] = xn[i];
      continue;
    }
    double s = std::sqrt(nx2) / nw;
    for (int i = 0; i < node_dim; ++i) on[i] *= s;
  }
}

void input_inject_fwd(const double* z, const double* x, int n_nodes, int node_dim, double* out,
                      InjectCtx& ctx) {
  ctx.n_nodes = n_nodes;
  ctx.node_dim = node_dim;
  ctx.w.resize(std::size_t(n_nodes) * node_dim);
  ctx.nx.resize(n_nodes);
  ctx.nw.resize(n_nodes);
  for (int n = 0; n < n_nodes; ++n) {
    const double* zn = z + std::size_t(n) * node_dim;
    const double* xn = x + std::size_t(n) * node_dim;
    double* wn = ctx.w.data() + std::size_t(n) * node_dim;
    double* on = out + std::size_t(n) * node_dim;
    double nw2 = 0.0, nx2 = 0.0;
    for (int i = 0; i < node_dim; ++i) {
      wn[i] = zn[i] + xn[i];
      nw2 += wn[i] * wn[i];
      nx2 += xn[i] * xn[i];
    }
    ctx.nw[n] = std::sqrt(nw2);
    ctx.nx[n] = std::sqrt(nx2);
    if (ctx.nw[n] < 1e-12) {
      for (int i = 0; i < node_dim; ++i) on[i] = xn[i];
    } else {
      double s = ctx.nx[n] / ctx.nw[n];
      for (int i = 0; i < node_dim; ++i) on[i] = s * wn[i];
    }
  }
}

void input_inject_bwd(const double* u, const InjectCtx& ctx, const double* x, double* dz,
                      double* dx) {
  const int nd = ctx.node_dim;
  for (int n = 0; n < ctx.n_nodes; ++n) {
    const double* un = u + std::size_t(n) * nd;
    const double* wn = ctx.w.data() + std::size_t(n) * nd;
    const double* xn = x + std::size_t(n) * nd;
    double* dzn = dz ? dz + std::size_t(n) * nd : nullptr;
    double* dxn = dx ? dx + std::size_t(n) * nd : nullptr;
    const double nw = ctx.nw[n], nx = ctx.nx[n];
    if (nw < 1e-12) {
      // out = x exactly; z had no influence
      if (dxn)
        for (int i = 0; i < nd; ++i) dxn[i] += un[i];
      continue;
    }
    double uw = 0.0;
    for (int i = 0; i < nd; ++i) uw += un[i] * wn[i];
    const double s = nx / nw;
    const double k = nx * uw / (nw * nw * nw);
    for (int i = 0; i < nd; ++i) {
      double base = s * un[i] - k * wn[i];
      if (dzn) dzn[i] += base;
      if (dxn) {
        double xterm = (nx > 1e-12) ? uw * xn[i] / (nx * nw) : 0.0;
        dxn[i] += base + xterm;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Snapshot buffer: keeps a bounded, uniformly thinned record of the iterate
// trajectory so the quarter-point correction samples can be selected at the
// end without storing every step.

namespace {

class SnapshotBuffer {
 public:
  // slots are allocated up front so the retained footprint does not depend
  // on how many steps the solve ends up taking
  SnapshotBuffer(int capacity, std::size_t dim, bool active)
      : cap_(active ? capacity : 0), steps_(std::size_t(cap_), -1) {
    pool_.reserve(cap_);
    for (int i = 0; i < cap_; ++i) pool_.emplace_back(dim);
  }

  void push(int step, const FeatVec& z) {
    if (cap_ == 0 || step % stride_ != 0) return;
    if (count_ == cap_) {
      stride_ *= 2;
      int w = 0;
      for (int i = 0; i < count_; ++i) {
        if (steps_[i] % stride_ != 0) continue;
        if (w != i) {
          std::swap(pool_[w], pool_[i]);
          steps_[w] = steps_[i];
        }
        ++w;
      }
      count_ = w;
      if (step % stride_ != 0) return;
    }
    pool_[count_] = z;
    steps_[count_] = step;
    ++count_;
  }

  // nearest recorded iterates to ceil(j*n/(count+1)), j = 1..count
  void select(int n_steps, int count, std::vector<FeatVec>& out, std::vector<int>& steps) const {
    out.clear();
    steps.clear();
    if (count_ == 0 || count <= 0) return;
    std::vector<bool> used(count_, false);
    for (int j = 1; j <= count; ++j) {
      int target = (j * n_steps + count) / (count + 1);  // ceil(j*n/(count+1))
      int best = -1;
      long best_d = std::numeric_limits<long>::max();
      for (int i = 0; i < count_; ++i) {
        if (used[i]) continue;
        long d = std::abs(long(steps_[i]) - long(target));
        if (d < best_d || (d == best_d && best >= 0 && steps_[i] < steps_[best])) {
          best_d = d;
          best = i;
        }
      }
      if (best < 0) break;
      used[best] = true;
      out.push_back(pool_[best]);
      steps.push_back(steps_[best]);
    }
  }

 private:
  int cap_;
  int stride_ = 1;
  int count_ = 0;
  std::vector<FeatVec> pool_;
  std::vector<int> steps_;
};

void check_divergence(double res_abs, double initial_abs, int step, const char* solver) {
  if (!std::isfinite(res_abs)) {
    std::ostringstream msg;
    msg << solver << ": non-finite residual at step " << step;
    throw SolverDivergence(msg.str(), step);
  }
  if (res_abs > 1e8 && res_abs > 1e4 * (initial_abs + 1.0)) {
    std::ostringstream msg;
    msg << solver << ": diverging (|r| = " << res_abs << ") at step " << step;
    throw SolverDivergence(msg.str(), step);
  }
}

double rel_residual(double res_abs, double z_norm) {
  return res_abs / std::max(z_norm, kResidualFloor);
}

}  // namespace

// ---------------------------------------------------------------------------
// Picard

FixedPointState picard_solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg,
                             double tol, int collect_samples) {
  cfg.validate();
  const std::size_t dim = z0.size();
  FixedPointState st;
  st.z = z0;
  FeatVec g(dim);
  SnapshotBuffer snaps(12, dim, collect_samples > 0);
  double initial_abs = -1.0;
  for (int k = 0; k <= cfg.max_steps; ++k) {
    map(st.z.data(), g.data());
    st.map_evals++;
    double res_abs = 0.0, zn = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double r = g[i] - st.z[i];
      res_abs += r * r;
      zn += st.z[i] * st.z[i];
    }
    res_abs = std::sqrt(res_abs);
    zn = std::sqrt(zn);
    if (initial_abs < 0) initial_abs = res_abs;
    check_divergence(res_abs, initial_abs, st.step, "picard");
    st.residual = rel_residual(res_abs, zn);
    st.residual_trace.push_back(st.residual);
    if (st.residual < tol) {
      st.converged = true;
      break;
    }
    if (st.step >= cfg.max_steps) break;
    st.z = g;
    st.step++;
    if (collect_samples > 0) snaps.push(st.step, st.z);
  }
  if (collect_samples > 0) snaps.select(st.step, collect_samples, st.sampled, st.sampled_steps);
  return st;
}

// ---------------------------------------------------------------------------
// Anderson acceleration (type-II with damping):
//   z_{k+1} = beta * sum_j c_j g(z_j) + (1-beta) * sum_j c_j z_j
// over the last m iterates, with c minimizing |sum_j c_j (g(z_j)-z_j)| subject
// to sum c = 1 via ridge-regularized normal equations.

FixedPointState anderson_solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg,
                               double tol, int collect_samples) {
  cfg.validate();
  const std::size_t dim = z0.size();
  const int m = cfg.anderson_memory;
  FixedPointState st;
  st.z = z0;
  FeatVec g(dim);
  std::vector<FeatVec> X, G;  // ring buffers
  for (int i = 0; i < m; ++i) {
    X.emplace_back(dim);
    G.emplace_back(dim);
  }
  SnapshotBuffer snaps(12, dim, collect_samples > 0);
  double initial_abs = -1.0;
  int filled = 0;

  for (int k = 0; k <= cfg.max_steps; ++k) {
    map(st.z.data(), g.data());
    st.map_evals++;
    double res_abs = 0.0, zn = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double r = g[i] - st.z[i];
      res_abs += r * r;
      zn += st.z[i] * st.z[i];
    }
    res_abs = std::sqrt(res_abs);
    zn = std::sqrt(zn);
    if (initial_abs < 0) initial_abs = res_abs;
    check_divergence(res_abs, initial_abs, st.step, "anderson");
    st.residual = rel_residual(res_abs, zn);
    st.residual_trace.push_back(st.residual);
    if (st.residual < tol) {
      st.converged = true;
      break;
    }
    if (st.step >= cfg.max_steps) break;

    int slot = k % m;
    X[slot] = st.z;
    G[slot] = g;
    filled = std::min(filled + 1, m);

    bool fallback = false;
    if (filled == 1) {
      fallback = true;  // plain Picard step until history exists
    } else {
      const int n = filled;
      Eigen::MatrixXd M(n, n);
      for (int a = 0; a < n; ++a)
        for (int b = a; b < n; ++b) {
          double s = 0.0;
          for (std::size_t i = 0; i < dim; ++i)
            s += (G[a][i] - X[a][i]) * (G[b][i] - X[b][i]);
          M(a, b) = s;
          M(b, a) = s;
        }
      double ridge = 1e-8 * (M.trace() / n) + 1e-300;
      for (int a = 0; a < n; ++a) M(a, a) += ridge;
      Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
      Eigen::VectorXd y = ldlt.solve(ones);
      double ysum = y.sum();
      if (ldlt.info() != Eigen::Success || !std::isfinite(ysum) || std::abs(ysum) < 1e-300) {
        fallback = true;
      } else {
        Eigen::VectorXd c = y / ysum;
        if (!c.allFinite()) {
          fallback = true;
        } else {
          const double beta = cfg.anderson_beta;
          FeatVec znew(dim);
          for (int a = 0; a < n; ++a) {
            double ca = c(a);
            if (ca == 0.0) continue;
            for (std::size_t i = 0; i < dim; ++i)
              znew[i] += ca * (beta * G[a][i] + (1.0 - beta) * X[a][i]);
          }
          st.z = std::move(znew);
        }
      }
    }
    if (fallback) {
      if (filled > 1) st.picard_fallbacks++;
      st.z = g;
    }
    st.step++;
    if (collect_samples > 0) snaps.push(st.step, st.z);
  }
  if (collect_samples > 0) snaps.select(st.step, collect_samples, st.sampled, st.sampled_steps);
  return st;
}

// ---------------------------------------------------------------------------
// Broyden ("good" update) on G(z) = f(z) - z with B0 = -I, kept as a list of
// rank-one corrections so no dense Jacobian estimate is formed. The update
// store is limited to anderson_memory entries and restarted when full, which
// keeps retained buffers bounded like the Anderson ring.

FixedPointState broyden_solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg,
                              double tol, int collect_samples) {
  cfg.validate();
  const std::size_t dim = z0.size();
  const std::size_t mem = std::size_t(cfg.anderson_memory);
  FixedPointState st;
  st.z = z0;
  FeatVec g(dim), G_cur(dim), G_prev(dim), z_prev(dim);
  std::vector<FeatVec> us, vs;  // B = -I + sum u v^T
  SnapshotBuffer snaps(12, dim, collect_samples > 0);
  double initial_abs = -1.0;
  bool have_prev = false;

  auto apply_B = [&](const FeatVec& x, FeatVec& out) {
    for (std::size_t i = 0; i < dim; ++i) out[i] = -x[i];
    for (std::size_t r = 0; r < us.size(); ++r) {
      double d = dot(vs[r], x);
      if (d == 0.0) continue;
      for (std::size_t i = 0; i < dim; ++i) out[i] += us[r][i] * d;
    }
  };
  auto apply_Bt = [&](const FeatVec& x, FeatVec& out) {
    for (std::size_t i = 0; i < dim; ++i) out[i] = -x[i];
    for (std::size_t r = 0; r < us.size(); ++r) {
      double d = dot(us[r], x);
      if (d == 0.0) continue;
      for (std::size_t i = 0; i < dim; ++i) out[i] += vs[r][i] * d;
    }
  };

  for (int k = 0; k <= cfg.max_steps; ++k) {
    map(st.z.data(), g.data());
    st.map_evals++;
    double res_abs = 0.0, zn = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      G_cur[i] = g[i] - st.z[i];
      res_abs += G_cur[i] * G_cur[i];
      zn += st.z[i] * st.z[i];
    }
    res_abs = std::sqrt(res_abs);
    zn = std::sqrt(zn);
    if (initial_abs < 0) initial_abs = res_abs;
    check_divergence(res_abs, initial_abs, st.step, "broyden");
    st.residual = rel_residual(res_abs, zn);
    st.residual_trace.push_back(st.residual);
    if (st.residual < tol) {
      st.converged = true;
      break;
    }
    if (st.step >= cfg.max_steps) break;

    if (have_prev) {
      if (us.size() >= mem) {  // restart the low-rank estimate
        us.clear();
        vs.clear();
      }
      // good Broyden: B += (dz - B dG)(dz^T B) / (dz^T B dG)
      FeatVec dz(dim), dG(dim), BdG(dim), Btdz(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        dz[i] = st.z[i] - z_prev[i];
        dG[i] = G_cur[i] - G_prev[i];
      }
      apply_B(dG, BdG);
      apply_Bt(dz, Btdz);
      double denom = dot(dz, BdG);
      if (std::isfinite(denom) && std::abs(denom) > 1e-300) {
        FeatVec u(dim);
        double inv = 1.0 / denom;
        for (std::size_t i = 0; i < dim; ++i) u[i] = (dz[i] - BdG[i]) * inv;
        us.push_back(std::move(u));
        vs.push_back(std::move(Btdz));
      } else {
        st.picard_fallbacks++;
      }
    }

    z_prev = st.z;
    G_prev = G_cur;
    have_prev = true;

    FeatVec step_dir(dim);
    apply_B(G_cur, step_dir);
    for (std::size_t i = 0; i < dim; ++i) st.z[i] -= step_dir[i];
    st.step++;
    if (collect_samples > 0) snaps.push(st.step, st.z);
  }
  if (collect_samples > 0) snaps.select(st.step, collect_samples, st.sampled, st.sampled_steps);
  return st;
}

FixedPointState solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg, double tol,
                      int collect_samples) {
  switch (cfg.solver) {
    case SolverKind::anderson: return anderson_solve(map, z0, cfg, tol, collect_samples);
    case SolverKind::broyden: return broyden_solve(map, z0, cfg, tol, collect_samples);
    case SolverKind::picard: return picard_solve(map, z0, cfg, tol, collect_samples);
  }
  throw std::logic_error("unreachable");
}

// ---------------------------------------------------------------------------
// FThetaModel

FThetaModel::FThetaModel(const graph::AtomicSystem& system, const graph::EdgeList& edges,
                         const eqnet::ModelParams& params, DropoutMask mask)
    : system_(&system), params_(&params), mask_(std::move(mask)) {
  ec_ = eqnet::build_edge_cache(system, edges, params.cfg);
  if (mask_.keep.empty()) mask_ = DropoutMask::all_keep(ec_.n_edges);
  check(int(mask_.keep.size()) == ec_.n_edges, "FThetaModel: mask size mismatch");
  radial_.resize(params.cfg.n_layers);
  for (int l = 0; l < params.cfg.n_layers; ++l)
    eqnet::compute_layer_radial(params, params.idx.layers[l], ec_, radial_[l]);
  x_.assign(std::size_t(dim()), 0.0);
  eqnet::embed_forward(system, ec_, params, x_.data(), &embed_ctx_);
}

void FThetaModel::eval(const double* z, double* out) const {
  eval_with_ctx(z, out, scratch_);
}

void FThetaModel::eval_with_ctx(const double* z, double* out, Ctx& ctx) const {
  const auto& cfg = params_->cfg;
  const int nl = cfg.n_layers;
  ctx.layers.resize(nl);
  ctx.scratch.resize(std::size_t(dim()));
  input_inject_fwd(z, x_.data(), n_nodes(), node_dim(), ctx.scratch.data(), ctx.inject);
  for (int l = 0; l < nl; ++l)
    eqnet::layer_forward(ctx.scratch.data(), ctx.scratch.data(), *params_,
                         params_->idx.layers[l], ec_, radial_[l], mask_, ctx.layers[l]);
  std::copy(ctx.scratch.begin(), ctx.scratch.end(), out);
}

void FThetaModel::vjp_features(const Ctx& ctx, const double* u, double* dz) const {
  const auto& cfg = params_->cfg;
  std::vector<double> cot(u, u + dim());
  std::vector<double> dprev(std::size_t(dim()), 0.0);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    std::fill(dprev.begin(), dprev.end(), 0.0);
    eqnet::layer_backward(cot.data(), dprev.data(), *params_, params_->idx.layers[l], ec_,
                          radial_[l], mask_, ctx.layers[l], nullptr);
    cot.swap(dprev);
  }
  input_inject_bwd(cot.data(), ctx.inject, x_.data(), dz, nullptr);
}

void FThetaModel::vjp_params(const Ctx& ctx, const double* u, eqnet::ModelParams& grads,
                             double* dz) const {
  const auto& cfg = params_->cfg;
  std::vector<double> cot(u, u + dim());
  std::vector<double> dprev(std::size_t(dim()), 0.0);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    std::fill(dprev.begin(), dprev.end(), 0.0);
    eqnet::layer_backward(cot.data(), dprev.data(), *params_, params_->idx.layers[l], ec_,
                          radial_[l], mask_, ctx.layers[l], &grads);
    cot.swap(dprev);
  }
  std::vector<double> dx(std::size_t(dim()), 0.0);
  input_inject_bwd(cot.data(), ctx.inject, x_.data(), dz, dx.data());
  eqnet::embed_backward(dx.data(), *system_, ec_, *params_, embed_ctx_, grads);
}

eqnet::EnergyForces FThetaModel::run_heads(const double* z, eqnet::HeadsCtx& hctx) const {
  return eqnet::heads_forward(z, *params_, ec_, mask_, hctx);
}

void FThetaModel::heads_vjp(double dE, const std::vector<Vec3>& dF, const double* z, double* dz,
                            const eqnet::HeadsCtx& hctx, eqnet::ModelParams* grads) const {
  eqnet::heads_backward(dE, dF, z, dz, *params_, ec_, mask_, hctx, grads);
}

// ---------------------------------------------------------------------------
// deq_forward

DeqResult deq_forward(const graph::AtomicSystem& system, const eqnet::ModelParams& params,
                      const SolverConfig& cfg, const FeatVec* reuse, const DropoutMask* mask,
                      bool training) {
  cfg.validate();
  auto edges = graph::build_neighbor_list(system, params.cfg.r_cut, params.cfg.max_neighbors);
  DropoutMask m = mask ? *mask : DropoutMask::all_keep(edges.size());
  FThetaModel model(system, edges, params, std::move(m));

  DeqResult res;
  const std::size_t dim = std::size_t(model.dim());
  FeatVec z0(dim);
  bool reuse_used = false, reuse_rejected = false;
  if (!training && reuse && !reuse->empty()) {
    if (reuse->size() == dim) {
      z0 = *reuse;
      reuse_used = true;
    } else {
      reuse_rejected = true;
      std::cerr << "[deq] reuse state size mismatch (" << reuse->size() << " vs " << dim
                << "); falling back to zero init\n";
    }
  }
  const double tol = (training || !reuse_used) ? cfg.eps_train : cfg.eps_reuse;

  MapFn map = [&model](const double* z, double* out) { model.eval(z, out); };
  auto t0 = std::chrono::steady_clock::now();
  FixedPointState st =
      solve(map, z0, cfg, tol, training ? cfg.correction_samples : 0);
  auto t1 = std::chrono::steady_clock::now();

  if (!st.converged && !training) {
    std::cerr << "[deq] warning: solver unconverged after " << st.step
              << " steps (residual " << st.residual << ", tol " << tol << ")\n";
  }

  eqnet::HeadsCtx hctx;
  auto ef = model.run_heads(st.z.data(), hctx);
  res.energy = ef.energy;
  res.forces = std::move(ef.forces);
  res.z_star = std::move(st.z);
  res.sampled = std::move(st.sampled);
  res.sampled_steps = std::move(st.sampled_steps);
  res.stats.steps = st.step;
  res.stats.map_evals = st.map_evals;
  res.stats.residual = st.residual;
  res.stats.converged = st.converged;
  res.stats.tol_used = tol;
  res.stats.reuse_used = reuse_used;
  res.stats.reuse_rejected = reuse_rejected;
  res.stats.picard_fallbacks = st.picard_fallbacks;
  res.stats.residual_trace = std::move(st.residual_trace);
  res.stats.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  return res;
}

std::string stats_csv(const DeqStats& stats) {
  std::ostringstream os;
  os << "step,residual\n";
  for (std::size_t i = 0; i < stats.residual_trace.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", stats.residual_trace[i]);
    os << i << "," << buf << "\n";
  }
  return os.str();
}

}  // namespace deqff::deq
