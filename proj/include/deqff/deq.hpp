#pragma once

#include <functional>
#include <optional>

#include "deqff/eqnet.hpp"

namespace deqff::deq {

using eqnet::DropoutMask;

enum class SolverKind { anderson, broyden, picard };

SolverKind solver_from_string(const std::string& s);
std::string to_string(SolverKind k);

struct SolverConfig {
  SolverKind solver = SolverKind::anderson;
  double eps_train = 1e-4;
  double eps_reuse = 1e-1;
  int max_steps = 40;
  int anderson_memory = 5;   // m
  double anderson_beta = 1.0;
  int correction_samples = 3;

  void validate() const;
};

// Raised when a solve produces a non-finite residual or runaway growth.
struct SolverDivergence : std::runtime_error {
  int step;
  SolverDivergence(const std::string& msg, int step_) : std::runtime_error(msg), step(step_) {}
};

// Relative residual uses a floored denominator so the z=0 first iterate is
// well defined.
inline constexpr double kResidualFloor = 1e-8;

struct FixedPointState {
  FeatVec z;                    // iterate whose residual is reported below
  int step = 0;                 // completed update steps
  int map_evals = 0;
  double residual = 0.0;        // relative: |f(z)-z| / max(|z|, floor)
  bool converged = false;
  std::vector<double> residual_trace;  // one entry per map evaluation
  int picard_fallbacks = 0;
  std::vector<FeatVec> sampled;  // intermediate iterates for the correction loss
  std::vector<int> sampled_steps;
};

using MapFn = std::function<void(const double* z, double* out)>;

// Per-node renormalized input injection:
//   out_i = (z_i + x_i) * |x_i| / |z_i + x_i|
// (flat 2-norm over one node's components). If |z_i + x_i| < 1e-12 the node
// degenerates to out_i = x_i.
void input_inject(const double* z, const double* x, int n_nodes, int node_dim, double* out);

struct InjectCtx {
  std::vector<double> w;        // z + x
  std::vector<double> nx, nw;   // per-node norms
  int n_nodes = 0, node_dim = 0;
};
void input_inject_fwd(const double* z, const double* x, int n_nodes, int node_dim, double* out,
                      InjectCtx& ctx);
// accumulates into dz and (when not null) dx
void input_inject_bwd(const double* u, const InjectCtx& ctx, const double* x, double* dz,
                      double* dx);

// Fixed-point solvers. `tol` is the relative-residual stopping threshold;
// when collect_samples > 0, intermediate iterates near the uniform quarter
// points of the realized trajectory are recorded through a bounded
// stride-doubling snapshot buffer.
FixedPointState anderson_solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg,
                               double tol, int collect_samples = 0);
FixedPointState broyden_solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg,
                              double tol, int collect_samples = 0);
FixedPointState picard_solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg,
                             double tol, int collect_samples = 0);
FixedPointState solve(const MapFn& map, const FeatVec& z0, const SolverConfig& cfg, double tol,
                      int collect_samples = 0);

// The DEQ map f(z, x) = layers(inject(z, x)) bound to one sample: the edge
// caches, the embedding injection and the dropout mask are fixed at
// construction and shared by every evaluation.
class FThetaModel {
 public:
  FThetaModel(const graph::AtomicSystem& system, const graph::EdgeList& edges,
              const eqnet::ModelParams& params, DropoutMask mask);

  int n_nodes() const { return ec_.n_atoms; }
  int node_dim() const { return params_->cfg.feat_dim(); }
  int dim() const { return n_nodes() * node_dim(); }
  const eqnet::EdgeCache& edge_cache() const { return ec_; }
  const DropoutMask& mask() const { return mask_; }
  const eqnet::ModelParams& params() const { return *params_; }
  const std::vector<double>& x_tilde() const { return x_; }
  const graph::AtomicSystem& system() const { return *system_; }

  struct Ctx {
    InjectCtx inject;
    std::vector<eqnet::LayerCtx> layers;
    std::vector<double> scratch;  // N*D working buffer
  };

  // plain evaluation; reuses an internal scratch context
  void eval(const double* z, double* out) const;
  // evaluation that retains everything layer_backward needs
  void eval_with_ctx(const double* z, double* out, Ctx& ctx) const;
  // u^T df/dz at the linearization point captured in ctx; accumulates into dz
  void vjp_features(const Ctx& ctx, const double* u, double* dz) const;
  // u^T df/dtheta (including the embedding through the injection); also
  // produces the feature cotangent as a byproduct when dz != nullptr
  void vjp_params(const Ctx& ctx, const double* u, eqnet::ModelParams& grads,
                  double* dz = nullptr) const;

  eqnet::EnergyForces run_heads(const double* z, eqnet::HeadsCtx& hctx) const;
  void heads_vjp(double dE, const std::vector<Vec3>& dF, const double* z, double* dz,
                 const eqnet::HeadsCtx& hctx, eqnet::ModelParams* grads) const;

 private:
  const graph::AtomicSystem* system_;
  const eqnet::ModelParams* params_;
  DropoutMask mask_;
  eqnet::EdgeCache ec_;
  std::vector<eqnet::LayerRadialCache> radial_;
  eqnet::EmbedCtx embed_ctx_;
  std::vector<double> x_;  // injection, N*D
  mutable Ctx scratch_;

  friend class FThetaGrad;
  const eqnet::EmbedCtx& embed_ctx() const { return embed_ctx_; }
};

struct DeqStats {
  int steps = 0;
  int map_evals = 0;
  double residual = 0.0;
  bool converged = false;
  double tol_used = 0.0;
  bool reuse_used = false;
  bool reuse_rejected = false;
  int picard_fallbacks = 0;
  double wall_seconds = 0.0;  // solver loop only
  std::vector<double> residual_trace;
};

struct DeqResult {
  double energy = 0.0;
  std::vector<Vec3> forces;
  FeatVec z_star;
  DeqStats stats;
  std::vector<FeatVec> sampled;
  std::vector<int> sampled_steps;
};

// Full DEQ forward: embed, solve, heads. Zero init when training or when no
// (usable) reuse state is given; otherwise warm start from `reuse` at the
// relaxed eps_reuse tolerance. Unconverged solves still return, with
// stats.converged = false (training treats that as fatal, inference logs).
DeqResult deq_forward(const graph::AtomicSystem& system, const eqnet::ModelParams& params,
                      const SolverConfig& cfg, const FeatVec* reuse = nullptr,
                      const DropoutMask* mask = nullptr, bool training = false);

// Writes (step, residual) rows for one solve; consumed by the sweep CLI.
std::string stats_csv(const DeqStats& stats);

}  // namespace deqff::deq
