#pragma once

#include <functional>
#include <map>
#include <string>

#include "deqff/deq.hpp"

namespace deqff::grad {

// Named gradient arrays plus adjoint-solver bookkeeping.
struct GradReport {
  std::map<std::string, std::vector<double>> arrays;
  int adjoint_steps = 0;
  double adjoint_residual = 0.0;
  bool adjoint_converged = false;
  int correction_terms = 0;

  void add_scaled(const GradReport& other, double s);
  void scale(double s);
  double sq_norm() const;
  bool finite() const;
};

// convert model-shaped gradients to/from the named map
GradReport to_report(eqnet::ModelParams&& grads);
void apply_report(const GradReport& rep, eqnet::ModelParams& out, double scale);  // out += s*rep

// Vector-Jacobian hooks of the fixed-point map at a linearization point.
// vjp_z overwrites `out` with u^T df/dz; vjp_theta accumulates u^T df/dtheta
// into the report. Call counters support cost assertions.
struct AdjointHooks {
  int dim = 0;
  std::function<void(const double* u, double* out)> vjp_z;
  std::function<void(const double* u, GradReport& rep)> vjp_theta;
  int vjp_z_calls = 0;
  int vjp_theta_calls = 0;

  void run_vjp_z(const double* u, double* out) {
    ++vjp_z_calls;
    vjp_z(u, out);
  }
  void run_vjp_theta(const double* u, GradReport& rep) {
    ++vjp_theta_calls;
    vjp_theta(u, rep);
  }
};

// Hooks bound to a model sample, linearized at z_star. Builds one forward
// context; repeated vjp calls reuse it, so retained state is independent of
// how many solver steps produced z_star.
AdjointHooks make_model_hooks(const deq::FThetaModel& model, const FeatVec& z_star);

// Implicit-function-theorem backward: solves g = g (df/dz) + dL/dz with the
// configured fixed-point solver at eps_train, then applies vjp_theta once.
// Throws if the adjoint solve does not converge.
GradReport ift_backward(const FeatVec& dL_dz, AdjointHooks& hooks, const deq::SolverConfig& cfg);

// 1-step (phantom) gradient: vjp_theta applied directly to dL/dz.
GradReport phantom_1step(const FeatVec& dL_dz, AdjointHooks& hooks);

// loss_fn fills the cotangents and returns the loss value
using LossFn =
    std::function<double(double E, const std::vector<Vec3>& F, double& dE, std::vector<Vec3>& dF)>;

// Sparse fixed-point correction: each sampled iterate is pushed through the
// heads and one phantom application as if it were the final fixed point; the
// contributions are summed with unit weight.
GradReport correction_gradients(const std::vector<FeatVec>& sampled,
                                const deq::FThetaModel& model, const LossFn& loss_fn);

}  // namespace deqff::grad
