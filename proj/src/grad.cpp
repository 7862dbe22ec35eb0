#include "deqff/grad.hpp"

#include <cmath>
#include <memory>
#include <sstream>

namespace deqff::grad {

void GradReport::add_scaled(const GradReport& other, double s) {
  for (const auto& [name, v] : other.arrays) {
    auto& dst = arrays[name];
    if (dst.empty()) dst.assign(v.size(), 0.0);
    check(dst.size() == v.size(), "GradReport::add_scaled: size mismatch for " + name);
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] += s * v[i];
  }
  correction_terms += other.correction_terms;
}

void GradReport::scale(double s) {
  for (auto& [name, v] : arrays)
    for (double& x : v) x *= s;
}

double GradReport::sq_norm() const {
  double t = 0.0;
  for (const auto& [name, v] : arrays)
    for (double x : v) t += x * x;
  return t;
}

bool GradReport::finite() const {
  for (const auto& [name, v] : arrays)
    for (double x : v)
      if (!std::isfinite(x)) return false;
  return true;
}

GradReport to_report(eqnet::ModelParams&& grads) {
  GradReport rep;
  for (auto& arr : grads.arrays) rep.arrays.emplace(arr.name, std::move(arr.v));
  return rep;
}

void apply_report(const GradReport& rep, eqnet::ModelParams& out, double scale) {
  for (auto& arr : out.arrays) {
    auto it = rep.arrays.find(arr.name);
    if (it == rep.arrays.end()) continue;
    check(it->second.size() == arr.v.size(), "apply_report: size mismatch for " + arr.name);
    for (std::size_t i = 0; i < arr.v.size(); ++i) arr.v[i] += scale * it->second[i];
  }
}

AdjointHooks make_model_hooks(const deq::FThetaModel& model, const FeatVec& z_star) {
  check(int(z_star.size()) == model.dim(), "make_model_hooks: z_star size mismatch");
  auto ctx = std::make_shared<deq::FThetaModel::Ctx>();
  // one linearization pass; the output itself is discarded
  std::vector<double> out(z_star.size());
  model.eval_with_ctx(z_star.data(), out.data(), *ctx);

  AdjointHooks hooks;
  hooks.dim = model.dim();
  hooks.vjp_z = [&model, ctx](const double* u, double* dz) {
    std::fill(dz, dz + model.dim(), 0.0);
    model.vjp_features(*ctx, u, dz);
  };
  hooks.vjp_theta = [&model, ctx](const double* u, GradReport& rep) {
    eqnet::ModelParams g = model.params().zeros_like();
    model.vjp_params(*ctx, u, g);
    rep.add_scaled(to_report(std::move(g)), 1.0);
  };
  return hooks;
}

GradReport ift_backward(const FeatVec& dL_dz, AdjointHooks& hooks,
                        const deq::SolverConfig& cfg) {
  check(int(dL_dz.size()) == hooks.dim, "ift_backward: cotangent size mismatch");
  deq::MapFn adjoint_map = [&](const double* g, double* out) {
    hooks.run_vjp_z(g, out);
    for (int i = 0; i < hooks.dim; ++i) out[i] += dL_dz[i];
  };
  FeatVec g0(dL_dz.size());
  deq::FixedPointState st = deq::solve(adjoint_map, g0, cfg, cfg.eps_train, 0);
  if (!st.converged) {
    std::ostringstream msg;
    msg << "ift_backward: adjoint solve unconverged after " << st.step
        << " steps (residual " << st.residual << ", tol " << cfg.eps_train << ")";
    throw CheckError(msg.str());
  }
  GradReport rep;
  hooks.run_vjp_theta(st.z.data(), rep);
  rep.adjoint_steps = st.step;
  rep.adjoint_residual = st.residual;
  rep.adjoint_converged = st.converged;
  return rep;
}

GradReport phantom_1step(const FeatVec& dL_dz, AdjointHooks& hooks) {
  check(int(dL_dz.size()) == hooks.dim, "phantom_1step: cotangent size mismatch");
  GradReport rep;
  hooks.run_vjp_theta(dL_dz.data(), rep);
  rep.adjoint_converged = true;  // nothing to solve
  return rep;
}

GradReport correction_gradients(const std::vector<FeatVec>& sampled,
                                const deq::FThetaModel& model, const LossFn& loss_fn) {
  GradReport total;
  for (const FeatVec& z : sampled) {
    check(int(z.size()) == model.dim(), "correction_gradients: sample size mismatch");
    eqnet::HeadsCtx hctx;
    auto ef = model.run_heads(z.data(), hctx);
    double dE = 0.0;
    std::vector<Vec3> dF(ef.forces.size());
    loss_fn(ef.energy, ef.forces, dE, dF);

    eqnet::ModelParams g = model.params().zeros_like();
    FeatVec dz(z.size());
    model.heads_vjp(dE, dF, z.data(), dz.data(), hctx, &g);

    // one phantom application, treating this iterate as the fixed point
    deq::FThetaModel::Ctx ctx;
    std::vector<double> out(z.size());
    model.eval_with_ctx(z.data(), out.data(), ctx);
    model.vjp_params(ctx, dz.data(), g);

    total.add_scaled(to_report(std::move(g)), 1.0);
    total.correction_terms += 1;
  }
  return total;
}

}  // namespace deqff::grad
