#include "deqff/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace deqff::train {

using nlohmann::json;

void TrainConfig::validate() const {
  check(lambda_f >= 0.0 && lambda_e >= 0.0, "TrainConfig: loss weights must be nonnegative");
  check(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  check(epochs >= 1, "TrainConfig: epochs must be >= 1");
  check(lr_min <= lr_initial && lr_initial <= lr_max, "TrainConfig: need lr_min <= lr_initial <= lr_max");
  check(warmup_epochs >= 0.0, "TrainConfig: warmup_epochs must be >= 0");
  check(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
  check(grad_clip > 0.0, "TrainConfig: grad_clip must be positive");
  check(val_fraction >= 0.0 && val_fraction < 1.0, "TrainConfig: val_fraction in [0,1)");
}

LossValue loss(double E_pred, const std::vector<Vec3>& F_pred, double E_gt,
               const std::vector<Vec3>& F_gt, const TrainConfig& cfg) {
  check(F_pred.size() == F_gt.size(), "loss: force shape mismatch");
  LossValue out;
  const int n = int(F_pred.size());
  out.dF.assign(n, Vec3{});
  double fsum = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec3 d = F_pred[i] - F_gt[i];
    double nd = d.norm();
    fsum += nd;
    if (nd > 1e-300) out.dF[i] = d * (cfg.lambda_f / (n * nd));
  }
  out.force_term = n > 0 ? fsum / n : 0.0;
  double de = E_pred - E_gt;
  out.energy_term = std::abs(de);
  out.dE = de > 0.0 ? cfg.lambda_e : (de < 0.0 ? -cfg.lambda_e : 0.0);
  out.total = cfg.lambda_f * out.force_term + cfg.lambda_e * out.energy_term;
  return out;
}

double lr_schedule(long step, const ScheduleConfig& cfg) {
  check(step >= 0, "lr_schedule: step must be >= 0");
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    double t = double(step) / double(cfg.warmup_steps);
    return cfg.lr_initial + (cfg.lr_max - cfg.lr_initial) * t;
  }
  long rest = std::max<long>(cfg.total_steps - cfg.warmup_steps, 1);
  double t = double(std::min(step - cfg.warmup_steps, rest)) / double(rest);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * t));
}

void optimizer_step(eqnet::ModelParams& params, const grad::GradReport& grads,
                    OptimizerState& opt, double lr, const TrainConfig& cfg) {
  opt.step += 1;
  const double b1 = opt.beta1, b2 = opt.beta2;
  const double bc1 = 1.0 - std::pow(b1, double(opt.step));
  const double bc2 = 1.0 - std::pow(b2, double(opt.step));
  for (auto& arr : params.arrays) {
    auto& m = opt.m[arr.name];
    auto& v = opt.v[arr.name];
    if (m.empty()) m.assign(arr.v.size(), 0.0);
    if (v.empty()) v.assign(arr.v.size(), 0.0);
    auto git = grads.arrays.find(arr.name);
    const std::vector<double>* g = git != grads.arrays.end() ? &git->second : nullptr;
    if (g) check(g->size() == arr.v.size(), "optimizer_step: gradient shape mismatch");
    for (std::size_t i = 0; i < arr.v.size(); ++i) {
      double gi = g ? (*g)[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      arr.v[i] = arr.v[i] * (1.0 - lr * cfg.weight_decay) -
                 lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

namespace {

json model_cfg_json(const eqnet::ModelConfig& c) {
  return json{{"l_max", c.l_max},       {"channels", c.channels},
              {"heads", c.heads},       {"d_att", c.d_att},
              {"d_rad", c.d_rad},       {"d_head", c.d_head},
              {"num_basis", c.num_basis}, {"r_cut", c.r_cut},
              {"max_neighbors", c.max_neighbors}, {"n_layers", c.n_layers},
              {"path_drop", c.path_drop}, {"z_max", c.z_max},
              {"leaky_slope", c.leaky_slope}};
}

eqnet::ModelConfig model_cfg_from_json(const json& j) {
  eqnet::ModelConfig c;
  c.l_max = j.at("l_max");
  c.channels = j.at("channels");
  c.heads = j.at("heads");
  c.d_att = j.at("d_att");
  c.d_rad = j.at("d_rad");
  c.d_head = j.at("d_head");
  c.num_basis = j.at("num_basis");
  c.r_cut = j.at("r_cut");
  c.max_neighbors = j.at("max_neighbors");
  c.n_layers = j.at("n_layers");
  c.path_drop = j.at("path_drop");
  c.z_max = j.at("z_max");
  c.leaky_slope = j.at("leaky_slope");
  return c;
}

json solver_cfg_json(const deq::SolverConfig& c) {
  return json{{"solver", deq::to_string(c.solver)},
              {"eps_train", c.eps_train},
              {"eps_reuse", c.eps_reuse},
              {"max_steps", c.max_steps},
              {"anderson_memory", c.anderson_memory},
              {"anderson_beta", c.anderson_beta},
              {"correction_samples", c.correction_samples}};
}

deq::SolverConfig solver_cfg_from_json(const json& j) {
  deq::SolverConfig c;
  c.solver = deq::solver_from_string(j.at("solver"));
  c.eps_train = j.at("eps_train");
  c.eps_reuse = j.at("eps_reuse");
  c.max_steps = j.at("max_steps");
  c.anderson_memory = j.at("anderson_memory");
  c.anderson_beta = j.at("anderson_beta");
  c.correction_samples = j.at("correction_samples");
  return c;
}

json train_cfg_json(const TrainConfig& c) {
  return json{{"lambda_f", c.lambda_f},     {"lambda_e", c.lambda_e},
              {"batch_size", c.batch_size}, {"epochs", c.epochs},
              {"lr_initial", c.lr_initial}, {"lr_max", c.lr_max},
              {"lr_min", c.lr_min},         {"warmup_epochs", c.warmup_epochs},
              {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
              {"val_fraction", c.val_fraction}, {"seed", c.seed},
              {"threads", c.threads}};
}

TrainConfig train_cfg_from_json(const json& j) {
  TrainConfig c;
  c.lambda_f = j.at("lambda_f");
  c.lambda_e = j.at("lambda_e");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.lr_initial = j.at("lr_initial");
  c.lr_max = j.at("lr_max");
  c.lr_min = j.at("lr_min");
  c.warmup_epochs = j.at("warmup_epochs");
  c.weight_decay = j.at("weight_decay");
  c.grad_clip = j.at("grad_clip");
  c.val_fraction = j.at("val_fraction");
  c.seed = j.at("seed");
  c.threads = j.at("threads");
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Container c;
  json meta;
  meta["format_version"] = 1;
  meta["model"] = model_cfg_json(ck.params.cfg);
  meta["solver"] = solver_cfg_json(ck.solver);
  meta["train"] = train_cfg_json(ck.train_cfg);
  meta["energy_shift"] = ck.energy_shift;
  meta["epoch"] = ck.epoch;
  meta["rng_state"] = ck.rng_state;
  meta["opt_step"] = ck.opt.step;
  c.metadata_json = meta.dump();
  for (const auto& arr : ck.params.arrays)
    c.arrays.push_back({arr.name, {std::uint64_t(arr.v.size())}, arr.v});
  for (const auto& [name, v] : ck.opt.m)
    c.arrays.push_back({"opt.m." + name, {std::uint64_t(v.size())}, v});
  for (const auto& [name, v] : ck.opt.v)
    c.arrays.push_back({"opt.v." + name, {std::uint64_t(v.size())}, v});
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::string& path) {
  Container c = read_container(path);
  json meta = json::parse(c.metadata_json);
  Checkpoint ck{eqnet::ModelParams::make(model_cfg_from_json(meta.at("model"))), {}, 0.0, 0, "", {},
                {}};
  ck.solver = solver_cfg_from_json(meta.at("solver"));
  ck.train_cfg = train_cfg_from_json(meta.at("train"));
  ck.energy_shift = meta.at("energy_shift");
  ck.epoch = meta.at("epoch");
  ck.rng_state = meta.at("rng_state");
  ck.opt.step = meta.at("opt_step");
  for (auto& arr : ck.params.arrays) {
    const ArrayRecord* rec = c.find(arr.name);
    check(rec != nullptr, "checkpoint: missing parameter array " + arr.name);
    check(rec->data.size() == arr.v.size(),
          "checkpoint: layout mismatch for " + arr.name + " (file " +
              std::to_string(rec->data.size()) + ", model " + std::to_string(arr.v.size()) + ")");
    arr.v = rec->data;
  }
  for (const auto& rec : c.arrays) {
    if (rec.name.rfind("opt.m.", 0) == 0) ck.opt.m[rec.name.substr(6)] = rec.data;
    if (rec.name.rfind("opt.v.", 0) == 0) ck.opt.v[rec.name.substr(6)] = rec.data;
  }
  return ck;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, bool with_header_comment) {
  std::ostringstream os;
  if (with_header_comment) os << "# deqff training metrics\n";
  os << "epoch,split,force_mae,energy_mae,mean_steps,lr\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.epoch << "," << r.split << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.force_mae);
    os << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.energy_mae);
    os << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_steps);
    os << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.lr);
    os << buf << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct SampleOut {
  grad::GradReport report;
  double force_abs_err = 0.0;  // sum over atoms/components of |dF|
  long force_count = 0;
  double energy_abs_err = 0.0;
  int steps = 0;
};

SampleOut sample_gradient(const LabeledFrame& frame, double energy_shift,
                          const eqnet::ModelParams& params, const deq::SolverConfig& scfg,
                          const TrainConfig& tcfg, std::uint64_t mask_seed,
                          const std::string& where) {
  auto edges = graph::build_neighbor_list(frame.system, params.cfg.r_cut,
                                          params.cfg.max_neighbors);
  auto mask = eqnet::DropoutMask::sample(edges.size(), params.cfg.path_drop, mask_seed);
  deq::FThetaModel model(frame.system, edges, params, mask);

  deq::MapFn map = [&](const double* z, double* out) { model.eval(z, out); };
  FeatVec z0(model.dim());
  auto st = deq::solve(map, z0, scfg, scfg.eps_train, scfg.correction_samples);
  if (!st.converged) {
    std::ostringstream msg;
    msg << "train: forward solve unconverged at " << where << " (residual " << st.residual
        << " after " << st.step << " steps, tol " << scfg.eps_train << ")";
    throw CheckError(msg.str());
  }

  const double e_target = frame.energy - energy_shift;
  eqnet::HeadsCtx hctx;
  auto ef = model.run_heads(st.z.data(), hctx);
  LossValue lv = loss(ef.energy, ef.forces, e_target, frame.forces, tcfg);

  auto head_grads = params.zeros_like();
  FeatVec dl(model.dim());
  model.heads_vjp(lv.dE, lv.dF, st.z.data(), dl.data(), hctx, &head_grads);

  auto hooks = grad::make_model_hooks(model, st.z);
  grad::GradReport rep;
  try {
    rep = grad::ift_backward(dl, hooks, scfg);
  } catch (const CheckError& e) {
    throw CheckError(std::string(e.what()) + " at " + where);
  }
  rep.add_scaled(grad::to_report(std::move(head_grads)), 1.0);

  if (scfg.correction_samples > 0 && !st.sampled.empty()) {
    grad::LossFn lf = [&](double E, const std::vector<Vec3>& F, double& dE,
                          std::vector<Vec3>& dF) {
      LossValue v = loss(E, F, e_target, frame.forces, tcfg);
      dE = v.dE;
      dF = v.dF;
      return v.total;
    };
    rep.add_scaled(grad::correction_gradients(st.sampled, model, lf), 1.0);
  }

  SampleOut out;
  out.report = std::move(rep);
  out.steps = st.step;
  out.energy_abs_err = std::abs(ef.energy - e_target);
  for (std::size_t i = 0; i < ef.forces.size(); ++i) {
    Vec3 d = ef.forces[i] - frame.forces[i];
    out.force_abs_err += std::abs(d.x) + std::abs(d.y) + std::abs(d.z);
    out.force_count += 3;
  }
  return out;
}

struct EvalOut {
  double force_abs_err = 0.0;
  long force_count = 0;
  double energy_abs_err = 0.0;
  int steps = 0;
};

EvalOut eval_sample(const LabeledFrame& frame, double energy_shift,
                    const eqnet::ModelParams& params, const deq::SolverConfig& scfg) {
  auto r = deq::deq_forward(frame.system, params, scfg);
  EvalOut out;
  out.steps = r.stats.steps;
  out.energy_abs_err = std::abs(r.energy - (frame.energy - energy_shift));
  for (std::size_t i = 0; i < r.forces.size(); ++i) {
    Vec3 d = r.forces[i] - frame.forces[i];
    out.force_abs_err += std::abs(d.x) + std::abs(d.y) + std::abs(d.z);
    out.force_count += 3;
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TrainResult train_loop(const std::vector<LabeledFrame>& dataset, const eqnet::ModelConfig& mcfg,
                       const deq::SolverConfig& scfg, const TrainConfig& tcfg) {
  check(!dataset.empty(), "train_loop: empty dataset");
  mcfg.validate();
  scfg.validate();
  tcfg.validate();
  const int threads = tcfg.threads > 0 ? tcfg.threads : default_threads();

  // deterministic split, fixed by seed
  Rng rng(tcfg.seed);
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const int n_val = std::min<int>(int(dataset.size()) - 1,
                                  int(std::ceil(tcfg.val_fraction * double(dataset.size()))));
  std::vector<int> val_idx(order.begin(), order.begin() + n_val);
  std::vector<int> train_idx(order.begin() + n_val, order.end());
  check(!train_idx.empty(), "train_loop: no training samples after split");

  double energy_shift = 0.0;
  for (int i : train_idx) energy_shift += dataset[i].energy;
  energy_shift /= double(train_idx.size());

  // estimate mean degree for the embedding scale
  double avg_degree = 8.0;
  {
    auto edges = graph::build_neighbor_list(dataset[train_idx[0]].system, mcfg.r_cut,
                                            mcfg.max_neighbors);
    avg_degree = std::max(1.0, double(edges.size()) / double(dataset[train_idx[0]].system.size()));
  }

  auto params = eqnet::ModelParams::make(mcfg);
  params.init(rng, avg_degree);
  OptimizerState opt;

  const long steps_per_epoch =
      long((train_idx.size() + tcfg.batch_size - 1) / tcfg.batch_size);
  ScheduleConfig sched{tcfg.lr_initial, tcfg.lr_max, tcfg.lr_min,
                       long(tcfg.warmup_epochs * double(steps_per_epoch)),
                       steps_per_epoch * tcfg.epochs};

  TrainResult result;

  auto run_val = [&](long epoch, double lr) {
    if (val_idx.empty()) return 0.0;
    std::vector<EvalOut> outs(val_idx.size());
    parallel_for(val_idx.size(), threads, [&](std::size_t i) {
      outs[i] = eval_sample(dataset[val_idx[i]], energy_shift, params, scfg);
    });
    double fa = 0.0, ea = 0.0, steps = 0.0;
    long fc = 0;
    for (auto& o : outs) {
      fa += o.force_abs_err;
      fc += o.force_count;
      ea += o.energy_abs_err;
      steps += o.steps;
    }
    MetricsRow row{epoch, "val", fc ? fa / fc : 0.0, ea / double(val_idx.size()),
                   steps / double(val_idx.size()), lr};
    result.metrics.push_back(row);
    return row.force_mae;
  };

  result.untrained_val_force_mae = run_val(0, lr_schedule(0, sched));

  long global_step = 0;
  for (long epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double fa = 0.0, ea = 0.0;
    long fc = 0;
    std::vector<double> epoch_steps;
    double lr = lr_schedule(global_step, sched);
    for (std::size_t b = 0; b < train_idx.size(); b += tcfg.batch_size) {
      const std::size_t bsz = std::min<std::size_t>(tcfg.batch_size, train_idx.size() - b);
      std::vector<SampleOut> outs(bsz);
      parallel_for(bsz, threads, [&](std::size_t slot) {
        const int di = train_idx[b + slot];
        std::ostringstream where;
        where << "epoch " << epoch << " step " << (b / tcfg.batch_size) << " sample " << di;
        outs[slot] = sample_gradient(
            dataset[di], energy_shift, params, scfg, tcfg,
            derive_seed(tcfg.seed, std::uint64_t(epoch), b / tcfg.batch_size, slot),
            where.str());
      });
      grad::GradReport batch;
      for (auto& o : outs) {
        batch.add_scaled(o.report, 1.0 / double(bsz));
        fa += o.force_abs_err;
        fc += o.force_count;
        ea += o.energy_abs_err;
        epoch_steps.push_back(double(o.steps));
      }
      check(batch.finite(), "train_loop: non-finite gradient encountered");
      double gnorm = std::sqrt(batch.sq_norm());
      if (gnorm > tcfg.grad_clip) batch.scale(tcfg.grad_clip / gnorm);
      lr = lr_schedule(global_step, sched);
      optimizer_step(params, batch, opt, lr, tcfg);
      ++global_step;
    }
    double mean_steps = epoch_steps.empty()
                            ? 0.0
                            : std::accumulate(epoch_steps.begin(), epoch_steps.end(), 0.0) /
                                  double(epoch_steps.size());
    result.metrics.push_back(MetricsRow{epoch, "train", fc ? fa / fc : 0.0,
                                        ea / double(epoch_steps.size()), mean_steps, lr});
    result.epoch_step_median.push_back(median(epoch_steps));
    result.final_val_force_mae = run_val(epoch, lr);
  }

  std::ostringstream rs;
  rs << rng.state();
  result.checkpoint =
      Checkpoint{std::move(params), std::move(opt), energy_shift, tcfg.epochs, rs.str(), scfg,
                 tcfg};
  return result;
}

}  // namespace deqff::train
