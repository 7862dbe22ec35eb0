#pragma once

#include <map>
#include <string>
#include <vector>

#include "deqff/checkpoint.hpp"
#include "deqff/grad.hpp"

namespace deqff::train {

struct TrainConfig {
  double lambda_f = 80.0;
  double lambda_e = 1.0;
  int batch_size = 4;
  int epochs = 100;
  double lr_initial = 1e-6;
  double lr_max = 5e-4;
  double lr_min = 1e-6;
  double warmup_epochs = 10.0;
  double weight_decay = 5e-3;
  double grad_clip = 1000.0;
  double val_fraction = 0.05;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 -> default_threads()

  void validate() const;
};

struct LossValue {
  double total = 0.0;
  double force_term = 0.0;   // mean over atoms of per-atom force-error norm
  double energy_term = 0.0;  // |dE|
  double dE = 0.0;           // exact cotangents
  std::vector<Vec3> dF;
};

// total = lambda_f * mean_i |F_pred_i - F_gt_i| + lambda_e * |E_pred - E_gt|
LossValue loss(double E_pred, const std::vector<Vec3>& F_pred, double E_gt,
               const std::vector<Vec3>& F_gt, const TrainConfig& cfg);

struct ScheduleConfig {
  double lr_initial, lr_max, lr_min;
  long warmup_steps;
  long total_steps;
};

// linear from initial to max over warmup, cosine from max to min afterwards
double lr_schedule(long step, const ScheduleConfig& cfg);

// AdamW moments, keyed by parameter-array name
struct OptimizerState {
  std::map<std::string, std::vector<double>> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// decoupled weight decay: theta *= (1 - lr*wd) before the moment update
void optimizer_step(eqnet::ModelParams& params, const grad::GradReport& grads,
                    OptimizerState& opt, double lr, const TrainConfig& cfg);

struct LabeledFrame {
  graph::AtomicSystem system;
  double energy = 0.0;
  std::vector<Vec3> forces;
};

struct Checkpoint {
  eqnet::ModelParams params;
  OptimizerState opt;
  double energy_shift = 0.0;
  long epoch = 0;
  std::string rng_state;
  deq::SolverConfig solver;
  TrainConfig train_cfg;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

struct MetricsRow {
  long epoch;
  std::string split;  // "train" or "val"
  double force_mae;   // per-component MAE
  double energy_mae;
  double mean_steps;
  double lr;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows, bool with_header_comment = true);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
  std::vector<double> epoch_step_median;  // forward solver steps per train epoch
  double untrained_val_force_mae = 0.0;
  double final_val_force_mae = 0.0;
};

// Full training loop: per sample deq_forward from zero init at eps_train with
// recurrent dropout, IFT backward plus sparse fixed-point corrections,
// gradient clipping, AdamW. Aborting with a diagnostic on any unconverged
// forward or adjoint solve.
TrainResult train_loop(const std::vector<LabeledFrame>& dataset, const eqnet::ModelConfig& mcfg,
                       const deq::SolverConfig& scfg, const TrainConfig& tcfg);

}  // namespace deqff::train
