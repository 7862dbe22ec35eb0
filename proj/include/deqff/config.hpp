#pragma once

#include <string>

#include "deqff/deq.hpp"
#include "deqff/train.hpp"

namespace deqff::config {

// Full experiment configuration, readable from a plain-text file of dotted
// keys (`section.key = value`, one per line, '#' comments). Unknown keys are
// rejected; parse -> serialize -> parse is a fixed point.
struct RunConfig {
  eqnet::ModelConfig model;
  deq::SolverConfig solver;
  train::TrainConfig train;
  // data generation / MD defaults
  std::string potential = "ch4";
  double dt = 0.5;          // fs
  double temperature = 300.0;  // K

  void validate() const;
};

RunConfig parse_config(const std::string& text);
std::string serialize_config(const RunConfig& cfg);

RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& cfg);

}  // namespace deqff::config
