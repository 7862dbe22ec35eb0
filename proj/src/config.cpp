#include "deqff/config.hpp"

#include "deqff/sim.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace deqff::config {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_num(const std::string& s, const std::string& key);

template <>
double parse_num<double>(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("config: bad number for " + key + ": " + s);
  return v;
}

template <>
int parse_num<int>(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  long v = std::stol(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("config: bad integer for " + key + ": " + s);
  return int(v);
}

template <>
std::uint64_t parse_num<std::uint64_t>(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  unsigned long long v = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("config: bad integer for " + key + ": " + s);
  return v;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    auto num = [&v](const std::string& key, auto getter) {
      using T = std::remove_reference_t<decltype(getter(std::declval<RunConfig&>()))>;
      v.push_back(
          {key,
           [getter](const RunConfig& c) {
             if constexpr (std::is_same_v<T, double>)
               return fmt_double(getter(const_cast<RunConfig&>(c)));
             else
               return std::to_string(getter(const_cast<RunConfig&>(c)));
           },
           [getter, key](RunConfig& c, const std::string& s) {
             getter(c) = parse_num<T>(s, key);
           }});
    };
    num("model.l_max", [](RunConfig& c) -> int& { return c.model.l_max; });
    num("model.channels", [](RunConfig& c) -> int& { return c.model.channels; });
    num("model.heads", [](RunConfig& c) -> int& { return c.model.heads; });
    num("model.d_att", [](RunConfig& c) -> int& { return c.model.d_att; });
    num("model.d_rad", [](RunConfig& c) -> int& { return c.model.d_rad; });
    num("model.d_head", [](RunConfig& c) -> int& { return c.model.d_head; });
    num("model.num_basis", [](RunConfig& c) -> int& { return c.model.num_basis; });
    num("model.r_cut", [](RunConfig& c) -> double& { return c.model.r_cut; });
    num("model.max_neighbors", [](RunConfig& c) -> int& { return c.model.max_neighbors; });
    num("model.n_layers", [](RunConfig& c) -> int& { return c.model.n_layers; });
    num("model.path_drop", [](RunConfig& c) -> double& { return c.model.path_drop; });
    num("model.z_max", [](RunConfig& c) -> int& { return c.model.z_max; });
    num("model.leaky_slope", [](RunConfig& c) -> double& { return c.model.leaky_slope; });
    v.push_back({"deq.solver",
                 [](const RunConfig& c) { return deq::to_string(c.solver.solver); },
                 [](RunConfig& c, const std::string& s) {
                   c.solver.solver = deq::solver_from_string(s);
                 }});
    num("deq.eps_train", [](RunConfig& c) -> double& { return c.solver.eps_train; });
    num("deq.eps_reuse", [](RunConfig& c) -> double& { return c.solver.eps_reuse; });
    num("deq.max_steps", [](RunConfig& c) -> int& { return c.solver.max_steps; });
    num("deq.anderson_memory", [](RunConfig& c) -> int& { return c.solver.anderson_memory; });
    num("deq.anderson_beta", [](RunConfig& c) -> double& { return c.solver.anderson_beta; });
    num("deq.correction_samples",
        [](RunConfig& c) -> int& { return c.solver.correction_samples; });
    num("train.lambda_f", [](RunConfig& c) -> double& { return c.train.lambda_f; });
    num("train.lambda_e", [](RunConfig& c) -> double& { return c.train.lambda_e; });
    num("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
    num("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; });
    num("train.lr_initial", [](RunConfig& c) -> double& { return c.train.lr_initial; });
    num("train.lr_max", [](RunConfig& c) -> double& { return c.train.lr_max; });
    num("train.lr_min", [](RunConfig& c) -> double& { return c.train.lr_min; });
    num("train.warmup_epochs", [](RunConfig& c) -> double& { return c.train.warmup_epochs; });
    num("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
    num("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
    num("train.val_fraction", [](RunConfig& c) -> double& { return c.train.val_fraction; });
    num("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
    num("train.threads", [](RunConfig& c) -> int& { return c.train.threads; });
    v.push_back({"sim.potential", [](const RunConfig& c) { return c.potential; },
                 [](RunConfig& c, const std::string& s) { c.potential = s; }});
    num("sim.dt", [](RunConfig& c) -> double& { return c.dt; });
    num("sim.temperature", [](RunConfig& c) -> double& { return c.temperature; });
    return v;
  }();
  return f;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  solver.validate();
  train.validate();
  check(dt > 0.0, "RunConfig: sim.dt must be positive");
  check(temperature >= 0.0, "RunConfig: sim.temperature must be >= 0");
  sim::make_preset(potential);  // throws on unknown name
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected 'key = value' at line " +
                                  std::to_string(lineno));
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : fields()) {
      if (f.key == key) {
        f.set(cfg, val);
        found = true;
        break;
      }
    }
    if (!found)
      throw std::invalid_argument("config: unknown key '" + key + "' at line " +
                                  std::to_string(lineno));
  }
  cfg.validate();
  return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(cfg) << "\n";
  return os.str();
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path + " for writing");
  f << serialize_config(cfg);
}

}  // namespace deqff::config
