#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dgmfc/mfcp.hpp"
#include "dgmfc/network.hpp"
#include "dgmfc/solver.hpp"

namespace dgmfc {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Full run description parsed from a flat key = value file with section
/// prefixes (problem., arch., train.). Unknown keys are rejected by name.
struct RunConfig {
  MfcpSpec problem;
  NetworkArchitecture arch;
  TrainingConfig train;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (kv.count(key)) throw ConfigError("duplicate key: " + key);
    kv[key] = val;
  }

  RunConfig cfg;
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) return std::string();
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto take_int = [&](const std::string& key, int dflt) {
    const std::string v = take(key);
    return v.empty() ? dflt : std::stoi(v);
  };
  auto take_double = [&](const std::string& key, double dflt) {
    const std::string v = take(key);
    return v.empty() ? dflt : std::stod(v);
  };

  cfg.problem.d = take_int("problem.d", 2);
  cfg.problem.T = take_double("problem.T", 1.0);
  cfg.problem.M = take_double("problem.M", 1.0);
  {
    std::string cm = take("problem.cost_matrix");
    if (cm.empty() || cm == "ones") {
      cfg.problem.c = MatrixXd::Ones(cfg.problem.d, cfg.problem.d);
    } else {
      std::istringstream cs(cm);
      cfg.problem.c.resize(cfg.problem.d, cfg.problem.d);
      for (int i = 0; i < cfg.problem.d; ++i)
        for (int j = 0; j < cfg.problem.d; ++j)
          if (!(cs >> cfg.problem.c(i, j)))
            throw ConfigError("problem.cost_matrix needs d*d entries or 'ones'");
    }
  }

  cfg.arch.state_count = cfg.problem.d;
  {
    const std::string kind = take("arch.kind");
    if (kind.empty() || kind == "gated")
      cfg.arch.kind = LayerKind::GatedDgm;
    else if (kind == "plain")
      cfg.arch.kind = LayerKind::PlainTanh;
    else
      throw ConfigError("arch.kind must be 'gated' or 'plain', got: " + kind);
  }
  cfg.arch.depth = take_int("arch.depth", 4);
  cfg.arch.width = take_int("arch.width", 8);

  {
    const std::string loss = take("train.loss");
    if (loss.empty() || loss == "uniform")
      cfg.train.loss = LossKind::Uniform;
    else if (loss == "l2")
      cfg.train.loss = LossKind::L2;
    else
      throw ConfigError("train.loss must be 'uniform' or 'l2', got: " + loss);
  }
  cfg.train.samples = take_int("train.samples", 10000);
  cfg.train.epochs = take_int("train.epochs", 200);
  cfg.train.steps_per_epoch = take_int("train.steps_per_epoch", 10);
  cfg.train.peak_lr = take_double("train.peak_lr", 0.0008);
  cfg.train.weight_decay = take_double("train.weight_decay", 1e-4);
  cfg.train.clip_norm = take_double("train.clip_norm", 1.0);
  cfg.train.tau_scale = take_double("train.tau_scale", 0.01);
  cfg.train.max_active = take_int("train.max_active", 1024);
  cfg.train.delta = take_double("train.delta", 1e-6);
  {
    const std::string rs = take("train.resample");
    if (rs.empty() || rs == "per_epoch")
      cfg.train.resample = ResamplePolicy::PerEpoch;
    else if (rs == "per_step")
      cfg.train.resample = ResamplePolicy::PerStep;
    else
      throw ConfigError("train.resample must be 'per_epoch' or 'per_step', got: " + rs);
  }
  cfg.seed = static_cast<std::uint64_t>(take_int("seed", 0));
  cfg.train.seed = cfg.seed;

  if (!kv.empty()) throw ConfigError("unknown config key: " + kv.begin()->first);
  try {
    cfg.problem.validate();
    cfg.arch.validate();
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config: " + path);
  return parse_run_config(in);
}

}  // namespace dgmfc
