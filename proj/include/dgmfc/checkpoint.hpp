#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dgmfc/mfcp.hpp"
#include "dgmfc/network.hpp"

namespace dgmfc {

/// Everything needed to re-instantiate a trained approximator.
struct Checkpoint {
  MfcpSpec spec;
  NetworkArchitecture arch;
  VectorXd theta;
};

inline const char* layer_kind_name(LayerKind k) {
  return k == LayerKind::PlainTanh ? "plain" : "gated";
}

inline LayerKind layer_kind_from(const std::string& s) {
  if (s == "plain") return LayerKind::PlainTanh;
  if (s == "gated") return LayerKind::GatedDgm;
  throw std::invalid_argument("unknown layer kind: " + s);
}

/// Text format: a fixed header (kind, depth, width, d, T, M, cost matrix)
/// followed by one parameter per line at full precision.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.precision(17);
  out << "dgmfc-checkpoint 1\n";
  out << "kind " << layer_kind_name(ck.arch.kind) << "\n";
  out << "depth " << ck.arch.depth << "\n";
  out << "width " << ck.arch.width << "\n";
  out << "states " << ck.spec.d << "\n";
  out << "horizon " << ck.spec.T << "\n";
  out << "rate_bound " << ck.spec.M << "\n";
  out << "cost_matrix";
  for (int i = 0; i < ck.spec.d; ++i)
    for (int j = 0; j < ck.spec.d; ++j) out << " " << ck.spec.c(i, j);
  out << "\n";
  out << "params " << ck.theta.size() << "\n";
  for (Eigen::Index k = 0; k < ck.theta.size(); ++k) out << ck.theta[k] << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "dgmfc-checkpoint" || version != 1)
    throw std::runtime_error("not a dgmfc checkpoint: " + path);
  Checkpoint ck;
  std::string key;
  Eigen::Index params = -1;
  while (in >> key) {
    if (key == "kind") {
      std::string v;
      in >> v;
      ck.arch.kind = layer_kind_from(v);
    } else if (key == "depth") {
      in >> ck.arch.depth;
    } else if (key == "width") {
      in >> ck.arch.width;
    } else if (key == "states") {
      in >> ck.spec.d;
      ck.arch.state_count = ck.spec.d;
    } else if (key == "horizon") {
      in >> ck.spec.T;
    } else if (key == "rate_bound") {
      in >> ck.spec.M;
    } else if (key == "cost_matrix") {
      ck.spec.c.resize(ck.spec.d, ck.spec.d);
      for (int i = 0; i < ck.spec.d; ++i)
        for (int j = 0; j < ck.spec.d; ++j) in >> ck.spec.c(i, j);
    } else if (key == "params") {
      in >> params;
      ck.theta.resize(params);
      for (Eigen::Index k = 0; k < params; ++k) in >> ck.theta[k];
      break;
    } else {
      throw std::runtime_error("unknown checkpoint key: " + key);
    }
  }
  if (params < 0 || !in) throw std::runtime_error("truncated checkpoint: " + path);
  ck.spec.validate();
  ck.arch.validate();
  if (ck.theta.size() != ck.arch.param_count())
    throw std::runtime_error("checkpoint parameter count does not match architecture");
  return ck;
}

}  // namespace dgmfc
