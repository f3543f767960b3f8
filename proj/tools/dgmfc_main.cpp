// Command-line front end: train value-function approximators, export value
// surfaces, run the grid oracle, compare network vs oracle, and run N-agent
// Monte Carlo experiments. All artifacts are CSV files.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dgmfc/checkpoint.hpp"
#include "dgmfc/config.hpp"
#include "dgmfc/mfcp.hpp"
#include "dgmfc/network.hpp"
#include "dgmfc/oracle.hpp"
#include "dgmfc/simplex.hpp"
#include "dgmfc/solver.hpp"

namespace fs = std::filesystem;
using namespace dgmfc;

namespace {

constexpr const char* kVersion = "dgmfc 1.0.0";
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

void apply_thread_cap() {
  if (const char* env = std::getenv("DGM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::string& config_echo, std::uint64_t seed, double seconds,
                    const std::vector<std::string>& artifacts) {
  std::ofstream out(dir / "manifest.txt");
  out << "version " << kVersion << "\n";
  out << "command " << command << "\n";
  out << "seed " << seed << "\n";
  out << "wall_seconds " << seconds << "\n";
  for (const auto& a : artifacts) out << "artifact " << a << "\n";
  out << "config-begin\n" << config_echo << "config-end\n";
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_train(const std::string& config_path, const std::string& out_dir, long seed_override) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (seed_override >= 0) {
    cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.train.seed = cfg.seed;
  }
  fs::create_directories(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  try {
    result = train(cfg.problem, cfg.arch, cfg.train);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  {
    std::ofstream loss(fs::path(out_dir) / "loss.csv");
    loss.precision(12);
    loss << "epoch,pde_loss,terminal_loss,combined_loss,seconds\n";
    for (const auto& r : result.history)
      loss << r.epoch << "," << r.pde_loss << "," << r.terminal_loss << ","
           << r.combined_loss << "," << r.seconds << "\n";
  }
  save_checkpoint((fs::path(out_dir) / "checkpoint.txt").string(),
                  Checkpoint{cfg.problem, cfg.arch, result.theta});
  write_manifest(out_dir, "train", slurp(config_path), cfg.seed, secs,
                 {"loss.csv", "checkpoint.txt"});
  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::cout << "trained " << result.history.size() << " epochs in " << secs
              << " s; final combined loss " << last.combined_loss
              << (result.early_stopped ? " (early stop)" : "") << "\n";
  }
  return 0;
}

int cmd_surface(const std::string& checkpoint_path, int resolution, const std::string& out_dir) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(checkpoint_path);
  } catch (const std::exception& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (ck.spec.d > 3) {
    std::cerr << "surface export supports d in {2, 3}\n";
    return kExitConfig;
  }
  fs::create_directories(out_dir);
  Network net(ck.arch);
  std::ofstream out(fs::path(out_dir) / "surface.csv");
  out.precision(12);
  const auto t0 = std::chrono::steady_clock::now();
  if (ck.spec.d == 2) {
    out << "t,eta1,value\n";
    for (int it = 0; it < resolution; ++it)
      for (int ix = 0; ix < resolution; ++ix) {
        const double t = ck.spec.T * it / (resolution - 1);
        VectorXd eta(1);
        eta[0] = static_cast<double>(ix) / (resolution - 1);
        const auto e = net.evaluate(ck.theta, t, ProjectedPoint(eta));
        out << t << "," << eta[0] << "," << e.value << "\n";
      }
  } else {
    out << "t,eta1,eta2,value\n";
    for (int it = 0; it < resolution; ++it)
      for (int ix = 0; ix < resolution; ++ix)
        for (int iy = 0; ix + iy < resolution; ++iy) {
          const double t = ck.spec.T * it / (resolution - 1);
          VectorXd eta(2);
          eta[0] = static_cast<double>(ix) / (resolution - 1);
          eta[1] = static_cast<double>(iy) / (resolution - 1);
          const auto e = net.evaluate(ck.theta, t, ProjectedPoint(eta));
          out << t << "," << eta[0] << "," << eta[1] << "," << e.value << "\n";
        }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(out_dir, "surface", "checkpoint = " + checkpoint_path + "\n", 0, secs,
                 {"surface.csv"});
  return 0;
}

int cmd_oracle(const std::string& config_path, int mesh, const std::string& out_dir) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  fs::create_directories(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  ValueGrid grid;
  try {
    const double h = 1.0 / mesh;
    const int nt = static_cast<int>(std::ceil(cfg.problem.T / (h / (2.0 * cfg.problem.M * cfg.problem.d))));
    grid = solve_grid_hjb(cfg.problem, nt, mesh);
  } catch (const std::exception& e) {
    std::cerr << "oracle error: " << e.what() << "\n";
    return kExitConfig;
  }
  std::ofstream out(fs::path(out_dir) / "grid.csv");
  out.precision(12);
  const double dt = grid.T / grid.time_steps;
  if (grid.d == 2) {
    out << "t,eta1,value\n";
    for (int k = 0; k <= grid.time_steps; ++k)
      for (int i = 0; i <= grid.mesh_cells; ++i)
        out << k * dt << "," << i * grid.h << "," << grid.values[k][i] << "\n";
  } else {
    out << "t,eta1,eta2,value\n";
    for (int k = 0; k <= grid.time_steps; ++k)
      for (int i = 0; i <= grid.mesh_cells; ++i)
        for (int j = 0; i + j <= grid.mesh_cells; ++j)
          out << k * dt << "," << i * grid.h << "," << j * grid.h << ","
              << grid.values[k][grid.node_index(i, j)] << "\n";
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(out_dir, "oracle", slurp(config_path), cfg.seed, secs, {"grid.csv"});
  return 0;
}

int cmd_compare(const std::string& checkpoint_path, int mesh, double band,
                const std::string& out_dir) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(checkpoint_path);
  } catch (const std::exception& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (ck.spec.d != 2 && ck.spec.d != 3) {
    std::cerr << "compare requires d in {2, 3} (grid oracle limit), got d=" << ck.spec.d << "\n";
    return kExitConfig;
  }
  fs::create_directories(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const double h = 1.0 / mesh;
  const int nt =
      static_cast<int>(std::ceil(ck.spec.T / (h / (2.0 * ck.spec.M * ck.spec.d))));
  ValueGrid grid;
  try {
    grid = solve_grid_hjb(ck.spec, nt, mesh);
  } catch (const std::exception& e) {
    std::cerr << "oracle error: " << e.what() << "\n";
    return kExitConfig;
  }
  Network net(ck.arch);
  double sup = 0.0, mean = 0.0;
  long nodes = 0;
  const double dt = grid.T / grid.time_steps;
  const int tstride = std::max(1, grid.time_steps / 50);
  for (int k = 0; k <= grid.time_steps; k += tstride) {
    const double t = k * dt;
    for (int i = 0; i <= grid.mesh_cells; ++i) {
      if (grid.d == 2) {
        const double eta = i * grid.h;
        if (eta < band || eta > 1.0 - band) continue;
        VectorXd e(1);
        e[0] = eta;
        const double gap =
            std::abs(net.evaluate(ck.theta, t, ProjectedPoint(e)).value - grid.values[k][i]);
        sup = std::max(sup, gap);
        mean += gap;
        ++nodes;
      } else {
        for (int j = 0; i + j <= grid.mesh_cells; ++j) {
          const double e1 = i * grid.h, e2 = j * grid.h;
          const double e3 = 1.0 - e1 - e2;
          if (e1 < band || e2 < band || e3 < band) continue;
          VectorXd e(2);
          e << e1, e2;
          const double gap = std::abs(net.evaluate(ck.theta, t, ProjectedPoint(e)).value -
                                      grid.values[k][grid.node_index(i, j)]);
          sup = std::max(sup, gap);
          mean += gap;
          ++nodes;
        }
      }
    }
  }
  if (nodes == 0) {
    std::cerr << "no interior comparison nodes; shrink --band or refine --resolution\n";
    return kExitConfig;
  }
  mean /= nodes;
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::ofstream out(fs::path(out_dir) / "compare.csv");
    out.precision(12);
    out << "sup_gap,mean_gap,nodes,band\n";
    out << sup << "," << mean << "," << nodes << "," << band << "\n";
  }
  write_manifest(out_dir, "compare", "checkpoint = " + checkpoint_path + "\n", 0, secs,
                 {"compare.csv"});
  std::cout << "interior sup gap " << sup << ", mean gap " << mean << " over " << nodes
            << " nodes (band " << band << ")\n";
  return 0;
}

int cmd_nagent(const std::string& checkpoint_path, const std::string& n_list, int reps,
               std::uint64_t seed, bool zero_policy_override, const std::string& out_dir) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(checkpoint_path);
  } catch (const std::exception& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  }
  std::vector<int> ns;
  {
    std::stringstream ss(n_list);
    std::string tok;
    while (std::getline(ss, tok, ',')) ns.push_back(std::stoi(tok));
  }
  if (ns.empty()) {
    std::cerr << "empty N list\n";
    return kExitConfig;
  }
  fs::create_directories(out_dir);
  Network net(ck.arch);
  SimplexPoint m0;
  m0.coords = VectorXd::Constant(ck.spec.d, 1.0 / ck.spec.d);
  ControlPolicy policy;
  if (zero_policy_override) {
    policy = zero_policy(ck.spec.d);
  } else {
    policy = [&](double t, const SimplexPoint& m) {
      const auto e = net.evaluate(ck.theta, t, project(m));
      return recover_control(ck.spec, e, t, m);
    };
  }
  const double v0 = net.evaluate(ck.theta, 0.0, project(m0)).value;
  const auto t0 = std::chrono::steady_clock::now();
  std::ofstream out(fs::path(out_dir) / "nagent.csv");
  out.precision(12);
  out << "N,mean_cost,std_err,gap\n";
  for (size_t idx = 0; idx < ns.size(); ++idx) {
    const auto r = simulate_n_agents(ck.spec, policy, ns[idx], m0, reps, seed + idx);
    out << ns[idx] << "," << r.mean_cost << "," << r.std_error << ","
        << std::abs(r.mean_cost - v0) << "\n";
    std::cout << "N=" << ns[idx] << " cost " << r.mean_cost << " +- " << r.std_error
              << " gap " << std::abs(r.mean_cost - v0) << "\n";
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(out_dir, "nagent", "checkpoint = " + checkpoint_path + "\n", seed, secs,
                 {"nagent.csv"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"Deep Galerkin solver for mean field control HJB equations on the simplex"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir = "out", n_list = "10,100,1000";
  int resolution = 101, mesh = 200, reps = 50;
  long seed_override = -1;
  std::uint64_t seed = 0;
  double band = 0.05;
  bool zero_policy_flag = false;

  auto* tr = app.add_subcommand("train", "Train a value-function approximator");
  tr->add_option("--config", config_path, "run config file")->required();
  tr->add_option("--out", out_dir, "output directory");
  tr->add_option("--seed", seed_override, "override the config seed");

  auto* su = app.add_subcommand("surface", "Export the learned value surface as CSV");
  su->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  su->add_option("--resolution", resolution, "lattice points per axis");
  su->add_option("--out", out_dir, "output directory");

  auto* orc = app.add_subcommand("oracle", "Solve the grid HJB oracle and export it");
  orc->add_option("--config", config_path, "run config file")->required();
  orc->add_option("--resolution", mesh, "chart lattice cells");
  orc->add_option("--out", out_dir, "output directory");

  auto* cp = app.add_subcommand("compare", "Compare a checkpoint against the grid oracle");
  cp->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  cp->add_option("--resolution", mesh, "chart lattice cells");
  cp->add_option("--band", band, "excluded boundary band width");
  cp->add_option("--out", out_dir, "output directory");

  auto* na = app.add_subcommand("nagent", "N-agent Monte Carlo under the recovered control");
  na->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  na->add_option("--n-list", n_list, "comma-separated agent counts");
  na->add_option("--reps", reps, "Monte Carlo repetitions per N");
  na->add_option("--seed", seed, "simulation seed");
  na->add_flag("--zero-policy", zero_policy_flag, "simulate with the zero control instead");
  na->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // help/version exit 0; every other parse failure is a config error
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (tr->parsed()) return cmd_train(config_path, out_dir, seed_override);
    if (su->parsed()) return cmd_surface(checkpoint_path, resolution, out_dir);
    if (orc->parsed()) return cmd_oracle(config_path, mesh, out_dir);
    if (cp->parsed()) return cmd_compare(checkpoint_path, mesh, band, out_dir);
    if (na->parsed()) return cmd_nagent(checkpoint_path, n_list, reps, seed, zero_policy_flag, out_dir);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
