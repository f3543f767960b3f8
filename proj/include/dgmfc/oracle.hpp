#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dgmfc/mfcp.hpp"
#include "dgmfc/simplex.hpp"

namespace dgmfc {

/// Feedback control: (t, m) -> transition-rate matrix with entries in [0, M].
using ControlPolicy = std::function<ControlMatrix(double t, const SimplexPoint& m)>;

inline ControlPolicy zero_policy(int d) {
  return [d](double, const SimplexPoint&) { return ControlMatrix{MatrixXd::Zero(d, d)}; };
}

struct IntegrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline VectorXd fokker_planck_rhs(const VectorXd& mu, const MatrixXd& rates) {
  const int d = static_cast<int>(mu.size());
  VectorXd dmu = VectorXd::Zero(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      if (i == j) continue;
      const double flow = mu[i] * rates(i, j);
      dmu[i] -= flow;
      dmu[j] += flow;
    }
  return dmu;
}

}  // namespace detail

/// Classical RK4 integration of the forward equation
///   d mu_i/dt = sum_j (mu_j a_{j,i} - mu_i a_{i,j}),
/// renormalizing each step onto the simplex. Returns steps+1 points.
inline std::vector<SimplexPoint> integrate_forward(const SimplexPoint& m0,
                                                   const ControlPolicy& policy, double t0,
                                                   double T, int steps) {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  const double dt = (T - t0) / steps;
  std::vector<SimplexPoint> traj;
  traj.reserve(steps + 1);
  traj.push_back(m0);
  VectorXd mu = m0.coords;
  const int d = m0.states();
  auto rhs = [&](double t, const VectorXd& m) {
    SimplexPoint sp;
    sp.coords = m.cwiseMax(0.0);
    sp.coords /= sp.coords.sum();
    return detail::fokker_planck_rhs(m, policy(t, sp).rates);
  };
  for (int k = 0; k < steps; ++k) {
    const double t = t0 + k * dt;
    VectorXd k1 = rhs(t, mu);
    VectorXd k2 = rhs(t + 0.5 * dt, mu + 0.5 * dt * k1);
    VectorXd k3 = rhs(t + 0.5 * dt, mu + 0.5 * dt * k2);
    VectorXd k4 = rhs(t + dt, mu + dt * k3);
    mu += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    const double drift = std::abs(mu.sum() - 1.0);
    if (drift > 1e-10 || mu.minCoeff() < -1e-10)
      throw IntegrationError("forward integration drifted off the simplex");
    mu = mu.cwiseMax(0.0);
    mu /= mu.sum();
    SimplexPoint sp;
    sp.coords = mu;
    traj.push_back(sp);
    (void)d;
  }
  return traj;
}

/// Deterministic cost J = int sum_i f(s,i,alpha_i,mu_s) mu_s^i ds + G-type
/// terminal term, accumulated on the same RK4 grid by integrating the
/// augmented state (mu, J).
inline double evaluate_cost(const MfcpSpec& spec, const SimplexPoint& m0,
                            const ControlPolicy& policy, double t0, int steps = 1000) {
  const double dt = (spec.T - t0) / steps;
  const int d = spec.d;
  VectorXd mu = m0.coords;
  double J = 0.0;
  auto running = [&](double t, const VectorXd& m) {
    SimplexPoint sp;
    sp.coords = m.cwiseMax(0.0);
    sp.coords /= sp.coords.sum();
    const MatrixXd rates = policy(t, sp).rates;
    double r = 0.0;
    for (int i = 0; i < d; ++i)
      r += sp.coords[i] * running_cost(spec, t, i, rates.row(i).transpose(), sp);
    return r;
  };
  auto rhs = [&](double t, const VectorXd& m) {
    SimplexPoint sp;
    sp.coords = m.cwiseMax(0.0);
    sp.coords /= sp.coords.sum();
    return detail::fokker_planck_rhs(m, policy(t, sp).rates);
  };
  for (int k = 0; k < steps; ++k) {
    const double t = t0 + k * dt;
    VectorXd k1 = rhs(t, mu);
    double c1 = running(t, mu);
    VectorXd k2 = rhs(t + 0.5 * dt, mu + 0.5 * dt * k1);
    double c2 = running(t + 0.5 * dt, mu + 0.5 * dt * k1);
    VectorXd k3 = rhs(t + 0.5 * dt, mu + 0.5 * dt * k2);
    double c3 = running(t + 0.5 * dt, mu + 0.5 * dt * k2);
    VectorXd k4 = rhs(t + dt, mu + dt * k3);
    double c4 = running(t + dt, mu + dt * k3);
    mu += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    J += dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
    mu = mu.cwiseMax(0.0);
    mu /= mu.sum();
  }
  SimplexPoint mT;
  mT.coords = mu;
  double g = 0.0;
  for (int i = 0; i < d; ++i) g += mu[i] * spec.g(i, mT);
  return J + g;
}

// ---------------------------------------------------------------------------
// Grid HJB solver on the chart (d = 2 or 3)
// ---------------------------------------------------------------------------

/// Backward-induction value grid on [0, T] x chart lattice.
/// d=2: nodes eta = k*h; d=3: nodes (k1*h, k2*h) with k1+k2 <= Nh.
struct ValueGrid {
  int d = 2;
  double T = 1.0;
  int time_steps = 0;   // N_t
  int mesh_cells = 0;   // Nh = 1/h
  double h = 0.0;
  // values[k] is the slice at t_k = k * T / N_t; flattened node index:
  //   d=2: i in [0, Nh];  d=3: row-major over (i, j) with i + j <= Nh.
  std::vector<VectorXd> values;

  int node_count() const {
    return d == 2 ? mesh_cells + 1 : (mesh_cells + 1) * (mesh_cells + 2) / 2;
  }
  int node_index(int i, int j = 0) const {
    if (d == 2) return i;
    // offset of row i in the triangular layout
    return i * (mesh_cells + 1) - i * (i - 1) / 2 + j;
  }
};

struct ConfigurationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Chart Hamiltonian sum_i m_i H^i with directional arguments built from the
// chart gradient p.
inline double chart_pde_hamiltonian(const MfcpSpec& spec, double t, const ProjectedPoint& eta,
                                    const VectorXd& p) {
  const SimplexPoint m = lift(eta);
  const ChartGradient cg(p);
  return pde_hamiltonian(spec, t, m,
                         [&](int i) { return chart_gradient_to_directional(cg, i); });
}

}  // namespace detail

/// Explicit backward time stepping of the chart HJB with a monotone local
/// Lax-Friedrichs stencil (one-sided differences at the chart boundary);
/// first-order accurate in (h + dt). Requires dt <= h / (2 M d).
inline ValueGrid solve_grid_hjb(const MfcpSpec& spec, int time_steps, int mesh_cells) {
  spec.validate();
  if (spec.d != 2 && spec.d != 3)
    throw ConfigurationError("grid solver supports d in {2, 3}");
  if (time_steps < 1 || mesh_cells < 2) throw ConfigurationError("grid too coarse");
  ValueGrid grid;
  grid.d = spec.d;
  grid.T = spec.T;
  grid.time_steps = time_steps;
  grid.mesh_cells = mesh_cells;
  grid.h = 1.0 / mesh_cells;
  const double dt = spec.T / time_steps;
  if (dt > grid.h / (2.0 * spec.M * spec.d) + 1e-15)
    throw ConfigurationError("time step violates the CFL bound dt <= h/(2 M d)");
  // dissipation >= Lipschitz constant of the PDE-Hamiltonian in p:
  // |dH/dp_k| <= sum_{i != k} m_i M + m_k (d-1) M <= M (d-1)
  const double sigma = spec.M * (spec.d - 1);
  const int Nh = mesh_cells;
  const double h = grid.h;

  grid.values.assign(time_steps + 1, VectorXd::Zero(grid.node_count()));

  auto eta_at = [&](int i, int j) {
    VectorXd e(spec.d - 1);
    e[0] = i * h;
    if (spec.d == 3) e[1] = j * h;
    // clamp rounding so lattice corners stay inside the chart
    if (e.sum() > 1.0) e *= 1.0 / e.sum();
    return ProjectedPoint(e);
  };

  // terminal slice
  VectorXd& VT = grid.values[time_steps];
  if (spec.d == 2) {
    for (int i = 0; i <= Nh; ++i) VT[i] = spec.terminal_value_chart(eta_at(i, 0));
  } else {
    for (int i = 0; i <= Nh; ++i)
      for (int j = 0; i + j <= Nh; ++j)
        VT[grid.node_index(i, j)] = spec.terminal_value_chart(eta_at(i, j));
  }

  for (int k = time_steps - 1; k >= 0; --k) {
    const VectorXd& Vn = grid.values[k + 1];
    VectorXd& Vk = grid.values[k];
    const double t = (k + 1) * dt;
    if (spec.d == 2) {
      for (int i = 0; i <= Nh; ++i) {
        double p, visc = 0.0;
        if (i == 0) {
          p = (Vn[1] - Vn[0]) / h;
        } else if (i == Nh) {
          p = (Vn[Nh] - Vn[Nh - 1]) / h;
        } else {
          p = (Vn[i + 1] - Vn[i - 1]) / (2.0 * h);
          visc = sigma * (Vn[i + 1] - 2.0 * Vn[i] + Vn[i - 1]) / (2.0 * h);
        }
        VectorXd pv(1);
        pv[0] = p;
        Vk[i] = Vn[i] - dt * (detail::chart_pde_hamiltonian(spec, t, eta_at(i, 0), pv) - visc);
      }
    } else {
      for (int i = 0; i <= Nh; ++i)
        for (int j = 0; i + j <= Nh; ++j) {
          VectorXd p(2);
          double visc = 0.0;
          const int idx = grid.node_index(i, j);
          // eta_1 direction
          if (i == 0 || i + j == Nh) {
            const int ip = (i + j == Nh) ? -1 : 1;
            p[0] = ip > 0 ? (Vn[grid.node_index(i + 1, j)] - Vn[idx]) / h
                          : (Vn[idx] - Vn[grid.node_index(i - 1, j)]) / h;
          } else {
            p[0] = (Vn[grid.node_index(i + 1, j)] - Vn[grid.node_index(i - 1, j)]) / (2.0 * h);
            visc += sigma *
                    (Vn[grid.node_index(i + 1, j)] - 2.0 * Vn[idx] +
                     Vn[grid.node_index(i - 1, j)]) /
                    (2.0 * h);
          }
          // eta_2 direction
          if (j == 0 || i + j == Nh) {
            const int jp = (i + j == Nh) ? -1 : 1;
            p[1] = jp > 0 ? (Vn[grid.node_index(i, j + 1)] - Vn[idx]) / h
                          : (Vn[idx] - Vn[grid.node_index(i, j - 1)]) / h;
          } else {
            p[1] = (Vn[grid.node_index(i, j + 1)] - Vn[grid.node_index(i, j - 1)]) / (2.0 * h);
            visc += sigma *
                    (Vn[grid.node_index(i, j + 1)] - 2.0 * Vn[idx] +
                     Vn[grid.node_index(i, j - 1)]) /
                    (2.0 * h);
          }
          Vk[idx] = Vn[idx] - dt * (detail::chart_pde_hamiltonian(spec, t, eta_at(i, j), p) - visc);
          if (!std::isfinite(Vk[idx])) throw IntegrationError("grid solver diverged");
        }
    }
  }
  return grid;
}

/// Value interpolated at (t, eta): linear in t, linear (d=2) / barycentric-
/// style bilinear (d=3) in space.
inline double grid_value_at(const ValueGrid& grid, double t, const ProjectedPoint& eta) {
  const double dt = grid.T / grid.time_steps;
  double ft = std::clamp(t / dt, 0.0, static_cast<double>(grid.time_steps));
  const int k0 = std::min(static_cast<int>(ft), grid.time_steps - 1);
  const double wt = ft - k0;
  auto space = [&](const VectorXd& V) {
    const double h = grid.h;
    if (grid.d == 2) {
      double fx = std::clamp(eta.coords[0] / h, 0.0, static_cast<double>(grid.mesh_cells));
      const int i0 = std::min(static_cast<int>(fx), grid.mesh_cells - 1);
      const double wx = fx - i0;
      return (1.0 - wx) * V[i0] + wx * V[i0 + 1];
    }
    double fx = eta.coords[0] / h, fy = eta.coords[1] / h;
    int i0 = std::min(static_cast<int>(fx), grid.mesh_cells - 1);
    int j0 = std::min(static_cast<int>(fy), grid.mesh_cells - 1);
    double wx = fx - i0, wy = fy - j0;
    // fold the upper triangle of the cell back if it pokes outside the chart
    if (i0 + j0 >= grid.mesh_cells) {
      i0 = std::max(0, i0 - 1);
      j0 = std::max(0, grid.mesh_cells - 1 - i0 - 1);
      wx = std::clamp(fx - i0, 0.0, 1.0);
      wy = std::clamp(fy - j0, 0.0, 1.0);
    }
    const bool upper = (i0 + j0 + 1 >= grid.mesh_cells) && (wx + wy > 1.0);
    if (!upper && i0 + 1 + j0 + 1 <= grid.mesh_cells + 1) {
      const double v00 = V[grid.node_index(i0, j0)];
      const double v10 = V[grid.node_index(i0 + 1, j0)];
      const double v01 = V[grid.node_index(i0, j0 + 1)];
      const double v11 = (i0 + 1 + j0 + 1 <= grid.mesh_cells)
                             ? V[grid.node_index(i0 + 1, j0 + 1)]
                             : V[grid.node_index(i0 + 1, j0)] + V[grid.node_index(i0, j0 + 1)] -
                                   V[grid.node_index(i0, j0)];
      return (1.0 - wx) * (1.0 - wy) * v00 + wx * (1.0 - wy) * v10 + (1.0 - wx) * wy * v01 +
             wx * wy * v11;
    }
    // barycentric on the triangle (i0+1, j0), (i0, j0+1), (i0+1, j0+1)-fold
    const double v10 = V[grid.node_index(i0 + 1, j0)];
    const double v01 = V[grid.node_index(i0, j0 + 1)];
    const double v00 = V[grid.node_index(i0, j0)];
    return v10 * wx + v01 * wy + v00 * (1.0 - wx - wy);
  };
  return (1.0 - wt) * space(grid.values[k0]) + wt * space(grid.values[k0 + 1]);
}

/// Chart gradient of the grid value at (t, eta), by central differences of the
/// interpolant with step h.
inline VectorXd grid_chart_gradient(const ValueGrid& grid, double t, const ProjectedPoint& eta) {
  const int dm1 = grid.d - 1;
  VectorXd g(dm1);
  const double step = grid.h;
  for (int k = 0; k < dm1; ++k) {
    VectorXd lo = eta.coords, hi = eta.coords;
    hi[k] = std::min(hi[k] + step, 1.0);
    lo[k] = std::max(lo[k] - step, 0.0);
    if (grid.d == 3) {
      // keep within the chart
      if (hi.sum() > 1.0) hi[k] = 1.0 - (hi.sum() - hi[k]);
    }
    const double denom = hi[k] - lo[k];
    g[k] = (grid_value_at(grid, t, ProjectedPoint(hi)) -
            grid_value_at(grid, t, ProjectedPoint(lo))) /
           denom;
  }
  return g;
}

/// Feedback policy extracted from the grid solution via the optimal-control map.
inline ControlPolicy grid_policy(const MfcpSpec& spec, const ValueGrid& grid) {
  return [&spec, grid](double t, const SimplexPoint& m) {
    const ProjectedPoint eta = project(m);
    DualEvaluation e;
    e.deta = grid_chart_gradient(grid, t, eta);
    return recover_control(spec, e, t, m);
  };
}

// ---------------------------------------------------------------------------
// Trajectory-optimization cross-oracle
// ---------------------------------------------------------------------------

/// Direct optimization of evaluate_cost over piecewise-constant controls
/// (projected gradient descent with finite-difference gradients). Returns the
/// optimized cost from (t0, m0). Independent of the grid solver.
inline double optimize_trajectory_cost(const MfcpSpec& spec, const SimplexPoint& m0, double t0,
                                       int intervals = 20, int iterations = 500,
                                       double step_size = 0.05, int rk_steps = 400) {
  const int d = spec.d;
  // controls[k] holds the off-diagonal rates for interval k, row-major
  std::vector<MatrixXd> controls(intervals, MatrixXd::Zero(d, d));
  const double span = spec.T - t0;
  auto policy = [&](double t, const SimplexPoint&) {
    int k = std::min(intervals - 1, static_cast<int>((t - t0) / span * intervals));
    k = std::max(0, k);
    return ControlMatrix{controls[k]};
  };
  auto cost = [&]() { return evaluate_cost(spec, m0, policy, t0, rk_steps); };
  const double fd = 1e-5;
  for (int it = 0; it < iterations; ++it) {
    std::vector<MatrixXd> grads(intervals, MatrixXd::Zero(d, d));
    for (int k = 0; k < intervals; ++k)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          if (i == j) continue;
          const double orig = controls[k](i, j);
          controls[k](i, j) = orig + fd;
          const double up = cost();
          controls[k](i, j) = std::max(0.0, orig - fd);
          const double down = cost();
          grads[k](i, j) = (up - down) / (fd + orig - controls[k](i, j));
          controls[k](i, j) = orig;
        }
    for (int k = 0; k < intervals; ++k) {
      controls[k] -= step_size * grads[k];
      controls[k] = controls[k].cwiseMax(0.0).cwiseMin(spec.M);
      controls[k].diagonal().setZero();
    }
  }
  return cost();
}

// ---------------------------------------------------------------------------
// N-agent continuous-time Markov chain simulator
// ---------------------------------------------------------------------------

/// Largest-remainder rounding of N * m0 onto integer state counts.
inline Eigen::VectorXi quantize_initial_counts(const SimplexPoint& m0, int N) {
  const int d = m0.states();
  Eigen::VectorXi counts(d);
  VectorXd exact = m0.coords * N;
  int assigned = 0;
  std::vector<std::pair<double, int>> rema(d);
  for (int i = 0; i < d; ++i) {
    counts[i] = static_cast<int>(std::floor(exact[i]));
    assigned += counts[i];
    rema[i] = {exact[i] - counts[i], i};
  }
  std::sort(rema.begin(), rema.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int r = 0; r < N - assigned; ++r) counts[rema[r].second] += 1;
  return counts;
}

struct NAgentResult {
  double mean_cost = 0.0;
  double std_error = 0.0;
};

/// Exact simulation of the N-agent controlled CTMC by thinning against the
/// constant rate bound N (d-1) M, which handles time-dependent policies.
/// Accumulates the per-path cost J^N and returns its Monte Carlo mean +- s.e.
inline NAgentResult simulate_n_agents(const MfcpSpec& spec, const ControlPolicy& policy, int N,
                                      const SimplexPoint& m0, int reps, std::uint64_t seed) {
  if (N < 1 || reps < 1) throw std::invalid_argument("N and reps must be >= 1");
  const int d = spec.d;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  const double Lambda = static_cast<double>(N) * (d - 1) * spec.M;
  const double dt_cost = spec.T / 400.0;  // running-cost quadrature cap

  std::vector<double> costs(reps);
  for (int rep = 0; rep < reps; ++rep) {
    Eigen::VectorXi counts = quantize_initial_counts(m0, N);
    double t = 0.0;
    double J = 0.0;
    double next_jump = expo(rng) / Lambda;
    auto measure = [&]() {
      SimplexPoint m;
      m.coords = counts.cast<double>() / N;
      return m;
    };
    auto running_rate = [&](double time, const SimplexPoint& m, const MatrixXd& rates) {
      double r = 0.0;
      for (int i = 0; i < d; ++i)
        if (counts[i] > 0)
          r += m.coords[i] * running_cost(spec, time, i, rates.row(i).transpose(), m);
      return r;
    };
    while (t < spec.T) {
      const double t_next = std::min({t + dt_cost, next_jump, spec.T});
      // trapezoid on [t, t_next] with the current (frozen) empirical measure
      const SimplexPoint m = measure();
      const MatrixXd r0 = policy(t, m).rates;
      const MatrixXd r1 = policy(t_next, m).rates;
      J += 0.5 * (t_next - t) * (running_rate(t, m, r0) + running_rate(t_next, m, r1));
      t = t_next;
      if (t >= spec.T) break;
      if (t == next_jump) {
        // candidate event: accept with probability total_rate / Lambda
        const MatrixXd rates = policy(t, m).rates;
        double total = 0.0;
        for (int i = 0; i < d; ++i)
          if (counts[i] > 0)
            for (int j = 0; j < d; ++j)
              if (j != i) total += counts[i] * rates(i, j);
        const double u = unif(rng) * Lambda;
        if (u < total) {
          double acc = 0.0;
          int from = -1, to = -1;
          for (int i = 0; i < d && from < 0; ++i) {
            if (counts[i] == 0) continue;
            for (int j = 0; j < d; ++j) {
              if (j == i) continue;
              acc += counts[i] * rates(i, j);
              if (u < acc) {
                from = i;
                to = j;
                break;
              }
            }
          }
          if (from >= 0) {
            counts[from] -= 1;
            counts[to] += 1;
          }
        }
        next_jump = t + expo(rng) / Lambda;
      }
    }
    const SimplexPoint mT = measure();
    for (int i = 0; i < d; ++i) J += mT.coords[i] * spec.g(i, mT);
    costs[rep] = J;
  }
  NAgentResult out;
  for (double c : costs) out.mean_cost += c;
  out.mean_cost /= reps;
  if (reps > 1) {
    double ss = 0.0;
    for (double c : costs) ss += (c - out.mean_cost) * (c - out.mean_cost);
    out.std_error = std::sqrt(ss / (reps - 1) / reps);
  }
  return out;
}

}  // namespace dgmfc
