#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "dgmfc/simplex.hpp"

namespace dgmfc {

/// Separable per-state cost m -> cost of occupying state i. Used for both the
/// control-free part of the running cost and the terminal cost g^i.
using StateCost = std::function<double(int i, const SimplexPoint& m)>;

inline StateCost own_mass_cost() {
  return [](int i, const SimplexPoint& m) { return m.coords[i]; };
}

/// Mean field control problem with quadratic transition costs:
///   f(t, i, a, m) = 1/2 sum_{j != i} c_{i,j} a_{i,j}^2 + f0^i(m),
/// terminal cost g^i(m). Defaults: f0^i(m) = g^i(m) = m_i.
struct MfcpSpec {
  int d = 2;            // state count
  double T = 1.0;       // horizon
  double M = 1.0;       // rate bound, controls live in [0, M]
  MatrixXd c;           // transition-cost matrix, positive off-diagonal
  StateCost f0 = own_mass_cost();
  StateCost g = own_mass_cost();

  static MfcpSpec unit_costs(int d, double T = 1.0, double M = 1.0) {
    MfcpSpec s;
    s.d = d;
    s.T = T;
    s.M = M;
    s.c = MatrixXd::Ones(d, d);
    s.validate();
    return s;
  }

  void validate() const {
    if (d < 2) throw std::invalid_argument("problem needs d >= 2");
    if (T <= 0.0) throw std::invalid_argument("horizon must be positive");
    if (M <= 0.0) throw std::invalid_argument("rate bound must be positive");
    if (c.rows() != d || c.cols() != d)
      throw std::invalid_argument("cost matrix must be d x d");
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        if (i != j && c(i, j) <= 0.0)
          throw std::invalid_argument("off-diagonal transition costs must be positive");
  }

  /// Terminal condition G(m) = sum_i m_i g^i(m).
  double terminal_value(const SimplexPoint& m) const {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += m.coords[i] * g(i, m);
    return s;
  }

  /// Terminal condition as seen on the chart.
  double terminal_value_chart(const ProjectedPoint& eta) const {
    return terminal_value(lift(eta));
  }
};

/// Transition-rate matrix with zero diagonal, entries in [0, M].
struct ControlMatrix {
  MatrixXd rates;
};

/// a*(s) = clip(s, 0, M): maximizer of s*a - a^2/2 over [0, M].
inline double a_star_scalar(double s, double M) {
  return std::clamp(s, 0.0, M);
}

/// Running cost f(t, i, a, m) for a rate row a (entry j = rate i -> j).
inline double running_cost(const MfcpSpec& spec, double /*t*/, int i,
                           const VectorXd& a, const SimplexPoint& m) {
  double quad = 0.0;
  for (int j = 0; j < spec.d; ++j)
    if (j != i) quad += 0.5 * spec.c(i, j) * a[j] * a[j];
  return quad + spec.f0(i, m);
}

/// Per-state Hamiltonian, closed form for the quadratic running cost:
///   H^i(t, m, z) = sum_{j != i} (-a z_j - 1/2 c_{i,j} a^2) - f0^i(m),
/// with per-term maximizer a = a*(-z_j / c_{i,j}).
inline double hamiltonian(const MfcpSpec& spec, int i, double /*t*/,
                          const SimplexPoint& m, const VectorXd& z) {
  if (i < 0 || i >= spec.d) throw std::out_of_range("state index out of range");
  double h = 0.0;
  for (int j = 0; j < spec.d; ++j) {
    if (j == i) continue;
    const double cij = spec.c(i, j);
    const double a = a_star_scalar(-z[j] / cij, spec.M);
    h += -a * z[j] - 0.5 * cij * a * a;
  }
  return h - spec.f0(i, m);
}

/// dH^i/dz: by the envelope theorem, the j-th entry is -a*(-z_j / c_{i,j}).
inline VectorXd hamiltonian_gradient(const MfcpSpec& spec, int i,
                                     const VectorXd& z) {
  VectorXd q = VectorXd::Zero(spec.d);
  for (int j = 0; j < spec.d; ++j) {
    if (j == i) continue;
    q[j] = -a_star_scalar(-z[j] / spec.c(i, j), spec.M);
  }
  return q;
}

/// PDE-Hamiltonian H(t, m, .) = sum_i m_i H^i with per-state directional
/// arguments z^i supplied by the caller.
inline double pde_hamiltonian(const MfcpSpec& spec, double t, const SimplexPoint& m,
                              const std::function<VectorXd(int)>& z_for_state) {
  double h = 0.0;
  for (int i = 0; i < spec.d; ++i) {
    const double mi = m.coords[i];
    if (mi == 0.0) continue;
    h += mi * hamiltonian(spec, i, t, m, z_for_state(i));
  }
  return h;
}

/// Network output together with its input derivatives at one point.
struct DualEvaluation {
  double value = 0.0;
  double dt = 0.0;   // d phi / dt
  VectorXd deta;     // d phi / d eta, length d-1
};

/// Chart HJB operator applied to a (network) evaluation at (t, eta):
///   L[phi] = -dphi/dt + sum_{i<d} eta_i H^i(t, eta, A_i grad) + eta^{-d} H^d(..).
inline double hjb_residual(const MfcpSpec& spec, const DualEvaluation& eval,
                           double t, const ProjectedPoint& eta) {
  const SimplexPoint m = lift(eta);
  const ChartGradient p(eval.deta);
  const double h = pde_hamiltonian(spec, t, m, [&](int i) {
    return chart_gradient_to_directional(p, i);
  });
  return -eval.dt + h;
}

/// d(residual)/d(deta): pulls the Hamiltonian z-gradients back to the chart.
inline VectorXd hjb_residual_deta_gradient(const MfcpSpec& spec,
                                           const DualEvaluation& eval,
                                           const ProjectedPoint& eta) {
  const SimplexPoint m = lift(eta);
  const ChartGradient p(eval.deta);
  VectorXd pbar = VectorXd::Zero(spec.d - 1);
  for (int i = 0; i < spec.d; ++i) {
    const double mi = m.coords[i];
    if (mi == 0.0) continue;
    const VectorXd z = chart_gradient_to_directional(p, i);
    pbar += mi * chart_gradient_adjoint(hamiltonian_gradient(spec, i, z), i);
  }
  return pbar;
}

/// Optimal control alpha*_{i,j} = a*(-z^i_j / c_{i,j}) from the chart gradient
/// of a value approximation.
inline ControlMatrix recover_control(const MfcpSpec& spec, const DualEvaluation& eval,
                                     double /*t*/, const SimplexPoint& m) {
  (void)m;
  const ChartGradient p(eval.deta);
  MatrixXd rates = MatrixXd::Zero(spec.d, spec.d);
  for (int i = 0; i < spec.d; ++i) {
    const VectorXd z = chart_gradient_to_directional(p, i);
    for (int j = 0; j < spec.d; ++j) {
      if (j == i) continue;
      rates(i, j) = a_star_scalar(-z[j] / spec.c(i, j), spec.M);
    }
  }
  return ControlMatrix{std::move(rates)};
}

}  // namespace dgmfc
