#pragma once

#include <cmath>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace dgmfc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kSimplexTol = 1e-12;

/// A probability vector m over d states: m_i >= 0, sum m_i = 1.
struct SimplexPoint {
  VectorXd coords;

  SimplexPoint() = default;
  explicit SimplexPoint(VectorXd m) : coords(std::move(m)) { validate(); }

  int states() const { return static_cast<int>(coords.size()); }

  void validate() const {
    if (coords.size() < 2) throw std::invalid_argument("simplex point needs d >= 2");
    if (coords.minCoeff() < -kSimplexTol)
      throw std::invalid_argument("simplex point has negative mass");
    if (std::abs(coords.sum() - 1.0) > kSimplexTol)
      throw std::invalid_argument("simplex point mass does not sum to 1");
  }
};

/// Chart image of a simplex point: the first d-1 masses. Entries >= 0, sum <= 1.
struct ProjectedPoint {
  VectorXd coords;

  ProjectedPoint() = default;
  explicit ProjectedPoint(VectorXd eta) : coords(std::move(eta)) { validate(); }

  int states() const { return static_cast<int>(coords.size()) + 1; }

  void validate() const {
    if (coords.size() < 1) throw std::invalid_argument("chart point needs d >= 2");
    if (coords.minCoeff() < -kSimplexTol)
      throw std::invalid_argument("chart point has negative mass");
    if (coords.sum() > 1.0 + kSimplexTol)
      throw std::invalid_argument("chart point mass exceeds 1");
  }

  /// Mass of the dropped d-th state.
  double last_mass() const { return 1.0 - coords.sum(); }
};

/// Gradient of a chart function: (d/d eta_j) for j = 1..d-1.
struct ChartGradient {
  VectorXd values;

  ChartGradient() = default;
  explicit ChartGradient(VectorXd v) : values(std::move(v)) {
    if (!values.allFinite()) throw std::invalid_argument("chart gradient not finite");
  }
};

/// eta -> (eta_1, ..., eta_{d-1}, 1 - sum eta_j).
inline SimplexPoint lift(const ProjectedPoint& eta) {
  const int dm1 = static_cast<int>(eta.coords.size());
  VectorXd m(dm1 + 1);
  m.head(dm1) = eta.coords;
  m[dm1] = std::max(0.0, eta.last_mass());
  return SimplexPoint(std::move(m));
}

/// Drops the last coordinate; inverse of lift on the chart.
inline ProjectedPoint project(const SimplexPoint& m) {
  return ProjectedPoint(m.coords.head(m.states() - 1));
}

/// Uniform (flat Dirichlet) sample on S_d via normalized exponential spacings.
inline SimplexPoint sample_uniform(int d, std::mt19937_64& rng) {
  if (d < 2) throw std::invalid_argument("sample_uniform needs d >= 2");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  VectorXd e(d);
  for (int i = 0; i < d; ++i) {
    double u;
    do { u = unif(rng); } while (u <= 0.0);
    e[i] = -std::log(u);
  }
  e /= e.sum();
  return SimplexPoint(std::move(e));
}

/// Maps a chart gradient p to the directional-derivative argument of the i-th
/// modified Hamiltonian (states are 0-based here):
///   i < d-1 : (p_1 - p_i, ..., p_{d-1} - p_i, -p_i)
///   i = d-1 : (p, 0)
inline VectorXd chart_gradient_to_directional(const ChartGradient& p, int i) {
  const int dm1 = static_cast<int>(p.values.size());
  const int d = dm1 + 1;
  if (i < 0 || i >= d) throw std::out_of_range("state index out of range");
  VectorXd z(d);
  if (i == d - 1) {
    z.head(dm1) = p.values;
    z[dm1] = 0.0;
  } else {
    const double pi = p.values[i];
    z.head(dm1) = p.values.array() - pi;
    z[dm1] = -pi;
  }
  return z;
}

/// Adjoint of chart_gradient_to_directional: pulls a cotangent q in R^d back to
/// the chart, skipping the (vanishing) i-th component of z.
inline VectorXd chart_gradient_adjoint(const VectorXd& q, int i) {
  const int d = static_cast<int>(q.size());
  const int dm1 = d - 1;
  if (i < 0 || i >= d) throw std::out_of_range("state index out of range");
  VectorXd pbar(dm1);
  if (i == d - 1) {
    pbar = q.head(dm1);
  } else {
    pbar = q.head(dm1);
    pbar[i] = -(q.sum() - q[i]);
  }
  return pbar;
}

}  // namespace dgmfc
