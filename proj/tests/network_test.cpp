#include <gtest/gtest.h>

#include <random>

#include "dgmfc/network.hpp"

using namespace dgmfc;

namespace {

NetworkArchitecture make_arch(LayerKind kind, int d, int depth, int width) {
  NetworkArchitecture a;
  a.kind = kind;
  a.state_count = d;
  a.depth = depth;
  a.width = width;
  return a;
}

VectorXd random_theta(const Network& net, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 0.4);
  VectorXd theta(net.param_count());
  for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] = gauss(rng);
  return theta;
}

}  // namespace

TEST(Architecture, ParamCountFormula) {
  // plain: width*in + width + (depth-1)(width^2 + width) + width + 1
  Network plain(make_arch(LayerKind::PlainTanh, 3, 3, 5));
  EXPECT_EQ(plain.param_count(), 5 * 3 + 5 + 2 * (25 + 5) + 5 + 1);
  // gated: first transform + depth * 4 gates * (width*in + width^2 + width) + head
  Network gated(make_arch(LayerKind::GatedDgm, 3, 2, 5));
  EXPECT_EQ(gated.param_count(), 5 * 3 + 5 + 2 * 4 * (15 + 25 + 5) + 5 + 1);
  EXPECT_EQ(plain.init_params(0).size(), plain.param_count());
  EXPECT_EQ(gated.init_params(0).size(), gated.param_count());
}

TEST(Architecture, Validation) {
  EXPECT_THROW(Network(make_arch(LayerKind::PlainTanh, 1, 2, 4)), std::invalid_argument);
  EXPECT_THROW(Network(make_arch(LayerKind::PlainTanh, 2, 0, 4)), std::invalid_argument);
  EXPECT_THROW(Network(make_arch(LayerKind::GatedDgm, 2, 2, 0)), std::invalid_argument);
}

TEST(InitParams, DeterministicAndBounded) {
  Network net(make_arch(LayerKind::GatedDgm, 3, 2, 6));
  const VectorXd a = net.init_params(17), b = net.init_params(17), c = net.init_params(18);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_LE(a.cwiseAbs().maxCoeff(), 1.0);  // 1/sqrt(fan_in) <= 1
}

TEST(Evaluate, BatchMatchesSinglePoint) {
  std::mt19937_64 rng(3);
  for (LayerKind kind : {LayerKind::PlainTanh, LayerKind::GatedDgm}) {
    Network net(make_arch(kind, 3, 2, 7));
    const VectorXd theta = random_theta(net, rng);
    const int B = 40;
    VectorXd ts(B);
    MatrixXd etas(2, B);
    std::uniform_real_distribution<double> unif(0.0, 0.5);
    for (int j = 0; j < B; ++j) {
      ts[j] = unif(rng);
      etas(0, j) = unif(rng);
      etas(1, j) = unif(rng);
    }
    BatchEvaluation batch;
    net.evaluate_batch(theta, ts, etas, batch, true);
    for (int j = 0; j < B; ++j) {
      const auto one = net.evaluate(theta, ts[j], ProjectedPoint(etas.col(j)));
      EXPECT_NEAR(one.value, batch.value[j], 1e-13);
      EXPECT_NEAR(one.dt, batch.dt[j], 1e-13);
      EXPECT_LT((one.deta - batch.deta.col(j)).cwiseAbs().maxCoeff(), 1e-13);
    }
  }
}

TEST(Evaluate, LinearNetworkIsExact) {
  // Identity activation, depth 1 plain: phi = w . (W0 x + b0) + b.
  NetworkArchitecture arch = make_arch(LayerKind::PlainTanh, 3, 1, 4);
  arch.activation = Activation::Identity;
  Network net(arch);
  std::mt19937_64 rng(9);
  const VectorXd theta = random_theta(net, rng);
  const Eigen::Index n = 4, in = 3;
  Eigen::Map<const MatrixXd> W0(theta.data(), n, in);
  Eigen::Map<const VectorXd> b0(theta.data() + n * in, n);
  Eigen::Map<const VectorXd> w(theta.data() + n * in + n, n);
  const double b_out = theta[n * in + 2 * n];

  VectorXd etav(2);
  etav << 0.2, 0.3;
  const double t = 0.7;
  VectorXd x(3);
  x << 0.2, 0.3, 0.7;  // time is the last input coordinate
  const auto e = net.evaluate(theta, t, ProjectedPoint(etav));
  EXPECT_NEAR(e.value, w.dot(W0 * x + b0) + b_out, 1e-14);
  const VectorXd gx = W0.transpose() * w;
  EXPECT_NEAR(e.deta[0], gx[0], 1e-14);
  EXPECT_NEAR(e.deta[1], gx[1], 1e-14);
  EXPECT_NEAR(e.dt, gx[2], 1e-14);
}

TEST(Evaluate, TanhOutputIsBounded) {
  Network net(make_arch(LayerKind::GatedDgm, 2, 3, 5));
  std::mt19937_64 rng(21);
  const VectorXd theta = random_theta(net, rng);
  const Eigen::Index P = net.param_count();
  // |phi| <= |w|_1 * max|S| + |b|; gated states satisfy |S| <= 3 per layer worst case,
  // so just check finiteness and a generous bound.
  Eigen::Map<const VectorXd> w(theta.data() + P - 6, 5);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    VectorXd etav(1);
    etav << unif(rng);
    const auto e = net.evaluate(theta, unif(rng), ProjectedPoint(etav));
    EXPECT_TRUE(std::isfinite(e.value));
    EXPECT_LE(std::abs(e.value - theta[P - 1]), w.cwiseAbs().sum() * 100.0);
  }
}

TEST(Evaluate, RejectsBadShapesAndNonFiniteParams) {
  Network net(make_arch(LayerKind::PlainTanh, 3, 2, 4));
  VectorXd theta = net.init_params(0);
  VectorXd ts(2);
  ts << 0.1, 0.2;
  MatrixXd bad_etas(1, 2);  // should be 2 rows for d=3
  bad_etas.setZero();
  BatchEvaluation out;
  EXPECT_THROW(net.evaluate_batch(theta, ts, bad_etas, out), std::invalid_argument);
  theta[0] = std::numeric_limits<double>::quiet_NaN();
  MatrixXd etas = MatrixXd::Constant(2, 2, 0.2);
  EXPECT_THROW(net.evaluate_batch(theta, ts, etas, out), DivergenceError);
}

// Analytic input gradients vs central finite differences.
TEST(InputGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(2025);
  std::uniform_real_distribution<double> unif(0.05, 0.4);
  const double eps = 1e-6;
  for (int rep = 0; rep < 40; ++rep) {
    const int d = 2 + rep % 3;
    const LayerKind kind = (rep % 2 == 0) ? LayerKind::GatedDgm : LayerKind::PlainTanh;
    Network net(make_arch(kind, d, 1 + rep % 3, 4 + rep % 4));
    const VectorXd theta = random_theta(net, rng);
    VectorXd etav(d - 1);
    for (int k = 0; k < d - 1; ++k) etav[k] = unif(rng) / (d - 1);
    const double t = unif(rng);
    const auto e = net.evaluate(theta, t, ProjectedPoint(etav));

    const double vp = net.evaluate(theta, t + eps, ProjectedPoint(etav)).value;
    const double vm = net.evaluate(theta, t - eps, ProjectedPoint(etav)).value;
    const double fd_t = (vp - vm) / (2.0 * eps);
    EXPECT_NEAR(e.dt, fd_t, 1e-6 * std::max(1.0, std::abs(fd_t)));

    for (int k = 0; k < d - 1; ++k) {
      VectorXd hi = etav, lo = etav;
      hi[k] += eps;
      lo[k] -= eps;
      const double fp = net.evaluate(theta, t, ProjectedPoint(hi)).value;
      const double fm = net.evaluate(theta, t, ProjectedPoint(lo)).value;
      const double fd = (fp - fm) / (2.0 * eps);
      EXPECT_NEAR(e.deta[k], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

// Parameter gradients of a loss that mixes values and input gradients vs
// directional finite differences.
TEST(ParameterGradients, MixedLossDirectionalCheck) {
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> unif(0.05, 0.45);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const int d = 2 + rep % 2;
    const LayerKind kind = (rep % 2 == 0) ? LayerKind::GatedDgm : LayerKind::PlainTanh;
    Network net(make_arch(kind, d, 1 + rep % 2, 5));
    const VectorXd theta = random_theta(net, rng);
    const int B = 6;
    VectorXd ts(B);
    MatrixXd etas(d - 1, B);
    for (int j = 0; j < B; ++j) {
      ts[j] = unif(rng);
      for (int k = 0; k < d - 1; ++k) etas(k, j) = unif(rng) / (d - 1);
    }
    // loss = sum_j (cv_j value_j + ct_j dt_j + sum_k ce_kj deta_kj)
    VectorXd cv(B), ct(B);
    MatrixXd ce(d - 1, B);
    for (int j = 0; j < B; ++j) {
      cv[j] = gauss(rng);
      ct[j] = gauss(rng);
      for (int k = 0; k < d - 1; ++k) ce(k, j) = gauss(rng);
    }
    LossFunctional loss = [&](const BatchEvaluation& e, BatchAdjoint& seeds) {
      double L = 0.0;
      for (int j = 0; j < B; ++j) {
        L += cv[j] * e.value[j] + ct[j] * e.dt[j] + ce.col(j).dot(e.deta.col(j));
        seeds.value[j] = cv[j];
        seeds.dt[j] = ct[j];
        seeds.deta.col(j) = ce.col(j);
      }
      return L;
    };
    auto [L0, grad] = loss_gradient(net, theta, ts, etas, loss);
    (void)L0;

    // three random directions per configuration
    for (int dir = 0; dir < 3; ++dir) {
      VectorXd v(net.param_count());
      for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = gauss(rng);
      v /= v.norm();
      const double eps = 1e-6;
      auto eval_loss = [&](const VectorXd& th) {
        BatchEvaluation e;
        net.evaluate_batch(th, ts, etas, e, true);
        double L = 0.0;
        for (int j = 0; j < B; ++j)
          L += cv[j] * e.value[j] + ct[j] * e.dt[j] + ce.col(j).dot(e.deta.col(j));
        return L;
      };
      const double fd = (eval_loss(theta + eps * v) - eval_loss(theta - eps * v)) / (2.0 * eps);
      const double an = grad.dot(v);
      EXPECT_NEAR(an, fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(ParameterGradients, ValueOnlySeedsSkipTangentSweep) {
  std::mt19937_64 rng(8);
  Network net(make_arch(LayerKind::GatedDgm, 2, 2, 5));
  const VectorXd theta = random_theta(net, rng);
  const int B = 4;
  VectorXd ts = VectorXd::LinSpaced(B, 0.1, 0.4);
  MatrixXd etas = MatrixXd::Constant(1, B, 0.3);
  BatchAdjoint seeds;
  seeds.value = VectorXd::Ones(B);
  VectorXd grad_fast = VectorXd::Zero(net.param_count());
  net.accumulate_gradient(theta, ts, etas, seeds, grad_fast);

  // same gradient through the generic path with explicit zero tangent seeds
  LossFunctional loss = [&](const BatchEvaluation& e, BatchAdjoint& s) {
    s.value.setOnes();
    return e.value.sum();
  };
  auto [L, grad_full] = loss_gradient(net, theta, ts, etas, loss);
  (void)L;
  EXPECT_LT((grad_fast - grad_full).cwiseAbs().maxCoeff(), 1e-12);
}
