#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "dgmfc/mfcp.hpp"
#include "dgmfc/network.hpp"
#include "dgmfc/simplex.hpp"

namespace dgmfc {

enum class LossKind { Uniform, L2 };
enum class ResamplePolicy { PerEpoch, PerStep };

struct TrainingConfig {
  LossKind loss = LossKind::Uniform;
  int samples = 10000;          // K interior points per batch (terminal gets K/10)
  int epochs = 200;             // E
  int steps_per_epoch = 10;     // S
  double peak_lr = 0.0008;
  double weight_decay = 1e-4;   // decoupled
  double clip_norm = 1.0;       // global gradient-norm clip
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double tau_scale = 0.01;      // smooth-max temperature = tau_scale * max |value|
  // Reverse-sweep budget per batch: when the softmax spreads over more columns
  // than this, an unbiased multinomial resampling of the weights is used so the
  // per-step cost stays bounded. 0 disables the cap.
  int max_active = 1024;
  double delta = 1e-6;          // stop once the hard-max sampled loss < delta
  ResamplePolicy resample = ResamplePolicy::PerEpoch;
  std::uint64_t seed = 0;

  void validate() const {
    if (samples < 1 || epochs < 0 || steps_per_epoch < 1)
      throw std::invalid_argument("bad training sizes");
    if (tau_scale <= 0.0) throw std::invalid_argument("temperature must be positive");
    if (delta <= 0.0 || delta >= 1.0) throw std::invalid_argument("delta must be in (0,1)");
  }
};

/// Interior collocation points (t, eta) and terminal points p.
struct CollocationBatch {
  VectorXd interior_t;      // K
  MatrixXd interior_eta;    // (d-1) x K
  MatrixXd terminal_eta;    // (d-1) x Kt, Kt = max(K/10, min(K, 64))
};

struct LossReport {
  int epoch = 0;
  double pde_loss = 0.0;
  double terminal_loss = 0.0;
  double combined_loss = 0.0;
  double seconds = 0.0;
};

inline CollocationBatch sample_batch(const MfcpSpec& spec, int K, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif_t(0.0, spec.T);
  CollocationBatch b;
  b.interior_t.resize(K);
  b.interior_eta.resize(spec.d - 1, K);
  // The terminal condition lives on a (d-1)-dimensional slice and needs no
  // time sampling, so a tenth of the interior budget covers it just as well.
  const int Kt = std::max(K / 10, std::min(K, 64));
  b.terminal_eta.resize(spec.d - 1, Kt);
  for (int j = 0; j < K; ++j) {
    b.interior_t[j] = unif_t(rng);
    b.interior_eta.col(j) = project(sample_uniform(spec.d, rng)).coords;
  }
  for (int j = 0; j < Kt; ++j)
    b.terminal_eta.col(j) = project(sample_uniform(spec.d, rng)).coords;
  return b;
}

/// Stable log-sum-exp smooth maximum: max(v) <= result <= max(v) + tau*log(n).
inline double smooth_max(const VectorXd& values, double tau) {
  if (values.size() == 0) throw std::invalid_argument("smooth_max of empty set");
  if (tau <= 0.0) throw std::invalid_argument("temperature must be positive");
  const double m = values.maxCoeff();
  double s = 0.0;
  for (Eigen::Index k = 0; k < values.size(); ++k) s += std::exp((values[k] - m) / tau);
  return m + tau * std::log(s);
}

/// d(smooth_max)/d(values): the softmax weights at temperature tau.
inline VectorXd smooth_max_weights(const VectorXd& values, double tau) {
  const double m = values.maxCoeff();
  VectorXd w = ((values.array() - m) / tau).exp();
  return w / w.sum();
}

namespace detail {

// Per-batch residuals and terminal mismatches for given parameters.
struct BatchResiduals {
  VectorXd residual;   // K interior PDE residuals
  VectorXd mismatch;   // K terminal mismatches phi(T,p) - G(p)
};

inline BatchResiduals compute_residuals(const MfcpSpec& spec, const BatchEvaluation& interior,
                                        const BatchEvaluation& terminal,
                                        const CollocationBatch& batch) {
  const Eigen::Index K = batch.interior_t.size();
  BatchResiduals r;
  r.residual.resize(K);
  for (Eigen::Index j = 0; j < K; ++j) {
    DualEvaluation e{interior.value[j], interior.dt[j], interior.deta.col(j)};
    ProjectedPoint eta(batch.interior_eta.col(j));
    r.residual[j] = hjb_residual(spec, e, batch.interior_t[j], eta);
  }
  const Eigen::Index Kt = batch.terminal_eta.cols();
  r.mismatch.resize(Kt);
  for (Eigen::Index j = 0; j < Kt; ++j) {
    ProjectedPoint p(batch.terminal_eta.col(j));
    r.mismatch[j] = terminal.value[j] - spec.terminal_value_chart(p);
  }
  return r;
}

}  // namespace detail

/// Hard-max sampled loss of the batch: max_j |residual_j| + max_j |mismatch_j|.
/// Returned as (combined, pde, terminal).
inline std::tuple<double, double, double> sampled_uniform_loss(const MfcpSpec& spec,
                                                               const Network& net,
                                                               const VectorXd& theta,
                                                               const CollocationBatch& batch) {
  if (batch.interior_t.size() == 0) throw std::invalid_argument("empty batch");
  BatchEvaluation interior, terminal;
  net.evaluate_batch(theta, batch.interior_t, batch.interior_eta, interior, true);
  VectorXd tT = VectorXd::Constant(batch.terminal_eta.cols(), spec.T);
  net.evaluate_batch(theta, tT, batch.terminal_eta, terminal, false);
  auto r = detail::compute_residuals(spec, interior, terminal, batch);
  const double pde = r.residual.cwiseAbs().maxCoeff();
  const double term = r.mismatch.cwiseAbs().maxCoeff();
  return {pde + term, pde, term};
}

/// Monte Carlo L2 loss: mean squared residual + mean squared terminal mismatch.
inline std::tuple<double, double, double> sampled_l2_loss(const MfcpSpec& spec,
                                                          const Network& net,
                                                          const VectorXd& theta,
                                                          const CollocationBatch& batch) {
  if (batch.interior_t.size() == 0) throw std::invalid_argument("empty batch");
  BatchEvaluation interior, terminal;
  net.evaluate_batch(theta, batch.interior_t, batch.interior_eta, interior, true);
  VectorXd tT = VectorXd::Constant(batch.terminal_eta.cols(), spec.T);
  net.evaluate_batch(theta, tT, batch.terminal_eta, terminal, false);
  auto r = detail::compute_residuals(spec, interior, terminal, batch);
  const double pde = r.residual.squaredNorm() / static_cast<double>(r.residual.size());
  const double term = r.mismatch.squaredNorm() / static_cast<double>(r.mismatch.size());
  return {pde + term, pde, term};
}

/// One-cycle schedule: cosine warmup from peak/25 over the first 30% of steps,
/// cosine decay to peak/(25 * 1e4) afterwards.
inline double lr_schedule(int step, int total, double peak) {
  if (step < 0 || step >= total) throw std::out_of_range("schedule step out of range");
  constexpr double div = 25.0;
  const double lo = peak / div;
  const double final_lr = peak / (div * 1e4);
  const int warm = static_cast<int>(std::llround(0.3 * total));
  if (step <= warm) {
    if (warm == 0) return peak;
    const double s = static_cast<double>(step) / warm;
    return lo + (peak - lo) * 0.5 * (1.0 - std::cos(M_PI * s));
  }
  const double s = static_cast<double>(step - warm) / std::max(1, total - 1 - warm);
  return final_lr + (peak - final_lr) * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, s)));
}

namespace detail {

struct AdamState {
  VectorXd m, v;
  long t = 0;

  explicit AdamState(Eigen::Index P) : m(VectorXd::Zero(P)), v(VectorXd::Zero(P)) {}

  void step(VectorXd& theta, const VectorXd& grad, const TrainingConfig& cfg, double lr) {
    VectorXd g = grad;
    const double norm = g.norm();
    if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) g *= cfg.clip_norm / norm;
    ++t;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    theta.array() -= lr * cfg.weight_decay * theta.array();  // decoupled decay
    theta.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
  }
};

// Unbiased multinomial compression of an adjoint weight vector: keeps at most
// `cap` nonzero entries while preserving the seeded gradient in expectation.
// Exact (a no-op) whenever the active set already fits within the cap.
inline void compress_adjoint(VectorXd& w, int cap, std::mt19937_64& rng) {
  const Eigen::Index n = w.size();
  if (cap <= 0) return;
  Eigen::Index active = 0;
  for (Eigen::Index j = 0; j < n; ++j)
    if (w[j] != 0.0) ++active;
  if (active <= cap) return;
  const VectorXd aw = w.cwiseAbs();
  const double total = aw.sum();
  if (!(total > 0.0)) return;
  std::discrete_distribution<Eigen::Index> pick(aw.data(), aw.data() + n);
  VectorXd counts = VectorXd::Zero(n);
  for (int s = 0; s < cap; ++s) counts[pick(rng)] += 1.0;
  for (Eigen::Index j = 0; j < n; ++j)
    w[j] = (counts[j] == 0.0)
               ? 0.0
               : counts[j] / cap * total * (w[j] >= 0.0 ? 1.0 : -1.0);
}

// Differentiable training loss on one batch, with adjoint seeds. The uniform
// loss differentiates log-sum-exp at temperatures frozen from the current
// residual magnitudes; weights below 1e-10 of the total are dropped. When an
// RNG is supplied, adjoint weight vectors wider than cfg.max_active are
// compressed by unbiased resampling to bound the reverse-sweep cost.
inline double training_loss_and_gradient(const MfcpSpec& spec, const Network& net,
                                         const VectorXd& theta, const CollocationBatch& batch,
                                         const TrainingConfig& cfg, VectorXd& grad,
                                         std::mt19937_64* rng = nullptr) {
  const Eigen::Index K = batch.interior_t.size();
  BatchEvaluation interior, terminal;
  net.evaluate_batch(theta, batch.interior_t, batch.interior_eta, interior, true);
  VectorXd tT = VectorXd::Constant(batch.terminal_eta.cols(), spec.T);
  net.evaluate_batch(theta, tT, batch.terminal_eta, terminal, false);
  auto r = compute_residuals(spec, interior, terminal, batch);

  double loss;
  VectorXd dres(K), dmis(r.mismatch.size());
  if (cfg.loss == LossKind::Uniform) {
    const VectorXd ar = r.residual.cwiseAbs();
    const VectorXd am = r.mismatch.cwiseAbs();
    const double tau_r = std::max(cfg.tau_scale * ar.maxCoeff(), 1e-8);
    const double tau_m = std::max(cfg.tau_scale * am.maxCoeff(), 1e-8);
    loss = smooth_max(ar, tau_r) + smooth_max(am, tau_m);
    VectorXd wr = smooth_max_weights(ar, tau_r);
    VectorXd wm = smooth_max_weights(am, tau_m);
    for (Eigen::Index j = 0; j < K; ++j)
      dres[j] = (wr[j] < 1e-10) ? 0.0 : wr[j] * (r.residual[j] >= 0.0 ? 1.0 : -1.0);
    for (Eigen::Index j = 0; j < dmis.size(); ++j)
      dmis[j] = (wm[j] < 1e-10) ? 0.0 : wm[j] * (r.mismatch[j] >= 0.0 ? 1.0 : -1.0);
  } else {
    loss = r.residual.squaredNorm() / K +
           r.mismatch.squaredNorm() / r.mismatch.size();
    dres = 2.0 * r.residual / static_cast<double>(K);
    dmis = 2.0 * r.mismatch / static_cast<double>(r.mismatch.size());
  }
  // 1e12 is far above any sane problem scale but still catches runaway
  // parameters long before they overflow to inf.
  if (!std::isfinite(loss) || loss > 1e12)
    throw DivergenceError("training loss diverged");

  if (rng != nullptr) {
    compress_adjoint(dres, cfg.max_active, *rng);
    compress_adjoint(dmis, cfg.max_active, *rng);
  }

  grad.setZero();

  // interior points: seed dt and deta through the residual operator
  std::vector<Eigen::Index> act;
  for (Eigen::Index j = 0; j < K; ++j)
    if (dres[j] != 0.0) act.push_back(j);
  if (!act.empty()) {
    const Eigen::Index A = static_cast<Eigen::Index>(act.size());
    VectorXd cts(A);
    MatrixXd cetas(spec.d - 1, A);
    BatchAdjoint seeds;
    seeds.value = VectorXd::Zero(A);
    seeds.dt.resize(A);
    seeds.deta.resize(spec.d - 1, A);
    for (Eigen::Index a = 0; a < A; ++a) {
      const Eigen::Index j = act[a];
      cts[a] = batch.interior_t[j];
      cetas.col(a) = batch.interior_eta.col(j);
      DualEvaluation e{interior.value[j], interior.dt[j], interior.deta.col(j)};
      ProjectedPoint eta(batch.interior_eta.col(j));
      seeds.dt[a] = -dres[j];
      seeds.deta.col(a) = dres[j] * hjb_residual_deta_gradient(spec, e, eta);
    }
    net.accumulate_gradient(theta, cts, cetas, seeds, grad);
  }

  // terminal points: value-only path
  std::vector<Eigen::Index> actm;
  for (Eigen::Index j = 0; j < dmis.size(); ++j)
    if (dmis[j] != 0.0) actm.push_back(j);
  if (!actm.empty()) {
    const Eigen::Index A = static_cast<Eigen::Index>(actm.size());
    VectorXd cts = VectorXd::Constant(A, spec.T);
    MatrixXd cetas(spec.d - 1, A);
    BatchAdjoint seeds;
    seeds.value.resize(A);
    for (Eigen::Index a = 0; a < A; ++a) {
      seeds.value[a] = dmis[actm[a]];
      cetas.col(a) = batch.terminal_eta.col(actm[a]);
    }
    net.accumulate_gradient(theta, cts, cetas, seeds, grad);
  }
  return loss;
}

}  // namespace detail

struct TrainResult {
  VectorXd theta;
  std::vector<LossReport> history;
  bool early_stopped = false;
};

/// Trains phi to minimize the sampled loss: E epochs of S Adam steps on one
/// fresh batch per epoch (optionally per step). Stops early once the hard-max
/// sampled loss drops below delta. Deterministic given the seed.
inline TrainResult train(const MfcpSpec& spec, const NetworkArchitecture& arch,
                         const TrainingConfig& cfg) {
  spec.validate();
  cfg.validate();
  Network net(arch);
  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  result.theta = net.init_params(cfg.seed);
  if (cfg.epochs == 0) return result;

  detail::AdamState adam(net.param_count());
  const int total_steps = cfg.epochs * cfg.steps_per_epoch;
  VectorXd grad(net.param_count());
  int step = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    CollocationBatch batch = sample_batch(spec, cfg.samples, rng);
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      if (cfg.resample == ResamplePolicy::PerStep && s > 0)
        batch = sample_batch(spec, cfg.samples, rng);
      double loss;
      try {
        loss = detail::training_loss_and_gradient(spec, net, result.theta, batch, cfg, grad, &rng);
        (void)loss;
      } catch (const DivergenceError& err) {
        throw DivergenceError(std::string(err.what()) + " at epoch " + std::to_string(epoch));
      }
      adam.step(result.theta, grad, cfg, lr_schedule(step, total_steps, cfg.peak_lr));
      ++step;
    }
    auto [combined, pde, term] = (cfg.loss == LossKind::Uniform)
                                     ? sampled_uniform_loss(spec, net, result.theta, batch)
                                     : sampled_l2_loss(spec, net, result.theta, batch);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back({epoch, pde, term, combined, secs});
    if (combined < cfg.delta) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace dgmfc
