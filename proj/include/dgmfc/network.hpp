#pragma once

#include <array>
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

enum class LayerKind { PlainTanh, GatedDgm };
enum class Activation { Tanh, Identity };  // Identity exists for linear-case tests

struct NetworkArchitecture {
  LayerKind kind = LayerKind::GatedDgm;
  Activation activation = Activation::Tanh;
  int state_count = 2;  // d; network input is (eta, t) with eta in R^{d-1}
  int depth = 4;        // hidden layers
  int width = 8;

  int input_dim() const { return state_count; }

  void validate() const {
    if (state_count < 2) throw std::invalid_argument("architecture needs d >= 2");
    if (depth < 1) throw std::invalid_argument("depth must be >= 1");
    if (width < 1) throw std::invalid_argument("width must be >= 1");
  }

  Eigen::Index param_count() const {
    const Eigen::Index n = width, in = input_dim(), L = depth;
    if (kind == LayerKind::PlainTanh)
      return n * in + n + (L - 1) * (n * n + n) + n + 1;
    return n * in + n + L * 4 * (n * in + n * n + n) + n + 1;
  }
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Values and input derivatives for a batch; one column / entry per point.
struct BatchEvaluation {
  VectorXd value;  // B
  VectorXd dt;     // B (empty when input gradients were not requested)
  MatrixXd deta;   // (d-1) x B
};

/// Adjoint seeds dLoss/d(value, dt, deta) per point.
struct BatchAdjoint {
  VectorXd value;
  VectorXd dt;
  MatrixXd deta;
};

/// Feed-forward approximator phi(t, eta; theta) with analytic input gradients
/// (forward accumulation of per-layer JVPs) and parameter gradients of any
/// scalar built from values and input gradients (reverse sweep over the
/// combined value + tangent computation).
///
/// The gated layer follows the standard DGM recurrence: three tanh gate
/// transforms and one candidate transform over [input, state], merged as
/// S' = (1 - G) . H + Z . S. The output head is affine (unactivated) so the
/// value range is not confined to (-1, 1).
class Network {
 public:
  explicit Network(NetworkArchitecture arch) : arch_(arch) { arch_.validate(); }

  const NetworkArchitecture& arch() const { return arch_; }
  Eigen::Index param_count() const { return arch_.param_count(); }

  /// Weights uniform in +-1/sqrt(fan-in), biases zero; deterministic per seed.
  VectorXd init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    const int n = arch_.width, in = arch_.input_dim(), L = arch_.depth;
    VectorXd theta = VectorXd::Zero(param_count());
    Eigen::Index off = 0;
    auto fill = [&](Eigen::Index count, double fan_in) {
      const double s = 1.0 / std::sqrt(fan_in);
      for (Eigen::Index k = 0; k < count; ++k) theta[off + k] = s * unif(rng);
      off += count;
    };
    auto skip = [&](Eigen::Index count) { off += count; };  // biases stay zero
    if (arch_.kind == LayerKind::PlainTanh) {
      fill(n * in, in);
      skip(n);
      for (int l = 1; l < L; ++l) {
        fill(n * n, n);
        skip(n);
      }
    } else {
      fill(n * in, in);
      skip(n);
      for (int l = 0; l < L; ++l)
        for (int gate = 0; gate < 4; ++gate) {
          fill(n * in, in);
          fill(n * n, n);
          skip(n);
        }
    }
    fill(n, n);  // head weights
    skip(1);     // head bias
    return theta;
  }

  void evaluate_batch(const VectorXd& theta, const VectorXd& ts, const MatrixXd& etas,
                      BatchEvaluation& out, bool with_input_gradients = true) const {
    check_theta(theta);
    const Eigen::Index B = ts.size();
    if (etas.cols() != B || etas.rows() != arch_.state_count - 1)
      throw std::invalid_argument("batch shape mismatch");
    out.value.resize(B);
    if (with_input_gradients) {
      out.dt.resize(B);
      out.deta.resize(arch_.state_count - 1, B);
    } else {
      out.dt.resize(0);
      out.deta.resize(0, 0);
    }
    const Eigen::Index chunk = 2048;
    for (Eigen::Index s = 0; s < B; s += chunk) {
      const Eigen::Index c = std::min(chunk, B - s);
      forward_chunk(theta, ts.segment(s, c), etas.middleCols(s, c), out, s,
                    with_input_gradients, nullptr);
    }
    if (!out.value.allFinite() ||
        (with_input_gradients && (!out.dt.allFinite() || !out.deta.allFinite())))
      throw DivergenceError("network evaluation produced non-finite values");
  }

  DualEvaluation evaluate(const VectorXd& theta, double t, const ProjectedPoint& eta) const {
    VectorXd ts(1);
    ts[0] = t;
    BatchEvaluation be;
    evaluate_batch(theta, ts, eta.coords, be, true);
    return DualEvaluation{be.value[0], be.dt[0], be.deta.col(0)};
  }

  /// Accumulates d(sum_j seeds_j . outputs_j)/d(theta) into grad. Seeds for dt
  /// and deta may be empty, in which case only the value path is swept.
  void accumulate_gradient(const VectorXd& theta, const VectorXd& ts, const MatrixXd& etas,
                           const BatchAdjoint& seeds, VectorXd& grad) const {
    check_theta(theta);
    const Eigen::Index B = ts.size();
    if (B == 0) return;
    const bool tangents = seeds.dt.size() > 0;
    const Eigen::Index chunk = 1024;
    for (Eigen::Index s = 0; s < B; s += chunk) {
      const Eigen::Index c = std::min(chunk, B - s);
      reverse_chunk(theta, ts.segment(s, c), etas.middleCols(s, c), seeds, s, tangents, grad);
    }
    if (!grad.allFinite()) throw DivergenceError("parameter gradient is non-finite");
  }

 private:
  NetworkArchitecture arch_;

  void check_theta(const VectorXd& theta) const {
    if (theta.size() != param_count()) throw std::invalid_argument("parameter size mismatch");
    if (!theta.allFinite()) throw DivergenceError("parameters are non-finite");
  }

  // --- parameter layout ---------------------------------------------------
  using CMap = Eigen::Map<const MatrixXd>;
  using CVec = Eigen::Map<const VectorXd>;
  using MMap = Eigen::Map<MatrixXd>;
  using MVec = Eigen::Map<VectorXd>;

  struct GateOffsets {
    Eigen::Index u, w, b;
  };

  Eigen::Index first_w() const { return 0; }
  Eigen::Index first_b() const { return arch_.width * arch_.input_dim(); }
  Eigen::Index body() const { return first_b() + arch_.width; }

  // Plain MLP: hidden layer l in [1, depth-1] holds (W n*n, b n).
  Eigen::Index plain_layer(int l) const {
    const Eigen::Index n = arch_.width;
    return body() + (l - 1) * (n * n + n);
  }

  // Gated: layer l in [0, depth-1], gate in {0:z, 1:g, 2:r, 3:h}.
  GateOffsets gate(int l, int q) const {
    const Eigen::Index n = arch_.width, in = arch_.input_dim();
    const Eigen::Index per_gate = n * in + n * n + n;
    const Eigen::Index base = body() + (static_cast<Eigen::Index>(l) * 4 + q) * per_gate;
    return {base, base + n * in, base + n * in + n * n};
  }

  Eigen::Index head_w() const {
    const Eigen::Index n = arch_.width, in = arch_.input_dim(), L = arch_.depth;
    if (arch_.kind == LayerKind::PlainTanh) return body() + (L - 1) * (n * n + n);
    return body() + L * 4 * (n * in + n * n + n);
  }
  Eigen::Index head_b() const { return head_w() + arch_.width; }

  // --- activation ----------------------------------------------------------
  void apply_act(MatrixXd& p) const {
    if (arch_.activation == Activation::Tanh) p = p.array().tanh();
  }
  MatrixXd act_deriv(const MatrixXd& y) const {
    if (arch_.activation == Activation::Tanh) return (1.0 - y.array().square()).matrix();
    return MatrixXd::Ones(y.rows(), y.cols());
  }
  // d(act')/d(pre-activation), expressed through the output y.
  MatrixXd act_deriv2(const MatrixXd& y, const MatrixXd& d) const {
    if (arch_.activation == Activation::Tanh)
      return (-2.0 * y.array() * d.array()).matrix();
    return MatrixXd::Zero(y.rows(), y.cols());
  }

  // --- forward state produced while traversing one chunk --------------------
  struct Trace {
    MatrixXd x;                                       // in x B
    std::vector<MatrixXd> state;                      // depth+1 states, n x B
    std::vector<std::vector<MatrixXd>> state_dot;     // [layer][dir]
    // gated only: per layer, gate outputs and pre-activation tangents
    std::vector<std::array<MatrixXd, 4>> gates;                 // Z G R H
    std::vector<std::array<std::vector<MatrixXd>, 4>> gate_pre;  // [layer][gate][dir]
  };

  // Runs the forward pass on one chunk; writes outputs into `out` at column
  // offset `base`; optionally records the trace for a later reverse sweep.
  void forward_chunk(const VectorXd& theta, const Eigen::Ref<const VectorXd>& ts,
                     const Eigen::Ref<const MatrixXd>& etas, BatchEvaluation& out,
                     Eigen::Index base, bool tangents, Trace* trace) const {
    const int n = arch_.width, in = arch_.input_dim(), L = arch_.depth;
    const int dirs = tangents ? in : 0;
    const Eigen::Index B = ts.size();

    MatrixXd x(in, B);
    x.topRows(in - 1) = etas;
    x.row(in - 1) = ts.transpose();

    CMap W0(theta.data() + first_w(), n, in);
    CVec b0(theta.data() + first_b(), n);

    MatrixXd S = (W0 * x).colwise() + b0;
    apply_act(S);
    MatrixXd D = act_deriv(S);
    std::vector<MatrixXd> Sdot(dirs);
    for (int k = 0; k < dirs; ++k) Sdot[k] = D.array().colwise() * W0.col(k).array();

    if (trace) {
      trace->x = x;
      trace->state.assign(1, S);
      trace->state_dot.assign(1, Sdot);
      if (arch_.kind == LayerKind::GatedDgm) {
        trace->gates.resize(L);
        trace->gate_pre.resize(L);
      }
    }

    if (arch_.kind == LayerKind::PlainTanh) {
      for (int l = 1; l < L; ++l) {
        CMap W(theta.data() + plain_layer(l), n, n);
        CVec b(theta.data() + plain_layer(l) + n * n, n);
        std::vector<MatrixXd> pre(dirs);
        for (int k = 0; k < dirs; ++k) pre[k] = W * Sdot[k];
        MatrixXd Snew = (W * S).colwise() + b;
        apply_act(Snew);
        MatrixXd Dn = act_deriv(Snew);
        for (int k = 0; k < dirs; ++k) Sdot[k] = Dn.cwiseProduct(pre[k]);
        S = std::move(Snew);
        if (trace) {
          trace->state.push_back(S);
          trace->state_dot.push_back(Sdot);
          trace->gate_pre.resize(trace->gate_pre.size() + 1);
          trace->gate_pre.back()[0] = std::move(pre);  // reuse slot 0 for MLP pre-tangents
        }
      }
    } else {
      for (int l = 0; l < L; ++l) {
        std::array<MatrixXd, 4> g;       // Z G R H
        std::array<std::vector<MatrixXd>, 4> gp;
        // Z, G, R
        for (int q = 0; q < 3; ++q) {
          const GateOffsets go = gate(l, q);
          CMap U(theta.data() + go.u, n, in);
          CMap W(theta.data() + go.w, n, n);
          CVec b(theta.data() + go.b, n);
          g[q].noalias() = U * x;
          g[q].noalias() += W * S;
          g[q].colwise() += b;
          apply_act(g[q]);
          gp[q].resize(dirs);
          for (int k = 0; k < dirs; ++k) {
            gp[q][k].noalias() = W * Sdot[k];
            gp[q][k].colwise() += U.col(k);
          }
        }
        const MatrixXd& Z = g[0];
        const MatrixXd& G = g[1];
        const MatrixXd& R = g[2];
        // candidate transform over the reset state
        const GateOffsets ho = gate(l, 3);
        CMap Uh(theta.data() + ho.u, n, in);
        CMap Wh(theta.data() + ho.w, n, n);
        CVec bh(theta.data() + ho.b, n);
        MatrixXd Q = S.cwiseProduct(R);
        g[3].noalias() = Uh * x;
        g[3].noalias() += Wh * Q;
        g[3].colwise() += bh;
        apply_act(g[3]);
        const MatrixXd& H = g[3];
        MatrixXd DZ = act_deriv(Z), DG = act_deriv(G), DR = act_deriv(R), DH = act_deriv(H);
        gp[3].resize(dirs);
        std::vector<MatrixXd> Snew_dot(dirs);
        for (int k = 0; k < dirs; ++k) {
          MatrixXd Rdot = DR.cwiseProduct(gp[2][k]);
          MatrixXd Qdot = Sdot[k].cwiseProduct(R) + S.cwiseProduct(Rdot);
          gp[3][k].noalias() = Wh * Qdot;
          gp[3][k].colwise() += Uh.col(k);
          MatrixXd Hdot = DH.cwiseProduct(gp[3][k]);
          MatrixXd Zdot = DZ.cwiseProduct(gp[0][k]);
          MatrixXd Gdot = DG.cwiseProduct(gp[1][k]);
          Snew_dot[k] = -Gdot.cwiseProduct(H) + (MatrixXd::Ones(n, B) - G).cwiseProduct(Hdot) +
                        Zdot.cwiseProduct(S) + Z.cwiseProduct(Sdot[k]);
        }
        MatrixXd Snew = (MatrixXd::Ones(n, B) - G).cwiseProduct(H) + Z.cwiseProduct(S);
        S = std::move(Snew);
        Sdot = std::move(Snew_dot);
        if (trace) {
          trace->gates[l] = g;
          trace->gate_pre[l] = std::move(gp);
          trace->state.push_back(S);
          trace->state_dot.push_back(Sdot);
        }
      }
    }

    CVec w(theta.data() + head_w(), n);
    const double b_out = theta[head_b()];
    out.value.segment(base, B) = (w.transpose() * S).transpose().array() + b_out;
    if (tangents) {
      for (int k = 0; k < in - 1; ++k)
        out.deta.row(k).segment(base, B) = w.transpose() * Sdot[k];
      out.dt.segment(base, B) = (w.transpose() * Sdot[in - 1]).transpose();
    }
  }

  void reverse_chunk(const VectorXd& theta, const Eigen::Ref<const VectorXd>& ts,
                     const Eigen::Ref<const MatrixXd>& etas, const BatchAdjoint& seeds,
                     Eigen::Index base, bool tangents, VectorXd& grad) const {
    const int n = arch_.width, in = arch_.input_dim(), L = arch_.depth;
    const int dirs = tangents ? in : 0;
    const Eigen::Index B = ts.size();

    Trace tr;
    BatchEvaluation scratch;
    scratch.value.resize(base + B);
    if (tangents) {
      scratch.dt.resize(base + B);
      scratch.deta.resize(in - 1, base + B);
    }
    forward_chunk(theta, ts, etas, scratch, base, tangents, &tr);

    CVec w(theta.data() + head_w(), n);
    MVec gw(grad.data() + head_w(), n);
    const MatrixXd& SL = tr.state.back();

    // head: value and tangent seeds
    VectorXd sbar = seeds.value.segment(base, B);
    MatrixXd Sbar;
    Sbar.noalias() = w * sbar.transpose();
    gw += SL * sbar;
    grad[head_b()] += sbar.sum();
    std::vector<MatrixXd> Sdot_bar(dirs);
    for (int k = 0; k < dirs; ++k) {
      VectorXd gk = (k == in - 1) ? VectorXd(seeds.dt.segment(base, B))
                                  : VectorXd(seeds.deta.row(k).segment(base, B).transpose());
      gw += tr.state_dot.back()[k] * gk;
      Sdot_bar[k] = w * gk.transpose();
    }

    if (arch_.kind == LayerKind::PlainTanh) {
      for (int l = L - 1; l >= 1; --l) {
        const MatrixXd& S = tr.state[l];
        MatrixXd D = act_deriv(S);
        MatrixXd DD = act_deriv2(S, D);
        MatrixXd Abar = D.cwiseProduct(Sbar);
        const auto& pre = tr.gate_pre[l - 1][0];
        for (int k = 0; k < dirs; ++k)
          Abar += DD.cwiseProduct(pre[k]).cwiseProduct(Sdot_bar[k]);
        CMap W(theta.data() + plain_layer(l), n, n);
        MMap gW(grad.data() + plain_layer(l), n, n);
        MVec gb(grad.data() + plain_layer(l) + n * n, n);
        const MatrixXd& Sprev = tr.state[l - 1];
        gW.noalias() += Abar * Sprev.transpose();
        gb += Abar.rowwise().sum();
        MatrixXd Sbar_prev;
        Sbar_prev.noalias() = W.transpose() * Abar;
        for (int k = 0; k < dirs; ++k) {
          MatrixXd pbar = D.cwiseProduct(Sdot_bar[k]);
          gW.noalias() += pbar * tr.state_dot[l - 1][k].transpose();
          Sdot_bar[k] = W.transpose() * pbar;
        }
        Sbar = std::move(Sbar_prev);
      }
    } else {
      for (int l = L - 1; l >= 0; --l) {
        const MatrixXd& Sin = tr.state[l];
        const auto& Sdot_in = tr.state_dot[l];
        const MatrixXd& Z = tr.gates[l][0];
        const MatrixXd& G = tr.gates[l][1];
        const MatrixXd& R = tr.gates[l][2];
        const MatrixXd& H = tr.gates[l][3];
        const auto& gp = tr.gate_pre[l];
        MatrixXd DZ = act_deriv(Z), DG = act_deriv(G), DR = act_deriv(R), DH = act_deriv(H);
        MatrixXd oneG = MatrixXd::Ones(n, B) - G;

        // combine node S' = (1-G).H + Z.Sin
        MatrixXd Zbar = Sin.cwiseProduct(Sbar);
        MatrixXd Gbar = -H.cwiseProduct(Sbar);
        MatrixXd Hbar = oneG.cwiseProduct(Sbar);
        MatrixXd Sin_bar = Z.cwiseProduct(Sbar);
        std::vector<MatrixXd> Zdot_bar(dirs), Gdot_bar(dirs), Hdot_bar(dirs), Sdot_in_bar(dirs);
        for (int k = 0; k < dirs; ++k) {
          const MatrixXd& sdb = Sdot_bar[k];
          MatrixXd Zdot = DZ.cwiseProduct(gp[0][k]);
          MatrixXd Gdot = DG.cwiseProduct(gp[1][k]);
          MatrixXd Hdot = DH.cwiseProduct(gp[3][k]);
          Zdot_bar[k] = Sin.cwiseProduct(sdb);
          Gdot_bar[k] = -H.cwiseProduct(sdb);
          Hdot_bar[k] = oneG.cwiseProduct(sdb);
          Hbar += -Gdot.cwiseProduct(sdb);
          Gbar += -Hdot.cwiseProduct(sdb);
          Zbar += Sdot_in[k].cwiseProduct(sdb);
          Sin_bar += Zdot.cwiseProduct(sdb);
          Sdot_in_bar[k] = Z.cwiseProduct(sdb);
        }

        // candidate gate: H = act(Uh x + Wh (Sin.R) + bh)
        {
          const GateOffsets ho = gate(l, 3);
          CMap Uh(theta.data() + ho.u, n, in);
          CMap Wh(theta.data() + ho.w, n, n);
          MMap gU(grad.data() + ho.u, n, in);
          MMap gW(grad.data() + ho.w, n, n);
          MVec gb(grad.data() + ho.b, n);
          MatrixXd DDH = act_deriv2(H, DH);
          MatrixXd Pbar = DH.cwiseProduct(Hbar);
          for (int k = 0; k < dirs; ++k)
            Pbar += DDH.cwiseProduct(gp[3][k]).cwiseProduct(Hdot_bar[k]);
          MatrixXd Q = Sin.cwiseProduct(R);
          gU.noalias() += Pbar * tr.x.transpose();
          gW.noalias() += Pbar * Q.transpose();
          gb += Pbar.rowwise().sum();
          MatrixXd Qbar;
          Qbar.noalias() = Wh.transpose() * Pbar;
          MatrixXd Rbar = Sin.cwiseProduct(Qbar);
          Sin_bar += R.cwiseProduct(Qbar);
          std::vector<MatrixXd> Rdot_bar(dirs);
          for (int k = 0; k < dirs; ++k) {
            MatrixXd pbar = DH.cwiseProduct(Hdot_bar[k]);
            MatrixXd Rdot = DR.cwiseProduct(gp[2][k]);
            MatrixXd Qdot = Sdot_in[k].cwiseProduct(R) + Sin.cwiseProduct(Rdot);
            gW.noalias() += pbar * Qdot.transpose();
            gU.col(k) += pbar.rowwise().sum();
            MatrixXd Qdot_bar;
            Qdot_bar.noalias() = Wh.transpose() * pbar;
            Sdot_in_bar[k] += R.cwiseProduct(Qdot_bar);
            Rbar += Sdot_in[k].cwiseProduct(Qdot_bar);
            Rdot_bar[k] = Sin.cwiseProduct(Qdot_bar);
            Sin_bar += Rdot.cwiseProduct(Qdot_bar);
          }
          reverse_gate(theta, grad, l, 2, R, DR, gp[2], Rbar, Rdot_bar, Sin, Sdot_in,
                       tr.x, Sin_bar, Sdot_in_bar, dirs);
        }
        reverse_gate(theta, grad, l, 0, Z, DZ, gp[0], Zbar, Zdot_bar, Sin, Sdot_in,
                     tr.x, Sin_bar, Sdot_in_bar, dirs);
        reverse_gate(theta, grad, l, 1, G, DG, gp[1], Gbar, Gdot_bar, Sin, Sdot_in,
                     tr.x, Sin_bar, Sdot_in_bar, dirs);

        Sbar = std::move(Sin_bar);
        Sdot_bar = std::move(Sdot_in_bar);
      }
    }

    // first transform S1 = act(W0 x + b0); tangent pre-activations are W0 columns
    {
      const MatrixXd& S1 = tr.state[0];
      MatrixXd D0 = act_deriv(S1);
      MatrixXd DD0 = act_deriv2(S1, D0);
      CMap W0(theta.data() + first_w(), n, in);
      MMap gW0(grad.data() + first_w(), n, in);
      MVec gb0(grad.data() + first_b(), n);
      MatrixXd Pbar = D0.cwiseProduct(Sbar);
      for (int k = 0; k < dirs; ++k) {
        MatrixXd pre = MatrixXd::Zero(n, B);
        pre.colwise() += W0.col(k);
        Pbar += DD0.cwiseProduct(pre).cwiseProduct(Sdot_bar[k]);
        gW0.col(k) += D0.cwiseProduct(Sdot_bar[k]).rowwise().sum();
      }
      gW0.noalias() += Pbar * tr.x.transpose();
      gb0 += Pbar.rowwise().sum();
    }
  }

  // Reverse through one tanh gate P = act(U x + W Sin + b) with output adjoint
  // Ybar and tangent adjoints Ydot_bar; accumulates into grad and into the
  // incoming state adjoints.
  void reverse_gate(const VectorXd& theta, VectorXd& grad, int l, int q, const MatrixXd& Y,
                    const MatrixXd& DY, const std::vector<MatrixXd>& pre, const MatrixXd& Ybar,
                    const std::vector<MatrixXd>& Ydot_bar, const MatrixXd& Sin,
                    const std::vector<MatrixXd>& Sdot_in, const MatrixXd& x, MatrixXd& Sin_bar,
                    std::vector<MatrixXd>& Sdot_in_bar, int dirs) const {
    const int n = arch_.width, in = arch_.input_dim();
    const GateOffsets go = gate(l, q);
    CMap U(theta.data() + go.u, n, in);
    CMap W(theta.data() + go.w, n, n);
    MMap gU(grad.data() + go.u, n, in);
    MMap gW(grad.data() + go.w, n, n);
    MVec gb(grad.data() + go.b, n);
    MatrixXd DDY = act_deriv2(Y, DY);
    MatrixXd Pbar = DY.cwiseProduct(Ybar);
    for (int k = 0; k < dirs; ++k)
      Pbar += DDY.cwiseProduct(pre[k]).cwiseProduct(Ydot_bar[k]);
    gU.noalias() += Pbar * x.transpose();
    gW.noalias() += Pbar * Sin.transpose();
    gb += Pbar.rowwise().sum();
    Sin_bar.noalias() += W.transpose() * Pbar;
    for (int k = 0; k < dirs; ++k) {
      MatrixXd pbar = DY.cwiseProduct(Ydot_bar[k]);
      gW.noalias() += pbar * Sdot_in[k].transpose();
      gU.col(k) += pbar.rowwise().sum();
      Sdot_in_bar[k].noalias() += W.transpose() * pbar;
    }
  }
};

/// A loss over a batch evaluation: returns the loss value and fills the adjoint
/// seeds (pre-zeroed) for every output it depends on.
using LossFunctional = std::function<double(const BatchEvaluation&, BatchAdjoint&)>;

/// Evaluates the batch, applies the loss functional, and sweeps the reverse
/// pass over the columns with nonzero seeds. Returns (loss, dLoss/dtheta).
inline std::pair<double, VectorXd> loss_gradient(const Network& net, const VectorXd& theta,
                                                 const VectorXd& ts, const MatrixXd& etas,
                                                 const LossFunctional& loss) {
  BatchEvaluation eval;
  net.evaluate_batch(theta, ts, etas, eval, true);
  const Eigen::Index B = ts.size();
  const Eigen::Index dm1 = etas.rows();
  BatchAdjoint seeds;
  seeds.value = VectorXd::Zero(B);
  seeds.dt = VectorXd::Zero(B);
  seeds.deta = MatrixXd::Zero(dm1, B);
  const double value = loss(eval, seeds);
  if (!std::isfinite(value)) throw DivergenceError("loss is non-finite");

  // compact to the columns the loss actually touches
  std::vector<Eigen::Index> active;
  active.reserve(B);
  for (Eigen::Index j = 0; j < B; ++j)
    if (seeds.value[j] != 0.0 || seeds.dt[j] != 0.0 || seeds.deta.col(j).any())
      active.push_back(j);
  VectorXd grad = VectorXd::Zero(net.param_count());
  if (!active.empty()) {
    const Eigen::Index A = static_cast<Eigen::Index>(active.size());
    VectorXd cts(A);
    MatrixXd cetas(dm1, A);
    BatchAdjoint cseeds;
    cseeds.value.resize(A);
    cseeds.dt.resize(A);
    cseeds.deta.resize(dm1, A);
    for (Eigen::Index a = 0; a < A; ++a) {
      const Eigen::Index j = active[a];
      cts[a] = ts[j];
      cetas.col(a) = etas.col(j);
      cseeds.value[a] = seeds.value[j];
      cseeds.dt[a] = seeds.dt[j];
      cseeds.deta.col(a) = seeds.deta.col(j);
    }
    net.accumulate_gradient(theta, cts, cetas, cseeds, grad);
  }
  return {value, std::move(grad)};
}

}  // namespace dgmfc
