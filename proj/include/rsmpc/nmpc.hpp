// Nonlinear MPC for the resonant tank under the switching-time transformation.
//
// One decision pair (f_sw, D) per switching period; each period is an ON and
// an OFF control interval, so a horizon of N control intervals carries N/2
// pairs. States are eliminated by exact segment propagation, which leaves a
// small dense bound-constrained problem with N sign constraints on the
// boundary currents.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsmpc/plant.hpp"
#include "rsmpc/transform.hpp"

namespace rsmpc {

struct NmpcConfig {
  ConverterParams model;
  int horizon_n = 10;
  double alpha = 5e-8;
  double f_min = 30e3;
  double f_max = 100e3;
  double d_min = 0.2;
  double d_max = 0.8;
  // Boundary currents must clear zero by this much [A]; sized so that the
  // +-15% R_L, L_r corners of the plant still switch at zero voltage.
  double zvs_margin = 10.0;
  int col_degree = 2;
  int col_elements = 100;
  double tol_grad = 1e-6;        // scaled projected-gradient tolerance
  double tol_constraint = 1e-6;  // [A]
  int max_iterations = 200;      // inner iterations per penalty update
  int max_outer = 40;
  double penalty_init = 10.0;
  double penalty_growth = 2.0;

  int cycles() const { return horizon_n / 2; }

  void validate() const {
    model.validate();
    if (horizon_n < 2 || horizon_n % 2 != 0) throw std::invalid_argument("NmpcConfig: horizon_n must be even and >= 2");
    if (!(f_min > 0.0 && f_min < f_max)) throw std::invalid_argument("NmpcConfig: require 0 < f_min < f_max");
    if (!(d_min > 0.0 && d_min < d_max && d_max < 1.0)) throw std::invalid_argument("NmpcConfig: require 0 < d_min < d_max < 1");
    if (!(alpha >= 0.0)) throw std::invalid_argument("NmpcConfig: alpha must be >= 0");
    if (!(zvs_margin >= 0.0)) throw std::invalid_argument("NmpcConfig: zvs_margin must be >= 0");
    if (max_iterations < 0 || max_outer < 1) throw std::invalid_argument("NmpcConfig: bad iteration limits");
  }

  ControlInput box_center() const { return {0.5 * (f_min + f_max), 0.5 * (d_min + d_max)}; }
};

enum class SolverStatus { Converged, MaxIter, Infeasible };

inline const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::Converged: return "converged";
    case SolverStatus::MaxIter: return "max-iter";
    case SolverStatus::Infeasible: return "infeasible";
  }
  return "unknown";
}

struct NmpcSolution {
  std::vector<ControlInput> inputs;      // one per switching period
  std::vector<double> powers;            // P_{o,k}, k = 0..N-1
  std::vector<PlantState> boundary;      // x_k, k = 0..N
  double cost = std::numeric_limits<double>::infinity();
  double max_violation = std::numeric_limits<double>::infinity();  // [A]
  SolverStatus status = SolverStatus::MaxIter;
  int iterations = 0;
};

namespace detail {

/// Boundary states, cycle powers and their derivatives with respect to the
/// normalized decision vector z in [0, 1]^(2M), z = (f_0, D_0, f_1, D_1, ...).
struct HorizonEval {
  std::vector<PlantState> boundary;
  std::vector<double> power;
  Eigen::MatrixXd dpower;    // M x 2M
  Eigen::MatrixXd dcurrent;  // (N+1) x 2M
};

inline ControlInput decode(const NmpcConfig& cfg, const Eigen::VectorXd& z, int j) {
  return {cfg.f_min + z(2 * j) * (cfg.f_max - cfg.f_min),
          cfg.d_min + z(2 * j + 1) * (cfg.d_max - cfg.d_min)};
}

inline void encode(const NmpcConfig& cfg, const ControlInput& u, Eigen::VectorXd& z, int j) {
  z(2 * j) = std::clamp((u.f_sw - cfg.f_min) / (cfg.f_max - cfg.f_min), 0.0, 1.0);
  z(2 * j + 1) = std::clamp((u.duty - cfg.d_min) / (cfg.d_max - cfg.d_min), 0.0, 1.0);
}

inline void evaluate_horizon(const NmpcConfig& cfg, const PlantState& x0, const Eigen::VectorXd& z,
                             bool with_jacobian, HorizonEval& out) {
  const ConverterParams& p = cfg.model;
  const int m = cfg.cycles();
  const int nz = 2 * m;
  const double df = cfg.f_max - cfg.f_min;
  const double dd = cfg.d_max - cfg.d_min;
  const double vc_gain = p.v_s * p.c_r;

  out.boundary.assign(static_cast<std::size_t>(2 * m + 1), PlantState{});
  out.power.assign(static_cast<std::size_t>(m), 0.0);
  if (with_jacobian) {
    out.dpower.setZero(m, nz);
    out.dcurrent.setZero(2 * m + 1, nz);
  }
  Eigen::Matrix<double, 2, Eigen::Dynamic> s = Eigen::Matrix<double, 2, Eigen::Dynamic>::Zero(2, nz);
  Eigen::Matrix<double, 2, Eigen::Dynamic> s_mid(2, nz);

  PlantState x = x0;
  out.boundary[0] = x;
  for (int j = 0; j < m; ++j) {
    const ControlInput u = decode(cfg, z, j);
    const double t_on = u.duty / u.f_sw;
    const double t_off = (1.0 - u.duty) / u.f_sw;
    const SegmentMap on = segment_map(p, p.v_s, t_on);
    const SegmentMap off = segment_map(p, 0.0, t_off);
    const PlantState xm = on.apply(x);
    const PlantState xe = off.apply(xm);
    out.power[static_cast<std::size_t>(j)] = u.f_sw * vc_gain * (xm.v_c - x.v_c);
    out.boundary[static_cast<std::size_t>(2 * j + 1)] = xm;
    out.boundary[static_cast<std::size_t>(2 * j + 2)] = xe;

    if (with_jacobian) {
      // d x(T)/dT is the vector field at the segment end.
      const PlantState fm = derivative(xm, p, p.v_s);
      const PlantState fe = derivative(xe, p, 0.0);
      const double ton_f = -u.duty / (u.f_sw * u.f_sw) * df;
      const double ton_d = dd / u.f_sw;
      const double toff_f = -(1.0 - u.duty) / (u.f_sw * u.f_sw) * df;
      const double toff_d = -dd / u.f_sw;

      s_mid.row(0) = on.phi.a * s.row(0) + on.phi.b * s.row(1);
      s_mid.row(1) = on.phi.c * s.row(0) + on.phi.d * s.row(1);
      s_mid(0, 2 * j) += fm.i_o * ton_f;
      s_mid(1, 2 * j) += fm.v_c * ton_f;
      s_mid(0, 2 * j + 1) += fm.i_o * ton_d;
      s_mid(1, 2 * j + 1) += fm.v_c * ton_d;

      out.dpower.row(j) = u.f_sw * vc_gain * (s_mid.row(1) - s.row(1));
      out.dpower(j, 2 * j) += vc_gain * (xm.v_c - x.v_c) * df;

      s.row(0) = off.phi.a * s_mid.row(0) + off.phi.b * s_mid.row(1);
      s.row(1) = off.phi.c * s_mid.row(0) + off.phi.d * s_mid.row(1);
      s(0, 2 * j) += fe.i_o * toff_f;
      s(1, 2 * j) += fe.v_c * toff_f;
      s(0, 2 * j + 1) += fe.i_o * toff_d;
      s(1, 2 * j + 1) += fe.v_c * toff_d;

      out.dcurrent.row(2 * j + 1) = s_mid.row(0);
      out.dcurrent.row(2 * j + 2) = s.row(0);
    }
    x = xe;
  }
}

/// ZVS sign at boundary k: OFF segments start at odd k and need i_o >= 0,
/// ON segments start at even k and need i_o <= 0.
inline double zvs_sign(int k) { return (k % 2 == 1) ? 1.0 : -1.0; }

/// Problem cost in W^2: sum over all N control intervals of
/// (P_k - P_des)^2 + alpha f_k, with P_k and f_k shared within a period.
inline double problem_cost(const NmpcConfig& cfg, const std::vector<double>& power,
                           const std::vector<ControlInput>& inputs, double p_des) {
  double c = 0.0;
  for (std::size_t j = 0; j < power.size(); ++j) {
    const double e = power[j] - p_des;
    c += 2.0 * (e * e + cfg.alpha * inputs[j].f_sw);
  }
  return c;
}

inline double max_violation(const NmpcConfig& cfg, const std::vector<PlantState>& boundary) {
  double v = 0.0;
  for (std::size_t k = 1; k < boundary.size(); ++k) {
    const double c = zvs_sign(static_cast<int>(k)) * boundary[k].i_o - cfg.zvs_margin;
    v = std::max(v, -c);
  }
  return v;
}

/// Augmented-Lagrangian merit for one penalty level.
class Merit {
 public:
  Merit(const NmpcConfig& cfg, const PlantState& x0, double p_des)
      : cfg_(cfg), x0_(x0), p_des_(p_des),
        scale_(1.0),
        lambda_(Eigen::VectorXd::Zero(cfg.horizon_n)) {}

  double scale() const { return scale_; }
  Eigen::VectorXd& lambda() { return lambda_; }
  double& mu() { return mu_; }

  double value(const Eigen::VectorXd& z) {
    evaluate_horizon(cfg_, x0_, z, false, eval_);
    return merit_from_eval(z);
  }

  /// Merit and its analytic gradient.
  double value_and_gradient(const Eigen::VectorXd& z, Eigen::VectorXd& g) {
    evaluate_horizon(cfg_, x0_, z, true, eval_);
    const int nz = static_cast<int>(z.size());
    const double df = cfg_.f_max - cfg_.f_min;
    g.setZero(nz);
    for (int j = 0; j < cfg_.cycles(); ++j) {
      const double e = eval_.power[static_cast<std::size_t>(j)] - p_des_;
      g += (4.0 * e / scale_) * eval_.dpower.row(j).transpose();
      g(2 * j) += 2.0 * cfg_.alpha * df / scale_;
    }
    for (int k = 1; k <= cfg_.horizon_n; ++k) {
      const double sk = zvs_sign(k);
      const double c = sk * eval_.boundary[static_cast<std::size_t>(k)].i_o - cfg_.zvs_margin;
      const double shifted = lambda_(k - 1) / mu_ - c;
      if (shifted > 0.0) g -= (mu_ * shifted * sk) * eval_.dcurrent.row(k).transpose();
    }
    return merit_from_eval(z);
  }

  /// Merit, gradient, and structured Hessian: exact Gauss-Newton terms plus
  /// the residual-weighted second derivatives of power and current, taken by
  /// central differences of the analytic Jacobians with the weights frozen.
  double value_and_derivatives(const Eigen::VectorXd& z, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
    const int nz = static_cast<int>(z.size());
    const int m = cfg_.cycles();
    const double f = value_and_gradient(z, g);
    Eigen::VectorXd w_power(m);
    for (int j = 0; j < m; ++j) w_power(j) = 4.0 * (eval_.power[static_cast<std::size_t>(j)] - p_des_) / scale_;
    Eigen::VectorXd w_current = Eigen::VectorXd::Zero(cfg_.horizon_n + 1);
    h.setZero(nz, nz);
    h.noalias() += (4.0 / scale_) * eval_.dpower.transpose() * eval_.dpower;
    for (int k = 1; k <= cfg_.horizon_n; ++k) {
      const double sk = zvs_sign(k);
      const double c = sk * eval_.boundary[static_cast<std::size_t>(k)].i_o - cfg_.zvs_margin;
      const double shifted = lambda_(k - 1) / mu_ - c;
      if (shifted > 0.0) {
        w_current(k) = -mu_ * shifted * sk;
        h.noalias() += mu_ * eval_.dcurrent.row(k).transpose() * eval_.dcurrent.row(k);
      }
    }
    constexpr double step = 1e-6;
    HorizonEval ep, em;
    for (int i = 0; i < nz; ++i) {
      Eigen::VectorXd zp = z, zm = z;
      zp(i) += step;
      zm(i) -= step;
      evaluate_horizon(cfg_, x0_, zp, true, ep);
      evaluate_horizon(cfg_, x0_, zm, true, em);
      h.col(i) += ((ep.dpower - em.dpower).transpose() * w_power +
                   (ep.dcurrent - em.dcurrent).transpose() * w_current) / (2.0 * step);
    }
    h = 0.5 * (h + h.transpose()).eval();
    return f;
  }

  const HorizonEval& last_eval() const { return eval_; }

  /// Boundary indices k whose penalty term is active for the given evaluation.
  std::vector<int> active_constraints(const HorizonEval& e) const {
    std::vector<int> out;
    for (int k = 1; k <= cfg_.horizon_n; ++k) {
      const double c = zvs_sign(k) * e.boundary[static_cast<std::size_t>(k)].i_o - cfg_.zvs_margin;
      if (lambda_(k - 1) / mu_ - c > 0.0) out.push_back(k);
    }
    return out;
  }

  /// Horizon evaluation with sensitivities, without merit bookkeeping.
  const HorizonEval& evaluate(const Eigen::VectorXd& z) {
    evaluate_horizon(cfg_, x0_, z, true, eval_);
    return eval_;
  }

  /// Constraint values c_k (>= 0 feasible), k = 1..N, at the last evaluation.
  Eigen::VectorXd constraints() const {
    Eigen::VectorXd c(cfg_.horizon_n);
    for (int k = 1; k <= cfg_.horizon_n; ++k) {
      c(k - 1) = zvs_sign(k) * eval_.boundary[static_cast<std::size_t>(k)].i_o - cfg_.zvs_margin;
    }
    return c;
  }

 private:
  double merit_from_eval(const Eigen::VectorXd& z) const {
    double f = 0.0;
    for (int j = 0; j < cfg_.cycles(); ++j) {
      const double e = eval_.power[static_cast<std::size_t>(j)] - p_des_;
      f += 2.0 * (e * e + cfg_.alpha * decode(cfg_, z, j).f_sw);
    }
    f /= scale_;
    for (int k = 1; k <= cfg_.horizon_n; ++k) {
      const double c = zvs_sign(k) * eval_.boundary[static_cast<std::size_t>(k)].i_o - cfg_.zvs_margin;
      const double shifted = std::max(0.0, lambda_(k - 1) / mu_ - c);
      f += 0.5 * mu_ * shifted * shifted;
    }
    return f;
  }

  const NmpcConfig& cfg_;
  PlantState x0_;
  double p_des_;
  double scale_;
  Eigen::VectorXd lambda_;
  double mu_ = 1.0;
  HorizonEval eval_;
};

inline Eigen::VectorXd project(const Eigen::VectorXd& z) { return z.cwiseMax(0.0).cwiseMin(1.0); }

struct InnerResult {
  int iterations = 0;
  bool converged = false;
};

/// Minimizer of g's + s'Hs/2 over ||s|| <= radius, from the eigenvalues of
/// H. Handles indefinite H, including the hard case.
inline Eigen::VectorXd trust_region_step(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, double radius) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h);
  const Eigen::VectorXd& ev = eig.eigenvalues();
  const Eigen::MatrixXd& v = eig.eigenvectors();
  const Eigen::VectorXd gt = v.transpose() * g;
  auto step_norm = [&](double lambda) { return (gt.array() / (ev.array() + lambda)).matrix().norm(); };
  const double lo = std::max(0.0, -ev(0));
  const double shift = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev(0) > 0.0 && step_norm(0.0) <= radius) return -v * (gt.array() / ev.array()).matrix();
  if (step_norm(lo + shift) <= radius) {
    // Hard case: move along the lowest eigenvector to the boundary.
    Eigen::VectorXd s = -v * (gt.array() / (ev.array() + lo + shift)).matrix();
    const double extra = std::sqrt(std::max(0.0, radius * radius - s.squaredNorm()));
    const Eigen::VectorXd dir = v.col(0);
    return s + (dir.dot(g) > 0.0 ? -extra : extra) * dir;
  }
  double a = lo + shift;
  double b = lo + shift + g.norm() / radius + ev.cwiseAbs().maxCoeff();
  for (int it = 0; it < 200 && b - a > 1e-14 * b; ++it) {
    const double mid = 0.5 * (a + b);
    if (step_norm(mid) > radius) a = mid; else b = mid;
  }
  return -v * (gt.array() / (ev.array() + b)).matrix();
}

/// Projected trust-region Newton on [0, 1]^n with the structured Hessian.
/// When a step models poorly, a second-order correction pulls the cycle
/// powers back onto their linear prediction and the better point is kept.
inline InnerResult minimize_box(Merit& merit, Eigen::VectorXd& z, int max_iterations, double tol,
                                double& radius) {
  InnerResult res;
  const int n = static_cast<int>(z.size());
  Eigen::VectorXd g(n);
  Eigen::MatrixXd h(n, n);
  double f = merit.value_and_derivatives(z, g, h);
  if (!(radius > 0.0)) radius = 0.1;
  constexpr double min_radius = 1e-12;
  int stalled = 0;
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd pg = z - project(z - g);
    if (pg.lpNorm<Eigen::Infinity>() <= tol) {
      res.converged = true;
      break;
    }
    // Variables held at a bound by the gradient stay fixed this iteration.
    std::vector<bool> fixed0(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      fixed0[static_cast<std::size_t>(i)] = (z(i) <= 0.0 && g(i) > 0.0) || (z(i) >= 1.0 && g(i) < 0.0);
    }
    HorizonEval base;
    bool base_known = false;

    // Trust-region step on the free variables; any variable the step would
    // push through a bound is pinned there and the rest is re-solved.
    auto bounded_step = [&](double rad, std::vector<bool>& fixed) {
      Eigen::VectorXd step = Eigen::VectorXd::Zero(n);
      for (int pass = 0; pass <= n; ++pass) {
        std::vector<int> fr;
        for (int i = 0; i < n; ++i) {
          if (!fixed[static_cast<std::size_t>(i)]) fr.push_back(i);
        }
        const int m = static_cast<int>(fr.size());
        for (int a = 0; a < m; ++a) step(fr[static_cast<std::size_t>(a)]) = 0.0;
        if (m == 0) break;
        Eigen::MatrixXd hf(m, m);
        Eigen::VectorXd gf(m);
        const Eigen::VectorXd hs = h * step;
        for (int a = 0; a < m; ++a) {
          const auto ia = fr[static_cast<std::size_t>(a)];
          gf(a) = g(ia) + hs(ia);
          for (int b = 0; b < m; ++b) hf(a, b) = h(ia, fr[static_cast<std::size_t>(b)]);
        }
        const Eigen::VectorXd sf = trust_region_step(hf, gf, rad);
        bool clipped = false;
        for (int a = 0; a < m; ++a) {
          const auto ia = fr[static_cast<std::size_t>(a)];
          const double target = z(ia) + sf(a);
          if (target < 0.0 || target > 1.0) {
            step(ia) = std::clamp(target, 0.0, 1.0) - z(ia);
            fixed[static_cast<std::size_t>(ia)] = true;
            clipped = true;
          }
        }
        if (!clipped) {
          for (int a = 0; a < m; ++a) step(fr[static_cast<std::size_t>(a)]) = sf(a);
          break;
        }
      }
      return step;
    };

    bool accepted = false;
    while (!accepted && radius >= min_radius) {
      std::vector<bool> fixed = fixed0;
      const Eigen::VectorXd s = bounded_step(radius, fixed);
      const Eigen::VectorXd trial = project(z + s);
      const double step = s.norm();
      const double predicted = -(g.dot(s) + 0.5 * s.dot(h * s));
      if (!(predicted > 0.0) || step == 0.0) {
        radius *= 0.25;
        continue;
      }
      Eigen::VectorXd candidate = trial;
      double f_trial = merit.value(trial);
      std::vector<int> fr;
      for (int i = 0; i < n; ++i) {
        if (!fixed[static_cast<std::size_t>(i)]) fr.push_back(i);
      }
      if (!(f_trial < f && (f - f_trial) / predicted > 0.75) && !fr.empty()) {
        // Restore cycle powers and penalized boundary currents to their
        // linear prediction by Gauss-Newton moves of the free variables.
        std::vector<int> rows_i = merit.active_constraints(merit.last_eval());
        if (!base_known) {
          base = merit.evaluate(z);
          base_known = true;
        }
        for (int k : merit.active_constraints(base)) {
          if (std::find(rows_i.begin(), rows_i.end(), k) == rows_i.end()) rows_i.push_back(k);
        }
        const int mp = static_cast<int>(base.power.size());
        const int nr = mp + static_cast<int>(rows_i.size());
        auto stack = [&](const HorizonEval& e, Eigen::VectorXd& val, Eigen::MatrixXd& jm) {
          val.resize(nr);
          jm.resize(nr, n);
          for (int j = 0; j < mp; ++j) {
            val(j) = e.power[static_cast<std::size_t>(j)];
            jm.row(j) = e.dpower.row(j);
          }
          for (std::size_t r = 0; r < rows_i.size(); ++r) {
            const auto k = static_cast<std::size_t>(rows_i[r]);
            val(mp + static_cast<int>(r)) = e.boundary[k].i_o;
            jm.row(mp + static_cast<int>(r)) = e.dcurrent.row(static_cast<Eigen::Index>(k));
          }
        };
        Eigen::VectorXd v0, vc;
        Eigen::MatrixXd j0, jc;
        stack(base, v0, j0);
        const Eigen::VectorXd target = v0 + j0 * s;
        stack(merit.evaluate(trial), vc, jc);
        Eigen::VectorXd corrected = trial;
        for (int rep = 0; rep < 4; ++rep) {
          Eigen::MatrixXd jf(nr, static_cast<Eigen::Index>(fr.size()));
          for (std::size_t a = 0; a < fr.size(); ++a) jf.col(static_cast<Eigen::Index>(a)) = jc.col(fr[a]);
          Eigen::MatrixXd jjt = jf * jf.transpose();
          jjt.diagonal().array() += 1e-12 * std::max(1.0, jjt.trace());
          const Eigen::VectorXd corr = -jf.transpose() * jjt.ldlt().solve(vc - target);
          for (std::size_t a = 0; a < fr.size(); ++a) corrected(fr[a]) += corr(static_cast<Eigen::Index>(a));
          corrected = project(corrected);
          stack(merit.evaluate(corrected), vc, jc);
          if ((vc - target).lpNorm<Eigen::Infinity>() < 1e-9 * std::max(1.0, target.lpNorm<Eigen::Infinity>())) break;
        }
        const double f_corrected = merit.value(corrected);
        if (f_corrected < f_trial) {
          candidate = corrected;
          f_trial = f_corrected;
        }
      }
      const double ratio = (f - f_trial) / predicted;
      if (f_trial < f && ratio > 1e-4) {
        stalled = (f - f_trial) <= 1e-13 * std::max(1.0, std::abs(f)) ? stalled + 1 : 0;
        z = candidate;
        f = merit.value_and_derivatives(z, g, h);
        if (ratio > 0.75 && step >= 0.8 * radius) radius = std::min(2.0 * radius, 1.0);
        if (ratio < 0.25) radius = 0.25 * step;
        accepted = true;
      } else {
        radius = 0.25 * step;
      }
    }
    ++res.iterations;
    if (!accepted || stalled >= 3) {
      // No further descent at working precision: stationary.
      res.converged = true;
      radius = 0.1;
      break;
    }
  }
  return res;
}

struct StartResult {
  Eigen::VectorXd z;
  double cost = std::numeric_limits<double>::infinity();
  double violation = std::numeric_limits<double>::infinity();
  bool inner_converged = false;
  int iterations = 0;
};

inline StartResult solve_from(const NmpcConfig& cfg, const PlantState& x0, double p_des,
                              Eigen::VectorXd z) {
  StartResult r;
  Merit merit(cfg, x0, p_des);
  merit.mu() = cfg.penalty_init;
  double prev_violation = std::numeric_limits<double>::infinity();
  double radius = 0.0;
  for (int outer = 0; outer < cfg.max_outer; ++outer) {
    if (cfg.max_iterations == 0) break;
    const InnerResult inner = minimize_box(merit, z, cfg.max_iterations, cfg.tol_grad, radius);
    r.iterations += inner.iterations;
    r.inner_converged = inner.converged;
    merit.value(z);
    const Eigen::VectorXd c = merit.constraints();
    const double violation = std::max(0.0, -c.minCoeff());
    // Multiplier update for c >= 0.
    merit.lambda() = (merit.lambda() - merit.mu() * c).cwiseMax(0.0);
    if (violation <= cfg.tol_constraint && inner.converged) break;
    if (violation > 0.25 * prev_violation) merit.mu() *= cfg.penalty_growth;
    prev_violation = violation;
  }
  r.z = z;
  HorizonEval ev;
  evaluate_horizon(cfg, x0, z, false, ev);
  std::vector<ControlInput> inputs;
  for (int j = 0; j < cfg.cycles(); ++j) inputs.push_back(decode(cfg, z, j));
  r.cost = problem_cost(cfg, ev.power, inputs, p_des);
  r.violation = max_violation(cfg, ev.boundary);
  return r;
}

inline NmpcSolution make_solution(const NmpcConfig& cfg, const PlantState& x0, double p_des,
                                  const StartResult& r, int iterations) {
  NmpcSolution sol;
  HorizonEval ev;
  evaluate_horizon(cfg, x0, r.z, false, ev);
  for (int j = 0; j < cfg.cycles(); ++j) sol.inputs.push_back(decode(cfg, r.z, j));
  for (double pw : ev.power) {
    sol.powers.push_back(pw);  // ON interval
    sol.powers.push_back(pw);  // OFF interval carries the ON value
  }
  sol.boundary = ev.boundary;
  sol.cost = problem_cost(cfg, ev.power, sol.inputs, p_des);
  sol.max_violation = max_violation(cfg, ev.boundary);
  sol.iterations = iterations;
  if (sol.max_violation <= cfg.tol_constraint && r.inner_converged) {
    sol.status = SolverStatus::Converged;
  } else if (sol.max_violation > 1e3 * cfg.tol_constraint) {
    sol.status = SolverStatus::Infeasible;
  } else {
    sol.status = SolverStatus::MaxIter;
  }
  if (cfg.max_iterations == 0) sol.status = SolverStatus::MaxIter;
  return sol;
}

inline bool better(const StartResult& a, const StartResult& b, double tol) {
  const bool fa = a.violation <= tol;
  const bool fb = b.violation <= tol;
  if (fa != fb) return fa;
  if (fa) return a.cost < b.cost;
  return a.violation < b.violation;
}

}  // namespace detail

/// Deterministic cold-start seeds: the four corners and the center of the box.
inline std::vector<ControlInput> default_seeds(const NmpcConfig& cfg) {
  return {{cfg.f_min, cfg.d_min}, {cfg.f_min, cfg.d_max}, {cfg.f_max, cfg.d_min},
          {cfg.f_max, cfg.d_max}, cfg.box_center()};
}

/// Solves the tracking problem from the measured state x_hat. A warm start is
/// tried first; the multi-start seeds are used when it is absent or fails.
inline NmpcSolution solve(const PlantState& x_hat, double p_des, const NmpcConfig& cfg,
                          const std::optional<NmpcSolution>& warm = std::nullopt) {
  cfg.validate();
  if (!std::isfinite(x_hat.i_o) || !std::isfinite(x_hat.v_c)) throw std::invalid_argument("solve: non-finite state");
  if (!(p_des >= 0.0)) throw std::invalid_argument("solve: p_des must be >= 0");
  const int m = cfg.cycles();
  int iterations = 0;
  detail::StartResult best;

  if (warm && static_cast<int>(warm->inputs.size()) == m) {
    Eigen::VectorXd z(2 * m);
    for (int j = 0; j < m; ++j) detail::encode(cfg, warm->inputs[static_cast<std::size_t>(j)], z, j);
    best = detail::solve_from(cfg, x_hat, p_des, z);
    iterations += best.iterations;
    if (best.violation <= cfg.tol_constraint && best.inner_converged) {
      return detail::make_solution(cfg, x_hat, p_des, best, iterations);
    }
  }
  for (const ControlInput& seed : default_seeds(cfg)) {
    Eigen::VectorXd z(2 * m);
    for (int j = 0; j < m; ++j) detail::encode(cfg, seed, z, j);
    detail::StartResult r = detail::solve_from(cfg, x_hat, p_des, z);
    iterations += r.iterations;
    if (detail::better(r, best, cfg.tol_constraint) || best.z.size() == 0) best = r;
  }
  return detail::make_solution(cfg, x_hat, p_des, best, iterations);
}

/// Cost and feasibility of holding one input constant over the whole horizon.
struct ConstantInputEval {
  double cost;
  double violation;
};

inline ConstantInputEval evaluate_constant_input(const PlantState& x_hat, double p_des,
                                                 const NmpcConfig& cfg, const ControlInput& u) {
  const int m = cfg.cycles();
  const CycleMap cm = cycle_map(cfg.model, u);
  std::vector<double> power;
  std::vector<PlantState> boundary{x_hat};
  PlantState x = x_hat;
  for (int j = 0; j < m; ++j) {
    const PlantState xm = cm.mid(x);
    const PlantState xe = cm.off.apply(xm);
    power.push_back(cycle_power(cfg.model, u, x, xm));
    boundary.push_back(xm);
    boundary.push_back(xe);
    x = xe;
  }
  return {detail::problem_cost(cfg, power, std::vector<ControlInput>(static_cast<std::size_t>(m), u), p_des),
          detail::max_violation(cfg, boundary)};
}

struct OracleResult {
  bool feasible = false;
  ControlInput best;
  double cost = std::numeric_limits<double>::infinity();
  int feasible_points = 0;
};

/// Exhaustive search over a grid x grid lattice of constant inputs spanning
/// the input box; ZVS-infeasible points are discarded.
inline OracleResult brute_force_oracle(const PlantState& x_hat, double p_des, const NmpcConfig& cfg,
                                       int grid = 50) {
  cfg.validate();
  if (grid < 2) throw std::invalid_argument("brute_force_oracle: grid must be >= 2");
  OracleResult r;
  for (int a = 0; a < grid; ++a) {
    for (int b = 0; b < grid; ++b) {
      const ControlInput u{cfg.f_min + (cfg.f_max - cfg.f_min) * a / (grid - 1),
                           cfg.d_min + (cfg.d_max - cfg.d_min) * b / (grid - 1)};
      const ConstantInputEval e = evaluate_constant_input(x_hat, p_des, cfg, u);
      if (e.violation > 0.0) continue;
      ++r.feasible_points;
      if (e.cost < r.cost) {
        r.cost = e.cost;
        r.best = u;
        r.feasible = true;
      }
    }
  }
  return r;
}

/// Receding-horizon controller: re-solves every switching period and applies
/// the first input pair.
class Controller {
 public:
  explicit Controller(NmpcConfig cfg, ControlInput fallback = {100e3, 0.5})
      : cfg_(std::move(cfg)), last_applied_(fallback) {
    cfg_.validate();
  }

  const NmpcConfig& config() const { return cfg_; }
  bool degraded() const { return degraded_; }
  SolverStatus last_status() const { return last_status_; }
  const std::optional<NmpcSolution>& last_solution() const { return last_; }

  ControlInput step(const PlantState& measurement, double p_des) {
    std::optional<NmpcSolution> warm;
    if (last_) {
      // Shift by one period and repeat the tail.
      NmpcSolution shifted = *last_;
      auto& in = shifted.inputs;
      if (in.size() > 1) {
        std::rotate(in.begin(), in.begin() + 1, in.end());
        in.back() = in[in.size() - 2];
      }
      warm = std::move(shifted);
    }
    NmpcSolution sol = solve(measurement, p_des, cfg_, warm);
    last_status_ = sol.status;
    if (sol.status != SolverStatus::Converged) {
      degraded_ = true;
      return last_applied_;
    }
    degraded_ = false;
    last_applied_ = sol.inputs.front();
    last_ = std::move(sol);
    return last_applied_;
  }

 private:
  NmpcConfig cfg_;
  ControlInput last_applied_;
  std::optional<NmpcSolution> last_;
  bool degraded_ = false;
  SolverStatus last_status_ = SolverStatus::Converged;
};

inline ControlInput step_controller(Controller& ctrl, const PlantState& measurement, double p_des) {
  return ctrl.step(measurement, p_des);
}

/// Setpoint correction: p_current <- p_current + K (p_orig - p_meas).
struct CorrectionState {
  double p_des_orig = 0.0;
  double p_des_current = 0.0;
  double gain_k = 0.8;
};

inline CorrectionState apply_correction(CorrectionState corr, double p_meas) {
  if (!(corr.gain_k > 0.0 && corr.gain_k <= 1.0)) throw std::invalid_argument("apply_correction: gain must be in (0, 1]");
  corr.p_des_current += corr.gain_k * (corr.p_des_orig - p_meas);
  return corr;
}

}  // namespace rsmpc
