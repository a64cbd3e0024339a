// Switching-time transformation and collocation on finite elements for the
// scaled ON/OFF segment dynamics.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "rsmpc/plant.hpp"

namespace rsmpc {

struct SwitchingInterval {
  double t_start;  // [s]
  double f_sw;     // [Hz]
  double duty;
};

/// Contiguous sequence of switching periods. In scaled time every ON and
/// every OFF semicycle has length 1, so switching happens at tau = 1, 2, 3, ...
class SwitchingSchedule {
 public:
  SwitchingSchedule(double t0, const std::vector<ControlInput>& inputs) {
    double t = t0;
    for (const auto& u : inputs) {
      validate_input(u);
      intervals_.push_back({t, u.f_sw, u.duty});
      t += 1.0 / u.f_sw;
    }
    t_end_ = t;
    if (intervals_.empty()) throw std::invalid_argument("SwitchingSchedule: no intervals");
  }

  const std::vector<SwitchingInterval>& intervals() const { return intervals_; }
  double t_begin() const { return intervals_.front().t_start; }
  double t_end() const { return t_end_; }
  double tau_end() const { return 2.0 * static_cast<double>(intervals_.size()); }

  double tau_of_t(double t) const {
    if (!(t >= t_begin() && t <= t_end_)) throw std::invalid_argument("tau_of_t: t outside schedule");
    // Last interval whose start is <= t.
    auto it = std::upper_bound(intervals_.begin(), intervals_.end(), t,
                               [](double v, const SwitchingInterval& s) { return v < s.t_start; });
    const auto i = static_cast<std::size_t>(std::distance(intervals_.begin(), it) - 1);
    const auto& s = intervals_[i];
    const double t_on = s.duty / s.f_sw;
    const double dt = t - s.t_start;
    if (dt <= t_on) return 2.0 * i + dt * s.f_sw / s.duty;
    return 2.0 * i + 1.0 + (dt - t_on) * s.f_sw / (1.0 - s.duty);
  }

  double t_of_tau(double tau) const {
    if (!(tau >= 0.0 && tau <= tau_end())) throw std::invalid_argument("t_of_tau: tau outside schedule");
    auto i = static_cast<std::size_t>(std::floor(tau / 2.0));
    if (i >= intervals_.size()) i = intervals_.size() - 1;
    const auto& s = intervals_[i];
    const double local = tau - 2.0 * i;
    if (local <= 1.0) return s.t_start + local * s.duty / s.f_sw;
    return s.t_start + s.duty / s.f_sw + (local - 1.0) * (1.0 - s.duty) / s.f_sw;
  }

 private:
  std::vector<SwitchingInterval> intervals_;
  double t_end_ = 0.0;
};

namespace detail {

// Legendre P_n and its derivative at x in [-1, 1].
inline std::pair<double, double> legendre(int n, double x) {
  double p0 = 1.0, p1 = x;
  if (n == 0) return {1.0, 0.0};
  for (int k = 2; k <= n; ++k) {
    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  const double dp = (std::abs(x) == 1.0) ? 0.5 * n * (n + 1) * std::pow(x, n + 1)
                                         : n * (x * p1 - p0) / (x * x - 1.0);
  return {p1, dp};
}

}  // namespace detail

/// Right Radau nodes on [0, 1]: zeros of P_d - P_{d-1} mapped from [-1, 1].
/// The last node is 1.
inline std::vector<double> radau_nodes(int degree) {
  if (degree < 1) throw std::invalid_argument("radau_nodes: degree must be >= 1");
  std::vector<double> nodes;
  nodes.reserve(static_cast<std::size_t>(degree));
  // Interior roots by Newton from Chebyshev-Gauss-Radau guesses.
  for (int j = 1; j < degree; ++j) {
    double x = std::cos(2.0 * std::numbers::pi * j / (2.0 * degree - 1.0));
    for (int it = 0; it < 100; ++it) {
      const auto [pn, dpn] = detail::legendre(degree, x);
      const auto [pm, dpm] = detail::legendre(degree - 1, x);
      const double dx = (pn - pm) / (dpn - dpm);
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    nodes.push_back(0.5 * (x + 1.0));
  }
  nodes.push_back(1.0);
  std::sort(nodes.begin(), nodes.end());
  return nodes;
}

struct CollocationGrid {
  int degree = 2;
  int n_elements = 100;
  std::vector<double> nodes;    // per-element nodes in (0, 1]
  std::vector<double> weights;  // per-element quadrature weights on [0, 1], sum 1
  // Differentiation matrix rows i = 1..degree, columns j = 0..degree where
  // column 0 is the element start (s = 0).
  Eigen::MatrixXd diff;

  double element_length() const { return 1.0 / n_elements; }

  /// Absolute location of node j of element e within [0, 1].
  double point(int e, int j) const { return (e + nodes[static_cast<std::size_t>(j)]) / n_elements; }
};

inline CollocationGrid collocation_grid(int degree, int n_elements) {
  if (degree < 1 || n_elements < 1) throw std::invalid_argument("collocation_grid: counts must be >= 1");
  CollocationGrid g;
  g.degree = degree;
  g.n_elements = n_elements;
  g.nodes = radau_nodes(degree);

  // Weights from the moment conditions sum_j w_j c_j^k = 1/(k+1), k < degree.
  Eigen::MatrixXd v(degree, degree);
  Eigen::VectorXd rhs(degree);
  for (int k = 0; k < degree; ++k) {
    for (int j = 0; j < degree; ++j) v(k, j) = std::pow(g.nodes[static_cast<std::size_t>(j)], k);
    rhs(k) = 1.0 / (k + 1.0);
  }
  const Eigen::VectorXd w = v.colPivHouseholderQr().solve(rhs);
  g.weights.assign(w.data(), w.data() + degree);

  // Lagrange basis on {0, c_1, ..., c_d}; derivative of basis j at c_i.
  std::vector<double> s(static_cast<std::size_t>(degree) + 1);
  s[0] = 0.0;
  for (int j = 0; j < degree; ++j) s[static_cast<std::size_t>(j) + 1] = g.nodes[static_cast<std::size_t>(j)];
  g.diff = Eigen::MatrixXd::Zero(degree, degree + 1);
  for (int i = 1; i <= degree; ++i) {
    const double x = s[static_cast<std::size_t>(i)];
    for (int j = 0; j <= degree; ++j) {
      double sum = 0.0;
      for (int m = 0; m <= degree; ++m) {
        if (m == j) continue;
        double prod = 1.0 / (s[static_cast<std::size_t>(j)] - s[static_cast<std::size_t>(m)]);
        for (int n = 0; n <= degree; ++n) {
          if (n == j || n == m) continue;
          prod *= (x - s[static_cast<std::size_t>(n)]) / (s[static_cast<std::size_t>(j)] - s[static_cast<std::size_t>(n)]);
        }
        sum += prod;
      }
      g.diff(i - 1, j) = sum;
    }
  }
  return g;
}

enum class Phase { On, Off };

struct IntervalPrediction {
  // states[0] is the initial condition; then degree states per element.
  std::vector<PlantState> states;
  std::vector<double> tau;  // scaled time of each state within [0, 1]
  Phase phase = Phase::On;
  double duration = 0.0;    // real time [s]
};

/// Collocation solution of dx/dtau = T * f(x) over tau in [0, 1], with T the
/// real-time length of the semicycle. The dynamics are linear, so every
/// element reduces to the same affine map X_nodes = K x_start + k.
inline IntervalPrediction predict_interval(const PlantState& x0, const ControlInput& u, Phase phase,
                                           const ConverterParams& p, const CollocationGrid& grid) {
  validate_input(u);
  const double duration = (phase == Phase::On ? u.duty : 1.0 - u.duty) / u.f_sw;
  const double v_applied = phase == Phase::On ? p.v_s : 0.0;
  const double h = grid.element_length();
  const int d = grid.degree;

  // Scaled dynamics g(x) = a x + c with a = T A, c = T [v/L, 0].
  const Mat2 a = duration * system_matrix(p);
  const Eigen::Vector2d c(duration * v_applied / p.l_r, 0.0);
  Eigen::Matrix2d am;
  am << a.a, a.b, a.c, a.d;

  // sum_j D(i, j) X_j = h (a X_i + c), i = 1..d, unknowns X_1..X_d.
  const int n = 2 * d;
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd start_coupling(n, 2);
  Eigen::VectorXd forcing(n);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      lhs.block<2, 2>(2 * i, 2 * j) += grid.diff(i, j + 1) * Eigen::Matrix2d::Identity();
    }
    lhs.block<2, 2>(2 * i, 2 * i) -= h * am;
    start_coupling.block<2, 2>(2 * i, 0) = -grid.diff(i, 0) * Eigen::Matrix2d::Identity();
    forcing.segment<2>(2 * i) = h * c;
  }
  const auto lu = lhs.fullPivLu();
  if (!lu.isInvertible()) throw std::runtime_error("predict_interval: singular collocation system");
  const Eigen::MatrixXd k_start = lu.solve(start_coupling);
  const Eigen::VectorXd k_const = lu.solve(forcing);

  IntervalPrediction pred;
  pred.phase = phase;
  pred.duration = duration;
  pred.states.reserve(static_cast<std::size_t>(grid.n_elements * d + 1));
  pred.tau.reserve(pred.states.capacity());
  pred.states.push_back(x0);
  pred.tau.push_back(0.0);

  Eigen::Vector2d xs(x0.i_o, x0.v_c);
  for (int e = 0; e < grid.n_elements; ++e) {
    const Eigen::VectorXd xn = k_start * xs + k_const;
    for (int j = 0; j < d; ++j) {
      pred.states.push_back({xn(2 * j), xn(2 * j + 1)});
      pred.tau.push_back(grid.point(e, j));
    }
    xs = xn.tail<2>();  // Radau: last node is the element end
  }
  return pred;
}

/// Per-interval average power f_sw * sum_i i_o[i] v_o[i] dt[i] over the
/// collocation points. dt[i] is the Radau quadrature weight of point i in
/// real time; with degree 1 this is exactly t[i] - t[i-1]. OFF intervals
/// return 0; the caller carries the preceding ON value for the cycle.
inline double interval_power(const IntervalPrediction& pred, const ControlInput& u,
                             const ConverterParams& p, const CollocationGrid& grid) {
  if (pred.phase == Phase::Off) return 0.0;
  const auto d = static_cast<std::size_t>(grid.degree);
  if (pred.states.size() != static_cast<std::size_t>(grid.n_elements) * d + 1) {
    throw std::invalid_argument("interval_power: prediction does not match grid");
  }
  double sum = 0.0;
  for (std::size_t i = 1; i < pred.states.size(); ++i) {
    sum += pred.states[i].i_o * grid.weights[(i - 1) % d];
  }
  sum *= grid.element_length();
  // Real time per unit tau is the ON duration.
  return u.f_sw * p.v_s * pred.duration * sum;
}

/// Cycle power predicted by collocation: ON interval quadrature, carried
/// through the OFF interval.
inline double predicted_cycle_power(const PlantState& x0, const ControlInput& u,
                                    const ConverterParams& p, const CollocationGrid& grid) {
  return interval_power(predict_interval(x0, u, Phase::On, p, grid), u, p, grid);
}

}  // namespace rsmpc
