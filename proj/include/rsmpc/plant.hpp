// Half-bridge series resonant tank: exact piecewise-LTI propagation,
// per-cycle simulation, exact average power and ZVS flags.
#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace rsmpc {

struct ConverterParams {
  double v_s = 230.0;      // bus voltage [V]
  double l_r = 19e-6;      // inductance [H]
  double r_l = 2.9;        // load resistance [Ohm]
  double c_r = 1440e-9;    // capacitance [F]

  void validate() const {
    if (!(v_s > 0.0) || !(l_r > 0.0) || !(r_l >= 0.0) || !(c_r > 0.0) ||
        !std::isfinite(v_s) || !std::isfinite(l_r) || !std::isfinite(r_l) ||
        !std::isfinite(c_r)) {
      throw std::invalid_argument("ConverterParams: require v_s > 0, l_r > 0, r_l >= 0, c_r > 0");
    }
  }
};

struct PlantState {
  double i_o = 0.0;  // inductor current [A]
  double v_c = 0.0;  // capacitor voltage [V]

  friend bool operator==(const PlantState&, const PlantState&) = default;
};

struct ControlInput {
  double f_sw = 0.0;  // [Hz]
  double duty = 0.5;

  friend bool operator==(const ControlInput&, const ControlInput&) = default;
};

struct TracePoint {
  double t;
  double i_o;
  double v_c;
  double v_o;
};

struct CycleResult {
  PlantState state_mid;  // end of the ON semicycle
  PlantState state_end;
  double p_avg = 0.0;
  bool zvs_on_ok = true;   // i_o <= 0 when the high side turns on
  bool zvs_off_ok = true;  // i_o >= 0 when the low side turns on
  std::vector<TracePoint> trace;
};

/// Resonant frequency 1 / (2 pi sqrt(L C)).
inline double derive_resonance(const ConverterParams& p) {
  return 1.0 / (2.0 * std::numbers::pi * std::sqrt(p.l_r * p.c_r));
}

/// Fixed 2x2 matrix, row-major.
struct Mat2 {
  double a = 0, b = 0, c = 0, d = 0;

  static constexpr Mat2 identity() { return {1, 0, 0, 1}; }

  friend Mat2 operator*(const Mat2& x, const Mat2& y) {
    return {x.a * y.a + x.b * y.c, x.a * y.b + x.b * y.d,
            x.c * y.a + x.d * y.c, x.c * y.b + x.d * y.d};
  }
  friend Mat2 operator+(const Mat2& x, const Mat2& y) {
    return {x.a + y.a, x.b + y.b, x.c + y.c, x.d + y.d};
  }
  friend Mat2 operator-(const Mat2& x, const Mat2& y) {
    return {x.a - y.a, x.b - y.b, x.c - y.c, x.d - y.d};
  }
  friend Mat2 operator*(double s, const Mat2& x) {
    return {s * x.a, s * x.b, s * x.c, s * x.d};
  }
  std::array<double, 2> apply(double x0, double x1) const {
    return {a * x0 + b * x1, c * x0 + d * x1};
  }
  double norm1() const {
    return std::max(std::abs(a) + std::abs(c), std::abs(b) + std::abs(d));
  }
  Mat2 inverse() const {
    const double det = a * d - b * c;
    return {d / det, -b / det, -c / det, a / det};
  }
};

/// exp(M) by scaling and squaring with a degree-8 diagonal Pade approximant.
/// Valid for any real 2x2 matrix (no assumption on eigenstructure).
inline Mat2 expm(const Mat2& m) {
  // ||M/2^s||_1 <= 0.5 keeps the [8/8] Pade truncation below double epsilon.
  int s = 0;
  const double nrm = m.norm1();
  if (nrm > 0.5) s = std::max(0, static_cast<int>(std::ceil(std::log2(nrm / 0.5))));
  const Mat2 x = std::ldexp(1.0, -s) * m;

  constexpr int q = 8;
  double c = 1.0;
  Mat2 xk = Mat2::identity();
  Mat2 num = Mat2::identity();
  Mat2 den = Mat2::identity();
  double sign = 1.0;
  for (int k = 1; k <= q; ++k) {
    c = c * (q - k + 1) / (k * (2.0 * q - k + 1));
    xk = xk * x;
    sign = -sign;
    num = num + c * xk;
    den = den + (sign * c) * xk;
  }
  Mat2 e = den.inverse() * num;
  for (int k = 0; k < s; ++k) e = e * e;
  return e;
}

/// Continuous system matrix of the tank: d[i, v]/dt = A [i, v] + [v_applied / L, 0].
inline Mat2 system_matrix(const ConverterParams& p) {
  return {-p.r_l / p.l_r, -1.0 / p.l_r, 1.0 / p.c_r, 0.0};
}

/// Time derivative of the state under a constant applied voltage.
inline PlantState derivative(const PlantState& x, const ConverterParams& p, double v_applied) {
  return {(v_applied - p.r_l * x.i_o - x.v_c) / p.l_r, x.i_o / p.c_r};
}

/// One constant-voltage segment of the tank, precomputed for a given duration.
/// x(T) = x_eq + Phi (x0 - x_eq) with x_eq = (0, v_applied).
struct SegmentMap {
  Mat2 phi;
  double v_applied = 0.0;

  PlantState apply(const PlantState& x0) const {
    const auto y = phi.apply(x0.i_o, x0.v_c - v_applied);
    return {y[0], y[1] + v_applied};
  }
};

inline SegmentMap segment_map(const ConverterParams& p, double v_applied, double duration) {
  if (!(duration >= 0.0)) throw std::invalid_argument("propagate_segment: negative duration");
  return {expm(duration * system_matrix(p)), v_applied};
}

/// Exact solution of the tank ODE under a constant applied voltage.
inline PlantState propagate_segment(const PlantState& x0, const ConverterParams& p,
                                    double v_applied, double duration) {
  if (duration == 0.0) return x0;
  return segment_map(p, v_applied, duration).apply(x0);
}

inline void validate_input(const ControlInput& u) {
  if (!(u.f_sw > 0.0) || !std::isfinite(u.f_sw) || !(u.duty > 0.0) || !(u.duty < 1.0)) {
    throw std::invalid_argument("ControlInput: require f_sw > 0 and 0 < duty < 1");
  }
}

/// Average power over one cycle. Only the ON segment draws from the bus and
/// int i_o dt = C (v_c(end) - v_c(start)), so the integral is exact.
inline double cycle_power(const ConverterParams& p, const ControlInput& u,
                          const PlantState& start, const PlantState& mid) {
  return u.f_sw * p.v_s * p.c_r * (mid.v_c - start.v_c);
}

/// Applies one switching period: v_o = v_s for duty/f_sw, then 0 for the rest.
inline CycleResult simulate_cycle(const PlantState& x0, const ConverterParams& p,
                                  const ControlInput& u, int n_trace = 2) {
  validate_input(u);
  if (n_trace < 2) throw std::invalid_argument("simulate_cycle: n_trace must be >= 2");
  const double period = 1.0 / u.f_sw;
  const double t_on = u.duty * period;
  const double t_off = period - t_on;

  CycleResult r;
  r.zvs_on_ok = x0.i_o <= 0.0;
  r.state_mid = propagate_segment(x0, p, p.v_s, t_on);
  r.zvs_off_ok = r.state_mid.i_o >= 0.0;
  r.state_end = propagate_segment(r.state_mid, p, 0.0, t_off);
  r.p_avg = cycle_power(p, u, x0, r.state_mid);

  r.trace.reserve(static_cast<std::size_t>(n_trace));
  for (int k = 0; k < n_trace; ++k) {
    const double t = period * k / (n_trace - 1);
    PlantState x;
    double v_o;
    if (t <= t_on) {
      x = propagate_segment(x0, p, p.v_s, t);
      v_o = p.v_s;
    } else {
      x = propagate_segment(r.state_mid, p, 0.0, std::min(t - t_on, t_off));
      v_o = 0.0;
    }
    r.trace.push_back({t, x.i_o, x.v_c, v_o});
  }
  return r;
}

/// Affine one-cycle map x_end = M x0 + m under a constant input.
struct CycleMap {
  SegmentMap on;
  SegmentMap off;

  PlantState mid(const PlantState& x0) const { return on.apply(x0); }
  PlantState end(const PlantState& x0) const { return off.apply(on.apply(x0)); }
};

inline CycleMap cycle_map(const ConverterParams& p, const ControlInput& u) {
  validate_input(u);
  const double period = 1.0 / u.f_sw;
  return {segment_map(p, p.v_s, u.duty * period), segment_map(p, 0.0, (1.0 - u.duty) * period)};
}

/// Periodic steady state at the start of the ON segment for a constant input.
/// Solves x = Phi_off (Phi_on (x - e_on) + e_on - e_off) + e_off directly.
inline PlantState periodic_steady_state(const ConverterParams& p, const ControlInput& u) {
  const CycleMap cm = cycle_map(p, u);
  const Mat2 m = cm.off.phi * cm.on.phi;
  const PlantState zero_image = cm.end(PlantState{});
  const Mat2 lhs = Mat2::identity() - m;
  const auto x = lhs.inverse().apply(zero_image.i_o, zero_image.v_c);
  return {x[0], x[1]};
}

/// Steady-state cycle (start state, mid state, power) for a constant input.
inline CycleResult steady_state_cycle(const ConverterParams& p, const ControlInput& u,
                                      int n_trace = 2) {
  return simulate_cycle(periodic_steady_state(p, u), p, u, n_trace);
}

}  // namespace rsmpc
