// Closed-loop scenario runner, metrics and benchmark campaigns.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsmpc/nmpc.hpp"
#include "rsmpc/parallel.hpp"
#include "rsmpc/plant.hpp"
#include "rsmpc/policy.hpp"
#include "rsmpc/quant.hpp"

namespace rsmpc {

enum class ControllerKind { ExactNmpc, Dnn, DnnQuant, PiFreq, PiDuty };

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::ExactNmpc: return "exact-nmpc";
    case ControllerKind::Dnn: return "dnn";
    case ControllerKind::DnnQuant: return "dnn-quant";
    case ControllerKind::PiFreq: return "pi-freq";
    case ControllerKind::PiDuty: return "pi-duty";
  }
  return "unknown";
}

inline ControllerKind parse_controller_kind(const std::string& s) {
  for (ControllerKind k : {ControllerKind::ExactNmpc, ControllerKind::Dnn, ControllerKind::DnnQuant,
                           ControllerKind::PiFreq, ControllerKind::PiDuty}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown controller kind: " + s);
}

/// PI law on the previous cycle's power error. pi-freq moves f_sw at fixed
/// duty, pi-duty moves D at fixed frequency.
struct PiSettings {
  double kp = 0.0;
  double ki = 0.0;
  double duty_fixed = 0.5;     // pi-freq
  double f_fixed = 0.0;        // pi-duty [Hz]; 0 selects a frequency reaching p_full at D = 0.5
  double p_full = 3300.0;      // [W], headroom above the largest setpoint
  double d_min_pi_duty = 0.01;  // pi-duty ignores the NMPC duty bounds
  double d_max_pi_duty = 0.5;  // and works on the D <= 0.5 branch
};

struct SetpointStep {
  int start_cycle = 0;  // relative to the first controlled cycle
  double p_des = 0.0;   // [W]
};

struct Scenario {
  std::vector<SetpointStep> schedule;
  int total_cycles = 15;
  int warmup_cycles = 5;
  ControlInput warmup_input{100e3, 0.5};
  ConverterParams plant;  // true parameters
  NmpcConfig nmpc;        // nmpc.model holds the controller's model parameters
  ControllerKind kind = ControllerKind::ExactNmpc;
  bool correction = false;
  double correction_gain = 0.8;
  int correction_start_cycle = 0;
  PiSettings pi;
  std::shared_ptr<const PolicyNetwork> net;
  std::shared_ptr<const QuantizedNetwork> qnet;
  std::uint64_t seed = 0;

  void validate() const {
    if (schedule.empty()) throw std::invalid_argument("Scenario: empty setpoint schedule");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      if (i > 0 && schedule[i].start_cycle <= schedule[i - 1].start_cycle) {
        throw std::invalid_argument("Scenario: schedule cycle indices must be strictly increasing");
      }
      if (!(schedule[i].p_des >= 0.0)) throw std::invalid_argument("Scenario: setpoints must be >= 0");
    }
    if (schedule.front().start_cycle != 0) throw std::invalid_argument("Scenario: schedule must start at cycle 0");
    if (total_cycles < 1 || total_cycles < schedule.back().start_cycle) {
      throw std::invalid_argument("Scenario: total cycles must cover the schedule");
    }
    if (warmup_cycles < 0) throw std::invalid_argument("Scenario: warmup cycles must be >= 0");
    validate_input(warmup_input);
    plant.validate();
    nmpc.validate();
    if (correction && !(correction_gain > 0.0 && correction_gain <= 1.0)) {
      throw std::invalid_argument("Scenario: correction gain must be in (0, 1]");
    }
    if (kind == ControllerKind::Dnn && !net) throw std::invalid_argument("Scenario: dnn controller needs a network");
    if (kind == ControllerKind::DnnQuant && !qnet) {
      throw std::invalid_argument("Scenario: dnn-quant controller needs a quantized network");
    }
  }

  double setpoint_at(int cycle) const {
    double p = schedule.front().p_des;
    for (const auto& s : schedule) {
      if (s.start_cycle <= cycle) p = s.p_des;
    }
    return p;
  }
};

struct CycleRecord {
  int cycle = 0;
  double t_start = 0.0;  // [s], warmup included
  ControlInput u;
  PlantState x_start;
  double p_avg = 0.0;
  double p_des = 0.0;
  double p_des_corrected = 0.0;
  bool zvs_on_ok = true;
  bool zvs_off_ok = true;
  std::string solver_status = "none";
};

struct RunMetrics {
  double avg_tracking_error = 0.0;  // [W/cycle]
  double zvs_violation_pct = 0.0;
  std::vector<std::optional<double>> steady_state_error;  // [W] per setpoint segment
  int cycles = 0;
  int violations = 0;
};

struct RunResult {
  std::vector<CycleRecord> trace;
  RunMetrics metrics;
};

/// Cycle index within a segment from which the steady-state error is taken.
inline constexpr int kSteadyStateCycle = 10;

/// Metrics over per-cycle values. Segments are maximal runs of equal p_des.
inline RunMetrics compute_metrics(const std::vector<CycleRecord>& trace) {
  if (trace.empty()) throw std::invalid_argument("compute_metrics: empty trace");
  RunMetrics m;
  m.cycles = static_cast<int>(trace.size());
  double err = 0.0;
  for (const auto& r : trace) {
    err += std::abs(r.p_avg - r.p_des);
    if (!(r.zvs_on_ok && r.zvs_off_ok)) ++m.violations;
  }
  m.avg_tracking_error = err / m.cycles;
  m.zvs_violation_pct = 100.0 * m.violations / m.cycles;

  std::size_t begin = 0;
  while (begin < trace.size()) {
    std::size_t end = begin;
    while (end < trace.size() && trace[end].p_des == trace[begin].p_des) ++end;
    const std::size_t from = begin + kSteadyStateCycle;
    if (from < end) {
      double s = 0.0;
      for (std::size_t k = from; k < end; ++k) s += std::abs(trace[k].p_avg - trace[k].p_des);
      m.steady_state_error.emplace_back(s / static_cast<double>(end - from));
    } else {
      m.steady_state_error.emplace_back(std::nullopt);
    }
    begin = end;
  }
  return m;
}

/// Lowest frequency above resonance whose steady-state power at D = 0.5 does
/// not exceed p_full; at that frequency D in (0, 0.5] spans up to p_full.
inline double pi_duty_frequency(const ConverterParams& p, double f_min, double f_max, double p_full) {
  const double f_res = std::max(f_min, derive_resonance(p));
  auto power = [&](double f) { return steady_state_cycle(p, {f, 0.5}, 2).p_avg; };
  if (power(f_max) >= p_full) return f_max;
  if (power(f_res) <= p_full) return f_res;
  double lo = f_res, hi = f_max;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (power(mid) > p_full ? lo : hi) = mid;
  }
  return hi;
}

namespace detail {

class PiLaw {
 public:
  PiLaw(ControllerKind kind, const PiSettings& s, const NmpcConfig& cfg, const ControlInput& initial)
      : kind_(kind), s_(s) {
    if (kind == ControllerKind::PiFreq) {
      lo_ = cfg.f_min;
      hi_ = cfg.f_max;
      fixed_ = s.duty_fixed;
      out_ = std::clamp(initial.f_sw, lo_, hi_);
    } else {
      lo_ = s.d_min_pi_duty;
      hi_ = s.d_max_pi_duty;
      fixed_ = s.f_fixed > 0.0 ? s.f_fixed : pi_duty_frequency(cfg.model, cfg.f_min, cfg.f_max, s.p_full);
      out_ = std::clamp(initial.duty, lo_, hi_);
    }
    integral_ = out_;
  }

  /// error = p_des - p_meas of the previous cycle.
  ControlInput step(double error) {
    // Raising f above resonance lowers power; raising D on the lower branch raises it.
    const double sign = kind_ == ControllerKind::PiFreq ? -1.0 : 1.0;
    const double scale = hi_ - lo_;
    const double candidate = integral_ + sign * s_.ki * scale * error;
    const double unclamped = candidate + sign * s_.kp * scale * error;
    // Conditional integration: freeze the integrator while the output saturates outward.
    if (unclamped >= lo_ && unclamped <= hi_) integral_ = candidate;
    else integral_ = std::clamp(candidate, lo_, hi_);
    out_ = std::clamp(unclamped, lo_, hi_);
    return kind_ == ControllerKind::PiFreq ? ControlInput{out_, fixed_} : ControlInput{fixed_, out_};
  }

 private:
  ControllerKind kind_;
  PiSettings s_;
  double lo_ = 0.0, hi_ = 1.0, fixed_ = 0.0, out_ = 0.0, integral_ = 0.0;
};

}  // namespace detail

/// Runs warmup at the fixed input, then one controller query and one
/// true-plant cycle per switching period.
inline RunResult run_closed_loop(const Scenario& sc) {
  sc.validate();
  PlantState x{};
  double t = 0.0;
  for (int k = 0; k < sc.warmup_cycles; ++k) {
    x = simulate_cycle(x, sc.plant, sc.warmup_input).state_end;
    t += 1.0 / sc.warmup_input.f_sw;
  }

  std::optional<Controller> nmpc;
  std::optional<detail::PiLaw> pi;
  if (sc.kind == ControllerKind::ExactNmpc) nmpc.emplace(sc.nmpc, sc.warmup_input);
  if (sc.kind == ControllerKind::PiFreq || sc.kind == ControllerKind::PiDuty) {
    pi.emplace(sc.kind, sc.pi, sc.nmpc, sc.warmup_input);
  }

  RunResult res;
  res.trace.reserve(static_cast<std::size_t>(sc.total_cycles));
  double p_corrected = sc.setpoint_at(0);
  double p_meas_prev = std::numeric_limits<double>::quiet_NaN();
  for (int k = 0; k < sc.total_cycles; ++k) {
    const double p_des = sc.setpoint_at(k);
    const bool new_segment = k == 0 || p_des != sc.setpoint_at(k - 1);
    if (new_segment) {
      p_corrected = p_des;
    } else if (sc.correction && k >= sc.correction_start_cycle) {
      p_corrected = std::max(0.0, apply_correction({p_des, p_corrected, sc.correction_gain}, p_meas_prev).p_des_current);
    }

    CycleRecord rec;
    rec.cycle = k;
    rec.t_start = t;
    rec.x_start = x;
    rec.p_des = p_des;
    rec.p_des_corrected = p_corrected;
    switch (sc.kind) {
      case ControllerKind::ExactNmpc:
        rec.u = nmpc->step(x, p_corrected);
        rec.solver_status = nmpc->degraded() ? std::string("degraded-") + to_string(nmpc->last_status())
                                             : to_string(nmpc->last_status());
        break;
      case ControllerKind::Dnn: rec.u = forward(*sc.net, {x.i_o, x.v_c, p_corrected}); break;
      case ControllerKind::DnnQuant: rec.u = forward_q(*sc.qnet, {x.i_o, x.v_c, p_corrected}); break;
      case ControllerKind::PiFreq:
      case ControllerKind::PiDuty:
        rec.u = pi->step(std::isnan(p_meas_prev) ? 0.0 : p_corrected - p_meas_prev);
        break;
    }
    const CycleResult cyc = simulate_cycle(x, sc.plant, rec.u);
    rec.p_avg = cyc.p_avg;
    rec.zvs_on_ok = cyc.zvs_on_ok;
    rec.zvs_off_ok = cyc.zvs_off_ok;
    res.trace.push_back(rec);
    x = cyc.state_end;
    t += 1.0 / rec.u.f_sw;
    p_meas_prev = cyc.p_avg;
  }
  res.metrics = compute_metrics(res.trace);
  return res;
}

/// Step sequence 500 W -> 3000 W -> 1000 W, five cycles each.
inline Scenario step_scenario(const NmpcConfig& cfg, ControllerKind kind) {
  Scenario sc;
  sc.schedule = {{0, 500.0}, {5, 3000.0}, {10, 1000.0}};
  sc.total_cycles = 15;
  sc.plant = cfg.model;
  sc.nmpc = cfg;
  sc.kind = kind;
  return sc;
}

struct BenchmarkConfig {
  int n_runs = 100;
  int segments = 3;
  int cycles_per_segment = 5;
  double p_lo = 500.0;
  double p_hi = 3000.0;
  double param_error = 0.0;  // relative half-range of the R_L and L_r draws
  std::uint64_t seed = 1;
  unsigned threads = default_threads();
};

/// Scenario template shared by every controller; the run index fixes the
/// setpoints and plant parameters.
inline Scenario benchmark_scenario(const BenchmarkConfig& bc, const NmpcConfig& cfg, int run) {
  std::seed_seq sq{bc.seed, static_cast<std::uint64_t>(run)};
  std::mt19937_64 rng(sq);
  std::uniform_real_distribution<double> dp(bc.p_lo, bc.p_hi), de(-bc.param_error, bc.param_error);
  Scenario sc;
  sc.nmpc = cfg;
  sc.plant = cfg.model;
  for (int s = 0; s < bc.segments; ++s) sc.schedule.push_back({s * bc.cycles_per_segment, dp(rng)});
  sc.total_cycles = bc.segments * bc.cycles_per_segment;
  if (bc.param_error > 0.0) {
    sc.plant.r_l *= 1.0 + de(rng);
    sc.plant.l_r *= 1.0 + de(rng);
  }
  sc.seed = bc.seed;
  return sc;
}

struct ControllerSummary {
  ControllerKind kind = ControllerKind::ExactNmpc;
  double avg_tracking_error = 0.0;
  double zvs_violation_pct = 0.0;
  int runs = 0;
  int failed_runs = 0;
  std::vector<RunMetrics> per_run;
};

struct BenchmarkResult {
  std::vector<ControllerSummary> controllers;
  bool partial = false;

  const ControllerSummary& of(ControllerKind k) const {
    for (const auto& c : controllers) {
      if (c.kind == k) return c;
    }
    throw std::out_of_range("benchmark result has no such controller");
  }
};

/// Paired campaign: every controller sees the same scenarios. Runs execute in
/// parallel; results are collected by index so the output is thread-count
/// independent.
inline BenchmarkResult run_benchmark(const BenchmarkConfig& bc, const NmpcConfig& cfg,
                                     const std::vector<ControllerKind>& kinds, const Scenario& controller_template) {
  if (bc.n_runs < 1) throw std::invalid_argument("run_benchmark: n_runs must be >= 1");
  const std::size_t nk = kinds.size();
  std::vector<std::optional<RunMetrics>> out(static_cast<std::size_t>(bc.n_runs) * nk);
  parallel_for(out.size(), bc.threads, [&](std::size_t idx) {
    const int run = static_cast<int>(idx / nk);
    Scenario sc = benchmark_scenario(bc, cfg, run);
    sc.kind = kinds[idx % nk];
    sc.net = controller_template.net;
    sc.qnet = controller_template.qnet;
    sc.pi = controller_template.pi;
    sc.correction = controller_template.correction;
    sc.correction_gain = controller_template.correction_gain;
    try {
      out[idx] = run_closed_loop(sc).metrics;
    } catch (const std::runtime_error&) {
      out[idx] = std::nullopt;
    }
  });
  BenchmarkResult res;
  for (std::size_t c = 0; c < nk; ++c) {
    ControllerSummary s;
    s.kind = kinds[c];
    double err = 0.0;
    long cycles = 0, violations = 0;
    for (int r = 0; r < bc.n_runs; ++r) {
      const auto& m = out[static_cast<std::size_t>(r) * nk + c];
      if (!m) {
        ++s.failed_runs;
        res.partial = true;
        continue;
      }
      err += m->avg_tracking_error * m->cycles;
      cycles += m->cycles;
      violations += m->violations;
      s.per_run.push_back(*m);
      ++s.runs;
    }
    if (cycles > 0) {
      s.avg_tracking_error = err / static_cast<double>(cycles);
      s.zvs_violation_pct = 100.0 * static_cast<double>(violations) / static_cast<double>(cycles);
    }
    res.controllers.push_back(std::move(s));
  }
  return res;
}

struct GridCell {
  double r_error = 0.0;  // relative
  double l_error = 0.0;
  double p_des = 0.0;
  double steady_state_error = 0.0;  // [W]
  double steady_state_error_uncorrected = 0.0;
  double zvs_violation_pct = 0.0;
};

struct GridConfig {
  std::vector<double> setpoints{1000.0, 2000.0, 3000.0};
  std::vector<double> r_errors{-0.15, 0.0, 0.15};
  std::vector<double> l_errors{-0.15, 0.0, 0.15};
  int cycles = 20;
  double correction_gain = 0.8;
  ControllerKind kind = ControllerKind::DnnQuant;
  unsigned threads = default_threads();
};

/// Parameter-error grid: one constant setpoint per run; steady-state error is
/// the mean |P - P_des| from cycle 10 of the run. Each cell is also run
/// without correction for comparison.
inline std::vector<GridCell> run_param_grid(const GridConfig& gc, const NmpcConfig& cfg,
                                            const Scenario& controller_template) {
  if (gc.cycles <= kSteadyStateCycle) throw std::invalid_argument("run_param_grid: cycles must exceed 10");
  std::vector<GridCell> cells;
  for (double r : gc.r_errors) {
    for (double l : gc.l_errors) {
      for (double p : gc.setpoints) cells.push_back({r, l, p, 0.0, 0.0, 0.0});
    }
  }
  parallel_for(cells.size(), gc.threads, [&](std::size_t i) {
    GridCell& c = cells[i];
    Scenario sc;
    sc.schedule = {{0, c.p_des}};
    sc.total_cycles = gc.cycles;
    sc.nmpc = cfg;
    sc.plant = cfg.model;
    sc.plant.r_l *= 1.0 + c.r_error;
    sc.plant.l_r *= 1.0 + c.l_error;
    sc.kind = gc.kind;
    sc.net = controller_template.net;
    sc.qnet = controller_template.qnet;
    sc.pi = controller_template.pi;
    sc.correction = true;
    sc.correction_gain = gc.correction_gain;
    const RunMetrics with = run_closed_loop(sc).metrics;
    sc.correction = false;
    const RunMetrics without = run_closed_loop(sc).metrics;
    c.steady_state_error = with.steady_state_error.front().value();
    c.steady_state_error_uncorrected = without.steady_state_error.front().value();
    c.zvs_violation_pct = with.zvs_violation_pct;
  });
  return cells;
}

struct PiTuneResult {
  PiSettings settings;
  int settling_cycles = 0;  // summed over the steps
  bool found = false;
  int candidates = 0;
};

/// Settling cycles of one PI run over a step sequence, or nullopt when the
/// power overshoots a setpoint by more than `overshoot_tol` (relative) or
/// never settles within `band` (relative).
inline std::optional<int> pi_settling(const Scenario& sc, double band = 0.02, double overshoot_tol = 0.01) {
  const RunResult r = run_closed_loop(sc);
  int total = 0;
  for (std::size_t s = 0; s < sc.schedule.size(); ++s) {
    const int begin = sc.schedule[s].start_cycle;
    const int end = s + 1 < sc.schedule.size() ? sc.schedule[s + 1].start_cycle : sc.total_cycles;
    const double target = sc.schedule[s].p_des;
    const double prev = s == 0 ? r.trace.front().p_avg : sc.schedule[s - 1].p_des;
    const double dir = target >= prev ? 1.0 : -1.0;
    int settled = -1;
    for (int k = begin; k < end; ++k) {
      const double p = r.trace[static_cast<std::size_t>(k)].p_avg;
      if (dir * (p - target) > overshoot_tol * target) return std::nullopt;
      if (std::abs(p - target) <= band * target) {
        if (settled < 0) settled = k - begin;
      } else {
        settled = -1;
      }
    }
    if (settled < 0) return std::nullopt;
    total += settled;
  }
  return total;
}

/// Gain scan over a log grid picking the fastest settling without overshoot
/// on the step sequence (held long enough for a PI loop to settle).
inline PiTuneResult pi_tune(ControllerKind kind, const NmpcConfig& cfg, PiSettings base = {},
                            int hold_cycles = 150) {
  if (kind != ControllerKind::PiFreq && kind != ControllerKind::PiDuty) {
    throw std::invalid_argument("pi_tune: controller must be pi-freq or pi-duty");
  }
  if (kind == ControllerKind::PiDuty && base.f_fixed <= 0.0) {
    base.f_fixed = pi_duty_frequency(cfg.model, cfg.f_min, cfg.f_max, base.p_full);
  }
  Scenario sc = step_scenario(cfg, kind);
  sc.schedule = {{0, 500.0}, {hold_cycles, 3000.0}, {2 * hold_cycles, 1000.0}};
  sc.total_cycles = 3 * hold_cycles;
  PiTuneResult best;
  for (int a = 0; a <= 15; ++a) {
    const double ki = 1e-6 * std::pow(10.0, a / 3.0);
    for (int b = 0; b <= 13; ++b) {
      const double kp = b == 0 ? 0.0 : 1e-6 * std::pow(10.0, (b - 1) / 3.0);
      PiSettings s = base;
      s.kp = kp;
      s.ki = ki;
      sc.pi = s;
      ++best.candidates;
      const std::optional<int> settle = pi_settling(sc);
      if (settle && (!best.found || *settle < best.settling_cycles)) {
        best.settings = s;
        best.settling_cycles = *settle;
        best.found = true;
      }
    }
  }
  return best;
}

}  // namespace rsmpc
