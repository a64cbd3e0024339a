#include <gtest/gtest.h>

#include <cmath>

#include "rsmpc/harness.hpp"
#include "rsmpc/io.hpp"

using namespace rsmpc;

namespace {

const NmpcConfig kCfg{};

CycleRecord record(double p_avg, double p_des, bool ok = true) {
  CycleRecord r;
  r.p_avg = p_avg;
  r.p_des = p_des;
  r.zvs_on_ok = ok;
  r.zvs_off_ok = true;
  return r;
}

// Small policy trained once for the closed-loop tests below.
class PolicyLoop : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const Dataset ds = generate_dataset_trajectories(80, 15, kCfg, 31);
    TrainConfig tc;
    tc.epochs = 150;
    const PolicyNetwork trained = train(ds, tc, {}, OutputBox::from(kCfg)).net;
    net_ = std::make_shared<const PolicyNetwork>(trained);
    qnet_ = std::make_shared<const QuantizedNetwork>(quantize(trained, sample_inputs(5000, trained.input_box, 32)));
  }
  static void TearDownTestSuite() {
    net_.reset();
    qnet_.reset();
  }

  static Scenario templ() {
    Scenario sc;
    sc.net = net_;
    sc.qnet = qnet_;
    return sc;
  }

  static inline std::shared_ptr<const PolicyNetwork> net_;
  static inline std::shared_ptr<const QuantizedNetwork> qnet_;
};

}  // namespace

TEST(Metrics, PerfectTrackingIsAllZero) {
  std::vector<CycleRecord> t;
  for (int k = 0; k < 30; ++k) t.push_back(record(k < 15 ? 700.0 : 1500.0, k < 15 ? 700.0 : 1500.0));
  const RunMetrics m = compute_metrics(t);
  EXPECT_EQ(m.avg_tracking_error, 0.0);
  EXPECT_EQ(m.zvs_violation_pct, 0.0);
  ASSERT_EQ(m.steady_state_error.size(), 2u);
  EXPECT_EQ(m.steady_state_error[0].value(), 0.0);
  EXPECT_EQ(m.steady_state_error[1].value(), 0.0);
}

TEST(Metrics, ViolationPercentage) {
  std::vector<CycleRecord> t;
  for (int k = 0; k < 51; ++k) t.push_back(record(1000.0, 1000.0, k != 7 && k != 30));
  const RunMetrics m = compute_metrics(t);
  EXPECT_EQ(m.violations, 2);
  EXPECT_NEAR(m.zvs_violation_pct, 3.92, 5e-3);
}

TEST(Metrics, TrackingAndSteadyStateArithmetic) {
  std::vector<CycleRecord> t;
  for (int k = 0; k < 12; ++k) t.push_back(record(k < 10 ? 900.0 : 1004.0, 1000.0));
  for (int k = 0; k < 5; ++k) t.push_back(record(2010.0, 2000.0));
  const RunMetrics m = compute_metrics(t);
  EXPECT_NEAR(m.avg_tracking_error, (10 * 100.0 + 2 * 4.0 + 5 * 10.0) / 17.0, 1e-12);
  ASSERT_EQ(m.steady_state_error.size(), 2u);
  EXPECT_NEAR(m.steady_state_error[0].value(), 4.0, 1e-12);
  EXPECT_FALSE(m.steady_state_error[1].has_value());
  EXPECT_THROW(compute_metrics({}), std::invalid_argument);
}

TEST(Metrics, IndependentOfTraceDensity) {
  const ControlInput u{42e3, 0.4};
  const PlantState x{-8.0, 30.0};
  const CycleResult a = simulate_cycle(x, kCfg.model, u, 2);
  const CycleResult b = simulate_cycle(x, kCfg.model, u, 500);
  EXPECT_EQ(a.p_avg, b.p_avg);
  EXPECT_EQ(a.state_end, b.state_end);
  EXPECT_EQ(a.zvs_on_ok, b.zvs_on_ok);
  EXPECT_EQ(a.zvs_off_ok, b.zvs_off_ok);
}

TEST(ScenarioCheck, InvalidSchedulesRejected) {
  Scenario sc = step_scenario(kCfg, ControllerKind::ExactNmpc);
  sc.schedule = {{0, 500.0}, {5, 600.0}, {5, 700.0}};
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc.schedule = {{2, 500.0}};
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc.schedule = {{0, 500.0}, {20, 600.0}};
  sc.total_cycles = 15;
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc = step_scenario(kCfg, ControllerKind::Dnn);
  EXPECT_THROW(run_closed_loop(sc), std::invalid_argument);
  EXPECT_THROW(parse_controller_kind("mpc"), std::invalid_argument);
}

TEST(ClosedLoop, StepScenarioWithExactNmpc) {
  const RunResult r = run_closed_loop(step_scenario(kCfg, ControllerKind::ExactNmpc));
  ASSERT_EQ(r.trace.size(), 15u);
  EXPECT_EQ(r.metrics.violations, 0);
  for (int seg = 0; seg < 3; ++seg) {
    for (int k = 2; k < 5; ++k) {
      const CycleRecord& c = r.trace[static_cast<std::size_t>(5 * seg + k)];
      EXPECT_NEAR(c.p_avg, c.p_des, 0.02 * c.p_des) << "cycle " << c.cycle;
    }
  }
}

TEST(ClosedLoop, UnconstrainedPiDutyViolatesZvsWhereMpcDoesNot) {
  const PiTuneResult tuned = pi_tune(ControllerKind::PiDuty, kCfg);
  ASSERT_TRUE(tuned.found);
  Scenario pi = step_scenario(kCfg, ControllerKind::PiDuty);
  pi.pi = tuned.settings;
  pi.schedule = {{0, 500.0}, {20, 3000.0}, {40, 1000.0}};
  pi.total_cycles = 60;
  Scenario mpc = pi;
  mpc.kind = ControllerKind::ExactNmpc;
  EXPECT_GT(run_closed_loop(pi).metrics.violations, 0);
  EXPECT_EQ(run_closed_loop(mpc).metrics.violations, 0);
}

TEST(ClosedLoop, PiFreqTuningSettlesWithoutOvershoot) {
  const PiTuneResult tuned = pi_tune(ControllerKind::PiFreq, kCfg);
  ASSERT_TRUE(tuned.found);
  EXPECT_GT(tuned.settings.ki, 0.0);
  Scenario sc = step_scenario(kCfg, ControllerKind::PiFreq);
  sc.pi = tuned.settings;
  sc.schedule = {{0, 500.0}, {150, 3000.0}, {300, 1000.0}};
  sc.total_cycles = 450;
  EXPECT_TRUE(pi_settling(sc).has_value());
}

TEST(Benchmark, PairedSeedsReproduceAcrossThreadCounts) {
  BenchmarkConfig bc;
  bc.n_runs = 6;
  bc.param_error = 0.15;
  bc.seed = 77;
  Scenario templ;
  bc.threads = 1;
  const BenchmarkResult a = run_benchmark(bc, kCfg, {ControllerKind::ExactNmpc}, templ);
  bc.threads = 3;
  const BenchmarkResult b = run_benchmark(bc, kCfg, {ControllerKind::ExactNmpc}, templ);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_FALSE(a.partial);
  // Same run index, same scenario, whoever asks.
  const Scenario s1 = benchmark_scenario(bc, kCfg, 3), s2 = benchmark_scenario(bc, kCfg, 3);
  EXPECT_EQ(s1.schedule[1].p_des, s2.schedule[1].p_des);
  EXPECT_EQ(s1.plant.r_l, s2.plant.r_l);
  const std::string t1 = trace_to_csv(run_closed_loop(s1).trace);
  const std::string t2 = trace_to_csv(run_closed_loop(s2).trace);
  EXPECT_EQ(t1, t2);
}

TEST(Benchmark, SetpointsAndParameterDrawsWithinRanges) {
  BenchmarkConfig bc;
  bc.param_error = 0.15;
  for (int run = 0; run < 100; ++run) {
    const Scenario sc = benchmark_scenario(bc, kCfg, run);
    ASSERT_EQ(sc.schedule.size(), 3u);
    for (const auto& s : sc.schedule) {
      EXPECT_GE(s.p_des, 500.0);
      EXPECT_LE(s.p_des, 3000.0);
    }
    EXPECT_LE(std::abs(sc.plant.r_l / kCfg.model.r_l - 1.0), 0.15 + 1e-12);
    EXPECT_LE(std::abs(sc.plant.l_r / kCfg.model.l_r - 1.0), 0.15 + 1e-12);
    EXPECT_EQ(sc.nmpc.model.r_l, kCfg.model.r_l);
  }
}

TEST(Benchmark, ExactNmpcNominalHasNoViolations) {
  BenchmarkConfig bc;
  bc.n_runs = 20;
  bc.seed = 5;
  const BenchmarkResult r = run_benchmark(bc, kCfg, {ControllerKind::ExactNmpc}, Scenario{});
  EXPECT_EQ(r.of(ControllerKind::ExactNmpc).zvs_violation_pct, 0.0);
  EXPECT_EQ(r.of(ControllerKind::ExactNmpc).runs, 20);
}

TEST_F(PolicyLoop, CorrectionFromMidRunRemovesSteadyStateError) {
  Scenario sc = templ();
  sc.kind = ControllerKind::Dnn;
  sc.nmpc = kCfg;
  sc.plant = kCfg.model;
  sc.plant.r_l *= 1.15;
  sc.plant.l_r *= 1.15;
  sc.schedule = {{0, 1500.0}};
  sc.total_cycles = 40;
  sc.correction = true;
  sc.correction_start_cycle = 20;
  const RunResult r = run_closed_loop(sc);
  double before = 0, after = 0;
  for (int k = 10; k < 20; ++k) before += std::abs(r.trace[static_cast<std::size_t>(k)].p_avg - 1500.0) / 10;
  for (int k = 30; k < 40; ++k) after += std::abs(r.trace[static_cast<std::size_t>(k)].p_avg - 1500.0) / 10;
  EXPECT_GT(before, 1.0);
  EXPECT_LT(after, 1.0);
}

TEST_F(PolicyLoop, CorrectionBeatsNoCorrectionOnEveryPerturbedCell) {
  GridConfig gc;
  gc.kind = ControllerKind::DnnQuant;
  const std::vector<GridCell> cells = run_param_grid(gc, kCfg, templ());
  ASSERT_EQ(cells.size(), 27u);
  for (const GridCell& c : cells) {
    if (c.r_error == 0.0 && c.l_error == 0.0) continue;
    EXPECT_LT(c.steady_state_error, c.steady_state_error_uncorrected)
        << c.r_error << " " << c.l_error << " " << c.p_des;
  }
}

TEST_F(PolicyLoop, QuantizedAndFloatPoliciesAgreeInClosedLoop) {
  Scenario a = step_scenario(kCfg, ControllerKind::Dnn);
  a.net = net_;
  Scenario b = a;
  b.kind = ControllerKind::DnnQuant;
  b.qnet = qnet_;
  const RunResult ra = run_closed_loop(a), rb = run_closed_loop(b);
  for (std::size_t k = 0; k < ra.trace.size(); ++k) {
    EXPECT_NEAR(ra.trace[k].u.f_sw, rb.trace[k].u.f_sw, 0.05 * 35e3);
    EXPECT_NEAR(ra.trace[k].u.duty, rb.trace[k].u.duty, 0.05 * 0.3);
  }
}
