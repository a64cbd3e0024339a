// Command-line front end: scenarios, single solves, data generation,
// training, quantization and benchmark campaigns.
#include <cstdio>
#include <exception>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rsmpc/harness.hpp"
#include "rsmpc/io.hpp"
#include "rsmpc/nmpc.hpp"
#include "rsmpc/policy.hpp"
#include "rsmpc/quant.hpp"

using namespace rsmpc;

namespace {

enum ExitCode { kOk = 0, kArgError = 1, kNumericError = 2, kThresholdError = 3 };

/// Options shared by every subcommand; kHz flags override the config file.
struct Common {
  std::string config_path;
  unsigned threads = default_threads();
  std::optional<double> f_min_khz, f_max_khz;
  std::optional<double> zvs_margin_a;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--f-min-khz", c.f_min_khz, "lower switching frequency bound [kHz]");
  cmd->add_option("--f-max-khz", c.f_max_khz, "upper switching frequency bound [kHz]");
  cmd->add_option("--zvs-margin-a", c.zvs_margin_a, "ZVS current margin [A]");
}

AppConfig resolve(const Common& c) {
  AppConfig cfg = c.config_path.empty() ? AppConfig{} : load_config(c.config_path);
  if (c.f_min_khz) cfg.nmpc.f_min = *c.f_min_khz * 1e3;
  if (c.f_max_khz) cfg.nmpc.f_max = *c.f_max_khz * 1e3;
  if (c.zvs_margin_a) cfg.nmpc.zvs_margin = *c.zvs_margin_a;
  cfg.nmpc.validate();
  return cfg;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw std::invalid_argument("not a number: '" + item + "'");
    }
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<ControllerKind> parse_kinds(const std::string& s) {
  std::vector<ControllerKind> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_controller_kind(item));
  if (out.empty()) throw std::invalid_argument("no controllers given");
  return out;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    detail::write_text(path, text);
  }
}

/// Loads the networks a controller set needs.
void attach_networks(Scenario& sc, const std::vector<ControllerKind>& kinds, const std::string& net_path,
                     const std::string& qnet_path) {
  for (ControllerKind k : kinds) {
    if (k == ControllerKind::Dnn && !sc.net) {
      if (net_path.empty()) throw std::invalid_argument("controller dnn needs --network");
      sc.net = std::make_shared<PolicyNetwork>(load_network(net_path));
    }
    if (k == ControllerKind::DnnQuant && !sc.qnet) {
      if (qnet_path.empty()) throw std::invalid_argument("controller dnn-quant needs --qnet");
      sc.qnet = std::make_shared<QuantizedNetwork>(load_qnet(qnet_path));
    }
  }
}

PiSettings pi_for(const AppConfig& cfg, ControllerKind k) {
  return k == ControllerKind::PiDuty ? cfg.pi_duty : cfg.pi_freq;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Resonant inverter NMPC and policy-network toolkit"};
  app.require_subcommand(1);

  // simulate
  Common sim_c;
  std::string sim_controller, sim_net, sim_qnet, sim_trace, sim_summary, sim_setpoints;
  int sim_seg_cycles = 0;
  std::optional<double> sim_r_err, sim_l_err, sim_gain, sim_warm_khz;
  std::optional<int> sim_corr_start;
  bool sim_correction = false;
  auto* sim = app.add_subcommand("simulate", "run one closed-loop scenario");
  add_common(sim, sim_c);
  sim->add_option("--controller", sim_controller, "exact-nmpc | dnn | dnn-quant | pi-freq | pi-duty");
  sim->add_option("--network", sim_net, "float network JSON");
  sim->add_option("--qnet", sim_qnet, "quantized network JSON");
  sim->add_option("--setpoints-w", sim_setpoints, "comma-separated setpoints [W]");
  sim->add_option("--cycles-per-setpoint", sim_seg_cycles, "cycles per setpoint when --setpoints-w is given")
      ->check(CLI::PositiveNumber);
  sim->add_option("--r-error", sim_r_err, "relative error of the plant R_L vs the model");
  sim->add_option("--l-error", sim_l_err, "relative error of the plant L_r vs the model");
  sim->add_flag("--correction", sim_correction, "enable setpoint correction");
  sim->add_option("--gain", sim_gain, "correction gain K");
  sim->add_option("--correction-start", sim_corr_start, "first cycle with correction");
  sim->add_option("--warmup-f-khz", sim_warm_khz, "warmup switching frequency [kHz]");
  sim->add_option("--trace", sim_trace, "trace CSV output (default stdout)");
  sim->add_option("--summary", sim_summary, "summary JSON output");

  // solve
  Common sol_c;
  double sol_io = 0.0, sol_vc = 0.0, sol_p = 0.0;
  auto* sol = app.add_subcommand("solve", "solve one NMPC instance and print the solution");
  add_common(sol, sol_c);
  sol->add_option("--io", sol_io, "measured inductor current [A]")->required();
  sol->add_option("--vc", sol_vc, "measured capacitor voltage [V]")->required();
  sol->add_option("--pdes", sol_p, "desired power [W]")->required();

  // gen-data
  Common gen_c;
  std::string gen_mode, gen_out = "-";
  int gen_n = 1000, gen_steps = 15, gen_hold = 0;
  std::uint64_t gen_seed = 1;
  auto* gen = app.add_subcommand("gen-data", "generate a labelled dataset");
  add_common(gen, gen_c);
  gen->add_option("mode", gen_mode, "random | trajectory")->required()->check(CLI::IsMember({"random", "trajectory"}));
  gen->add_option("-n,--count", gen_n, "samples (random) or trajectories (trajectory)")->check(CLI::PositiveNumber);
  gen->add_option("--steps", gen_steps, "switching periods per trajectory")->check(CLI::PositiveNumber);
  gen->add_option("--setpoint-hold", gen_hold, "redraw the setpoint every k steps (0: never)");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("-o,--out", gen_out, "dataset CSV (default stdout)");

  // train
  Common tr_c;
  std::string tr_data, tr_out, tr_history;
  std::optional<int> tr_epochs;
  std::optional<std::uint64_t> tr_seed;
  auto* trn = app.add_subcommand("train", "train the policy network on a dataset");
  add_common(trn, tr_c);
  trn->add_option("--data", tr_data, "dataset CSV")->required()->check(CLI::ExistingFile);
  trn->add_option("-o,--out", tr_out, "network JSON")->required();
  trn->add_option("--epochs", tr_epochs, "epochs")->check(CLI::PositiveNumber);
  trn->add_option("--seed", tr_seed, "training seed");
  trn->add_option("--history", tr_history, "loss history CSV");

  // quantize
  Common q_c;
  std::string q_net, q_out, q_report;
  int q_word = 16, q_acc = 32, q_cal = 10000, q_test = 10000;
  std::uint64_t q_seed = 1;
  auto* qnt = app.add_subcommand("quantize", "quantize a network to fixed point and report its accuracy");
  add_common(qnt, q_c);
  qnt->add_option("--network", q_net, "float network JSON")->required()->check(CLI::ExistingFile);
  qnt->add_option("-o,--out", q_out, "quantized network JSON")->required();
  qnt->add_option("--word-bits", q_word, "word width");
  qnt->add_option("--accumulator-bits", q_acc, "accumulator width");
  qnt->add_option("--calibration", q_cal, "calibration inputs drawn from the sampling box")->check(CLI::PositiveNumber);
  qnt->add_option("--test", q_test, "test inputs for the report")->check(CLI::PositiveNumber);
  qnt->add_option("--seed", q_seed, "sampling seed");
  qnt->add_option("--report", q_report, "report JSON (default stdout)");

  // bench
  Common b_c;
  std::string b_controllers = "exact-nmpc,dnn", b_net, b_qnet, b_out;
  int b_runs = 100;
  double b_perr = 0.0;
  std::uint64_t b_seed = 1;
  std::optional<double> b_max_ratio, b_max_zvs;
  auto* bench = app.add_subcommand("bench", "paired random-setpoint campaign");
  add_common(bench, b_c);
  bench->add_option("--controllers", b_controllers, "comma-separated controller kinds");
  bench->add_option("--runs", b_runs, "runs")->check(CLI::PositiveNumber);
  bench->add_option("--param-error", b_perr, "relative half-range of random R_L and L_r errors")
      ->check(CLI::Range(0.0, 0.9));
  bench->add_option("--seed", b_seed, "campaign seed");
  bench->add_option("--network", b_net, "float network JSON");
  bench->add_option("--qnet", b_qnet, "quantized network JSON");
  bench->add_option("-o,--out", b_out, "summary JSON (default stdout)");
  bench->add_option("--max-ratio", b_max_ratio, "fail (exit 3) if any controller's error exceeds this multiple of the first");
  bench->add_option("--max-zvs-pct", b_max_zvs, "fail (exit 3) if any controller exceeds this ZVS violation %");

  // grid
  Common g_c;
  std::string g_controller = "dnn-quant", g_net, g_qnet, g_out;
  double g_gain = 0.8;
  std::optional<double> g_max_err;
  auto* grid = app.add_subcommand("grid", "parameter-error grid with setpoint correction");
  add_common(grid, g_c);
  grid->add_option("--controller", g_controller, "controller kind");
  grid->add_option("--network", g_net, "float network JSON");
  grid->add_option("--qnet", g_qnet, "quantized network JSON");
  grid->add_option("--gain", g_gain, "correction gain K");
  grid->add_option("-o,--out", g_out, "summary JSON (default stdout)");
  grid->add_option("--max-error-w", g_max_err, "fail (exit 3) if a cell's steady-state error exceeds this [W]");

  // pi-tune
  Common p_c;
  std::string p_kind = "pi-freq", p_out;
  std::optional<double> p_fixed_khz;
  int p_hold = 150;
  auto* pit = app.add_subcommand("pi-tune", "scan PI gains for the fastest settling without overshoot");
  add_common(pit, p_c);
  pit->add_option("--kind", p_kind, "pi-freq | pi-duty")->check(CLI::IsMember({"pi-freq", "pi-duty"}));
  pit->add_option("--fixed-f-khz", p_fixed_khz, "pi-duty switching frequency [kHz]");
  pit->add_option("--hold", p_hold, "cycles per setpoint during tuning")->check(CLI::PositiveNumber);
  pit->add_option("-o,--out", p_out, "config JSON with the tuned gains (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kArgError;
  }

  try {
    if (*sim) {
      AppConfig cfg = resolve(sim_c);
      ScenarioSettings& ss = cfg.scenario;
      if (!sim_controller.empty()) ss.controller = sim_controller;
      if (!sim_net.empty()) ss.network = sim_net;
      if (!sim_qnet.empty()) ss.qnet = sim_qnet;
      if (sim_r_err) ss.r_l_error = *sim_r_err;
      if (sim_l_err) ss.l_r_error = *sim_l_err;
      if (sim_correction) ss.correction = true;
      if (sim_gain) ss.correction_gain = *sim_gain;
      if (sim_corr_start) ss.correction_start_cycle = *sim_corr_start;
      if (sim_warm_khz) ss.warmup_input.f_sw = *sim_warm_khz * 1e3;
      if (!sim_setpoints.empty()) {
        const std::vector<double> ps = parse_list(sim_setpoints);
        const int per = sim_seg_cycles > 0 ? sim_seg_cycles : 5;
        ss.schedule.clear();
        for (std::size_t i = 0; i < ps.size(); ++i) ss.schedule.push_back({static_cast<int>(i) * per, ps[i]});
        ss.total_cycles = static_cast<int>(ps.size()) * per;
      }
      Scenario sc;
      sc.kind = parse_controller_kind(ss.controller);
      sc.schedule = ss.schedule;
      sc.total_cycles = ss.total_cycles;
      sc.warmup_cycles = ss.warmup_cycles;
      sc.warmup_input = ss.warmup_input;
      sc.nmpc = cfg.nmpc;
      sc.plant = cfg.nmpc.model;
      sc.plant.r_l *= 1.0 + ss.r_l_error;
      sc.plant.l_r *= 1.0 + ss.l_r_error;
      sc.correction = ss.correction;
      sc.correction_gain = ss.correction_gain;
      sc.correction_start_cycle = ss.correction_start_cycle;
      sc.pi = pi_for(cfg, sc.kind);
      attach_networks(sc, {sc.kind}, ss.network, ss.qnet);
      const RunResult r = run_closed_loop(sc);
      write_or_print(sim_trace, trace_to_csv(r.trace));
      json summary = to_json(r.metrics);
      summary["controller"] = to_string(sc.kind);
      if (!sim_summary.empty()) detail::write_text(sim_summary, summary.dump(2) + "\n");
      else std::cerr << summary.dump(2) << "\n";
      return kOk;
    }

    if (*sol) {
      const AppConfig cfg = resolve(sol_c);
      const NmpcSolution s = solve({sol_io, sol_vc}, sol_p, cfg.nmpc);
      json inputs = json::array(), powers = json::array();
      for (const auto& u : s.inputs) inputs.push_back({{"fsw_hz", u.f_sw}, {"duty", u.duty}});
      for (double p : s.powers) powers.push_back(p);
      const json out = {{"status", to_string(s.status)}, {"cost", s.cost}, {"max_violation_a", s.max_violation},
                        {"iterations", s.iterations}, {"inputs", inputs}, {"powers_w", powers}};
      std::cout << out.dump(2) << "\n";
      return s.status == SolverStatus::Converged ? kOk : kNumericError;
    }

    if (*gen) {
      const AppConfig cfg = resolve(gen_c);
      const Dataset ds = gen_mode == "random"
                             ? generate_dataset_random(gen_n, cfg.nmpc, gen_seed, {}, gen_c.threads)
                             : generate_dataset_trajectories(gen_n, gen_steps, cfg.nmpc, gen_seed, {}, gen_hold,
                                                             gen_c.threads);
      write_or_print(gen_out, dataset_to_csv(ds));
      std::cerr << "samples " << ds.samples.size() << ", discarded " << ds.discarded << "\n";
      if (ds.budget_exhausted) std::cerr << "warning: draw budget exhausted before reaching the requested count\n";
      return kOk;
    }

    if (*trn) {
      AppConfig cfg = resolve(tr_c);
      if (tr_epochs) cfg.train.epochs = *tr_epochs;
      if (tr_seed) cfg.train.seed = *tr_seed;
      const Dataset ds = load_dataset(tr_data);
      const TrainResult r = train(ds, cfg.train, InputBox{}, OutputBox::from(cfg.nmpc));
      save_network(tr_out, r.net);
      if (!tr_history.empty()) {
        std::string csv = "epoch,train_loss,val_loss,batch_loss\n";
        char buf[160];
        for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
          std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", e, r.train_loss[e],
                        e < r.val_loss.size() ? r.val_loss[e] : r.train_loss[e], r.batch_loss[e]);
          csv += buf;
        }
        detail::write_text(tr_history, csv);
      }
      std::cerr << "final train loss " << r.train_loss.back() << ", best epoch " << r.best_epoch << "\n";
      return kOk;
    }

    if (*qnt) {
      resolve(q_c);
      const PolicyNetwork net = load_network(q_net);
      const std::vector<PolicyInput> cal = sample_inputs(static_cast<std::size_t>(q_cal), net.input_box, q_seed);
      const QuantizedNetwork q = quantize(net, cal, q_word, q_acc);
      save_qnet(q_out, q);
      const std::vector<PolicyInput> test = sample_inputs(static_cast<std::size_t>(q_test), net.input_box, q_seed + 1);
      write_or_print(q_report, to_json(quantization_report(net, q, test)).dump(2) + "\n");
      return kOk;
    }

    if (*bench) {
      const AppConfig cfg = resolve(b_c);
      const std::vector<ControllerKind> kinds = parse_kinds(b_controllers);
      Scenario tmpl;
      attach_networks(tmpl, kinds, b_net, b_qnet);
      BenchmarkConfig bc;
      bc.n_runs = b_runs;
      bc.param_error = b_perr;
      bc.seed = b_seed;
      bc.threads = b_c.threads;
      BenchmarkResult res;
      // PI kinds need their own settings, so each kind runs as its own paired campaign.
      for (ControllerKind k : kinds) {
        tmpl.pi = pi_for(cfg, k);
        BenchmarkResult one = run_benchmark(bc, cfg.nmpc, {k}, tmpl);
        res.partial = res.partial || one.partial;
        res.controllers.push_back(std::move(one.controllers.front()));
      }
      write_or_print(b_out, to_json(res).dump(2) + "\n");
      for (const auto& c : res.controllers) {
        std::cerr << to_string(c.kind) << ": tracking error " << c.avg_tracking_error << " W/cycle, ZVS violations "
                  << c.zvs_violation_pct << " %\n";
      }
      if (res.partial) return kNumericError;
      bool fail = false;
      for (const auto& c : res.controllers) {
        if (b_max_zvs && c.zvs_violation_pct > *b_max_zvs) fail = true;
        if (b_max_ratio && c.avg_tracking_error > *b_max_ratio * res.controllers.front().avg_tracking_error) fail = true;
      }
      return fail ? kThresholdError : kOk;
    }

    if (*grid) {
      const AppConfig cfg = resolve(g_c);
      GridConfig gc;
      gc.kind = parse_controller_kind(g_controller);
      gc.correction_gain = g_gain;
      gc.threads = g_c.threads;
      Scenario tmpl;
      tmpl.pi = pi_for(cfg, gc.kind);
      attach_networks(tmpl, {gc.kind}, g_net, g_qnet);
      const std::vector<GridCell> cells = run_param_grid(gc, cfg.nmpc, tmpl);
      write_or_print(g_out, json{{"controller", g_controller}, {"cells", to_json(cells)}}.dump(2) + "\n");
      bool fail = false;
      for (const auto& c : cells) {
        if (g_max_err && c.steady_state_error > *g_max_err) fail = true;
        if (c.zvs_violation_pct > 0.0 && g_max_err) fail = true;
      }
      return fail ? kThresholdError : kOk;
    }

    if (*pit) {
      AppConfig cfg = resolve(p_c);
      const ControllerKind kind = parse_controller_kind(p_kind);
      PiSettings base = pi_for(cfg, kind);
      if (p_fixed_khz) base.f_fixed = *p_fixed_khz * 1e3;
      const PiTuneResult r = pi_tune(kind, cfg.nmpc, base, p_hold);
      if (!r.found) {
        std::cerr << "no candidate settled without overshoot\n";
        return kNumericError;
      }
      (kind == ControllerKind::PiDuty ? cfg.pi_duty : cfg.pi_freq) = r.settings;
      write_or_print(p_out, to_json(cfg).dump(2) + "\n");
      std::cerr << "kp " << r.settings.kp << ", ki " << r.settings.ki << ", settling " << r.settling_cycles
                << " cycles over " << r.candidates << " candidates\n";
      return kOk;
    }
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kArgError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kArgError;
  } catch (const std::exception& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  }
  return kOk;
}
