// File formats: JSON config, network and quantized-network files, dataset
// and trace CSV, summary JSON.
#pragma once

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rsmpc/harness.hpp"
#include "rsmpc/nmpc.hpp"
#include "rsmpc/policy.hpp"
#include "rsmpc/quant.hpp"

namespace rsmpc {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

/// Malformed or inconsistent input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw FormatError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw FormatError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_version(const json& j, const std::string& what) {
  if (!j.contains("format_version") || j.at("format_version").get<int>() != kFormatVersion) {
    throw FormatError(what + ": unsupported or missing format_version");
  }
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
  if (!out) throw FormatError("write failed: " + path);
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": " + e.what());
  }
}

}  // namespace detail

// Configuration ---------------------------------------------------------------

struct ScenarioSettings {
  std::string controller = "exact-nmpc";
  std::vector<SetpointStep> schedule{{0, 500.0}, {5, 3000.0}, {10, 1000.0}};
  int total_cycles = 15;
  int warmup_cycles = 5;
  ControlInput warmup_input{100e3, 0.5};
  double r_l_error = 0.0;  // relative error of the true plant vs the model
  double l_r_error = 0.0;
  bool correction = false;
  double correction_gain = 0.8;
  int correction_start_cycle = 0;
  std::string network;  // path, dnn kinds
  std::string qnet;     // path, dnn-quant
};

struct AppConfig {
  NmpcConfig nmpc;  // nmpc.model is the converter section
  TrainConfig train;
  ScenarioSettings scenario;
  PiSettings pi_freq;
  PiSettings pi_duty;
};

inline json to_json(const ConverterParams& p) {
  return {{"v_s", p.v_s}, {"l_r", p.l_r}, {"r_l", p.r_l}, {"c_r", p.c_r}};
}

inline ConverterParams converter_from_json(const json& j) {
  detail::require_keys(j, "converter", {"v_s", "l_r", "r_l", "c_r"});
  ConverterParams p;
  detail::read_opt(j, "v_s", p.v_s);
  detail::read_opt(j, "l_r", p.l_r);
  detail::read_opt(j, "r_l", p.r_l);
  detail::read_opt(j, "c_r", p.c_r);
  p.validate();
  return p;
}

inline json to_json(const PiSettings& s) {
  return {{"kp", s.kp}, {"ki", s.ki}, {"duty_fixed", s.duty_fixed}, {"f_fixed_hz", s.f_fixed}, {"p_full_w", s.p_full}};
}

inline PiSettings pi_from_json(const json& j, const std::string& where) {
  detail::require_keys(j, where, {"kp", "ki", "duty_fixed", "f_fixed_hz", "p_full_w"});
  PiSettings s;
  detail::read_opt(j, "kp", s.kp);
  detail::read_opt(j, "ki", s.ki);
  detail::read_opt(j, "duty_fixed", s.duty_fixed);
  detail::read_opt(j, "f_fixed_hz", s.f_fixed);
  detail::read_opt(j, "p_full_w", s.p_full);
  if (!(s.kp >= 0.0 && s.ki >= 0.0)) throw FormatError(where + ": gains must be >= 0");
  return s;
}

inline json to_json(const AppConfig& c) {
  const NmpcConfig& n = c.nmpc;
  const TrainConfig& t = c.train;
  const ScenarioSettings& s = c.scenario;
  json schedule = json::array();
  for (const auto& st : s.schedule) schedule.push_back({{"cycle", st.start_cycle}, {"p_des_w", st.p_des}});
  return {
      {"converter", to_json(n.model)},
      {"nmpc",
       {{"n", n.horizon_n},
        {"alpha", n.alpha},
        {"f_min_hz", n.f_min},
        {"f_max_hz", n.f_max},
        {"d_min", n.d_min},
        {"d_max", n.d_max},
        {"zvs_margin_a", n.zvs_margin},
        {"tolerances",
         {{"gradient", n.tol_grad},
          {"constraint_a", n.tol_constraint},
          {"max_iterations", n.max_iterations},
          {"max_outer", n.max_outer}}}}},
      {"train",
       {{"layers", t.layers},
        {"activation", to_string(t.activation)},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"epsilon", t.epsilon},
        {"validation_fraction", t.validation_fraction},
        {"seed", t.seed}}},
      {"scenario",
       {{"controller", s.controller},
        {"schedule", schedule},
        {"total_cycles", s.total_cycles},
        {"warmup_cycles", s.warmup_cycles},
        {"warmup_f_hz", s.warmup_input.f_sw},
        {"warmup_duty", s.warmup_input.duty},
        {"r_l_error", s.r_l_error},
        {"l_r_error", s.l_r_error},
        {"correction", s.correction},
        {"correction_gain", s.correction_gain},
        {"correction_start_cycle", s.correction_start_cycle},
        {"network", s.network},
        {"qnet", s.qnet}}},
      {"pi", {{"freq", to_json(c.pi_freq)}, {"duty", to_json(c.pi_duty)}}},
  };
}

/// Missing sections and keys keep their defaults; unknown keys are errors.
inline AppConfig config_from_json(const json& j) {
  detail::require_keys(j, "config", {"converter", "nmpc", "train", "scenario", "pi"});
  AppConfig c;
  try {
    if (j.contains("converter")) c.nmpc.model = converter_from_json(j.at("converter"));
    if (j.contains("nmpc")) {
      const json& n = j.at("nmpc");
      detail::require_keys(n, "nmpc", {"n", "alpha", "f_min_hz", "f_max_hz", "d_min", "d_max", "zvs_margin_a", "tolerances"});
      detail::read_opt(n, "n", c.nmpc.horizon_n);
      detail::read_opt(n, "alpha", c.nmpc.alpha);
      detail::read_opt(n, "f_min_hz", c.nmpc.f_min);
      detail::read_opt(n, "f_max_hz", c.nmpc.f_max);
      detail::read_opt(n, "d_min", c.nmpc.d_min);
      detail::read_opt(n, "d_max", c.nmpc.d_max);
      detail::read_opt(n, "zvs_margin_a", c.nmpc.zvs_margin);
      if (n.contains("tolerances")) {
        const json& t = n.at("tolerances");
        detail::require_keys(t, "nmpc.tolerances", {"gradient", "constraint_a", "max_iterations", "max_outer"});
        detail::read_opt(t, "gradient", c.nmpc.tol_grad);
        detail::read_opt(t, "constraint_a", c.nmpc.tol_constraint);
        detail::read_opt(t, "max_iterations", c.nmpc.max_iterations);
        detail::read_opt(t, "max_outer", c.nmpc.max_outer);
      }
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      detail::require_keys(t, "train", {"layers", "activation", "epochs", "batch_size", "learning_rate", "beta1", "beta2",
                                        "epsilon", "validation_fraction", "seed"});
      detail::read_opt(t, "layers", c.train.layers);
      if (t.contains("activation")) c.train.activation = parse_activation(t.at("activation").get<std::string>());
      detail::read_opt(t, "epochs", c.train.epochs);
      detail::read_opt(t, "batch_size", c.train.batch_size);
      detail::read_opt(t, "learning_rate", c.train.learning_rate);
      detail::read_opt(t, "beta1", c.train.beta1);
      detail::read_opt(t, "beta2", c.train.beta2);
      detail::read_opt(t, "epsilon", c.train.epsilon);
      detail::read_opt(t, "validation_fraction", c.train.validation_fraction);
      detail::read_opt(t, "seed", c.train.seed);
    }
    if (j.contains("scenario")) {
      const json& s = j.at("scenario");
      detail::require_keys(s, "scenario", {"controller", "schedule", "total_cycles", "warmup_cycles", "warmup_f_hz",
                                           "warmup_duty", "r_l_error", "l_r_error", "correction", "correction_gain",
                                           "correction_start_cycle", "network", "qnet"});
      ScenarioSettings& o = c.scenario;
      detail::read_opt(s, "controller", o.controller);
      if (s.contains("schedule")) {
        o.schedule.clear();
        for (const json& st : s.at("schedule")) {
          detail::require_keys(st, "scenario.schedule[]", {"cycle", "p_des_w"});
          o.schedule.push_back({st.at("cycle").get<int>(), st.at("p_des_w").get<double>()});
        }
      }
      detail::read_opt(s, "total_cycles", o.total_cycles);
      detail::read_opt(s, "warmup_cycles", o.warmup_cycles);
      detail::read_opt(s, "warmup_f_hz", o.warmup_input.f_sw);
      detail::read_opt(s, "warmup_duty", o.warmup_input.duty);
      detail::read_opt(s, "r_l_error", o.r_l_error);
      detail::read_opt(s, "l_r_error", o.l_r_error);
      detail::read_opt(s, "correction", o.correction);
      detail::read_opt(s, "correction_gain", o.correction_gain);
      detail::read_opt(s, "correction_start_cycle", o.correction_start_cycle);
      detail::read_opt(s, "network", o.network);
      detail::read_opt(s, "qnet", o.qnet);
      parse_controller_kind(o.controller);
    }
    if (j.contains("pi")) {
      const json& p = j.at("pi");
      detail::require_keys(p, "pi", {"freq", "duty"});
      if (p.contains("freq")) c.pi_freq = pi_from_json(p.at("freq"), "pi.freq");
      if (p.contains("duty")) c.pi_duty = pi_from_json(p.at("duty"), "pi.duty");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  c.nmpc.validate();
  c.train.validate();
  return c;
}

inline AppConfig load_config(const std::string& path) {
  return config_from_json(detail::parse_json(detail::read_text(path), path));
}

// Networks ------------------------------------------------------------------

inline json to_json(const InputBox& b) {
  return {{"i_min_a", b.i_min}, {"i_max_a", b.i_max}, {"v_min_v", b.v_min},
          {"v_max_v", b.v_max}, {"p_min_w", b.p_min}, {"p_max_w", b.p_max}};
}

inline json to_json(const OutputBox& b) {
  return {{"f_min_hz", b.f_min}, {"f_max_hz", b.f_max}, {"d_min", b.d_min}, {"d_max", b.d_max}};
}

inline InputBox input_box_from_json(const json& j) {
  InputBox b;
  b.i_min = j.at("i_min_a").get<double>();
  b.i_max = j.at("i_max_a").get<double>();
  b.v_min = j.at("v_min_v").get<double>();
  b.v_max = j.at("v_max_v").get<double>();
  b.p_min = j.at("p_min_w").get<double>();
  b.p_max = j.at("p_max_w").get<double>();
  b.validate();
  return b;
}

inline OutputBox output_box_from_json(const json& j) {
  OutputBox b{j.at("f_min_hz").get<double>(), j.at("f_max_hz").get<double>(), j.at("d_min").get<double>(),
              j.at("d_max").get<double>()};
  b.validate();
  return b;
}

inline json to_json(const PolicyNetwork& net) {
  json w = json::array(), b = json::array();
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    std::vector<double> flat;
    for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c) flat.push_back(net.weights[l](r, c));
    }
    w.push_back(flat);
    b.push_back(std::vector<double>(net.biases[l].data(), net.biases[l].data() + net.biases[l].size()));
  }
  return {{"format_version", kFormatVersion}, {"layers", net.layers}, {"activation", to_string(net.activation)},
          {"weights", w}, {"biases", b}, {"input_box", to_json(net.input_box)},
          {"output_box", to_json(net.output_box)}};
}

inline PolicyNetwork network_from_json(const json& j) {
  detail::check_version(j, "network");
  detail::require_keys(j, "network",
                       {"format_version", "layers", "activation", "weights", "biases", "input_box", "output_box"});
  try {
    PolicyNetwork net = zero_network(j.at("layers").get<std::vector<int>>(),
                                     parse_activation(j.at("activation").get<std::string>()),
                                     input_box_from_json(j.at("input_box")), output_box_from_json(j.at("output_box")));
    const json& w = j.at("weights");
    const json& b = j.at("biases");
    if (w.size() != net.weights.size() || b.size() != net.biases.size()) {
      throw FormatError("network: tensor count does not match layers");
    }
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      const auto flat = w[l].get<std::vector<double>>();
      const auto bias = b[l].get<std::vector<double>>();
      if (flat.size() != static_cast<std::size_t>(net.weights[l].size()) ||
          bias.size() != static_cast<std::size_t>(net.biases[l].size())) {
        throw FormatError("network: layer " + std::to_string(l) + " has the wrong number of values");
      }
      for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r) {
        for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c) {
          net.weights[l](r, c) = flat[static_cast<std::size_t>(r * net.weights[l].cols() + c)];
        }
      }
      for (std::size_t k = 0; k < bias.size(); ++k) net.biases[l](static_cast<Eigen::Index>(k)) = bias[k];
    }
    return net;
  } catch (const json::exception& e) {
    throw FormatError(std::string("network: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("network: ") + e.what());
  }
}

inline void save_network(const std::string& path, const PolicyNetwork& net) {
  detail::write_text(path, to_json(net).dump(1) + "\n");
}

inline PolicyNetwork load_network(const std::string& path) {
  return network_from_json(detail::parse_json(detail::read_text(path), path));
}

inline json to_json(const QTensor& t) {
  return {{"rows", t.rows}, {"cols", t.cols}, {"frac_bits", t.frac_bits}, {"words", t.words}};
}

inline QTensor qtensor_from_json(const json& j) {
  QTensor t;
  t.rows = j.at("rows").get<int>();
  t.cols = j.at("cols").get<int>();
  t.frac_bits = j.at("frac_bits").get<int>();
  t.words = j.at("words").get<std::vector<std::int32_t>>();
  return t;
}

inline json to_json(const QuantizedNetwork& q) {
  json w = json::array(), b = json::array();
  for (const auto& t : q.weights) w.push_back(to_json(t));
  for (const auto& t : q.biases) b.push_back(to_json(t));
  return {{"format_version", kFormatVersion},
          {"layers", q.layers},
          {"activation", to_string(q.activation)},
          {"word_bits", q.word_bits},
          {"accumulator_bits", q.accumulator_bits},
          {"input_frac_bits", q.input_frac_bits},
          {"weights", w},
          {"biases", b},
          {"preact_frac_bits", q.preact_frac_bits},
          {"accumulator_frac_bits", q.acc_frac_bits},
          {"activation_table",
           {{"entries", q.table.entries},
            {"range_log2", q.table.range_log2},
            {"frac_bits", q.table.frac_bits},
            {"values", q.table.values}}},
          {"input_box", to_json(q.input_box)},
          {"output_box", to_json(q.output_box)}};
}

inline QuantizedNetwork qnet_from_json(const json& j) {
  detail::check_version(j, "qnet");
  detail::require_keys(j, "qnet",
                       {"format_version", "layers", "activation", "word_bits", "accumulator_bits", "input_frac_bits",
                        "weights", "biases", "preact_frac_bits", "accumulator_frac_bits", "activation_table", "input_box",
                        "output_box"});
  try {
    QuantizedNetwork q;
    q.layers = j.at("layers").get<std::vector<int>>();
    q.activation = parse_activation(j.at("activation").get<std::string>());
    q.word_bits = j.at("word_bits").get<int>();
    q.accumulator_bits = j.at("accumulator_bits").get<int>();
    q.input_frac_bits = j.at("input_frac_bits").get<int>();
    for (const json& t : j.at("weights")) q.weights.push_back(qtensor_from_json(t));
    for (const json& t : j.at("biases")) q.biases.push_back(qtensor_from_json(t));
    q.preact_frac_bits = j.at("preact_frac_bits").get<std::vector<int>>();
    q.acc_frac_bits = j.at("accumulator_frac_bits").get<std::vector<int>>();
    const json& tab = j.at("activation_table");
    q.table.entries = tab.at("entries").get<int>();
    q.table.range_log2 = tab.at("range_log2").get<int>();
    q.table.frac_bits = tab.at("frac_bits").get<int>();
    q.table.values = tab.at("values").get<std::vector<std::int32_t>>();
    q.input_box = input_box_from_json(j.at("input_box"));
    q.output_box = output_box_from_json(j.at("output_box"));
    q.validate();
    return q;
  } catch (const json::exception& e) {
    throw FormatError(std::string("qnet: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("qnet: ") + e.what());
  }
}

inline void save_qnet(const std::string& path, const QuantizedNetwork& q) {
  detail::write_text(path, to_json(q).dump() + "\n");
}

inline QuantizedNetwork load_qnet(const std::string& path) {
  return qnet_from_json(detail::parse_json(detail::read_text(path), path));
}

inline json to_json(const QuantReport& r) {
  return {{"samples", r.n},
          {"max_deviation", {{"fsw", r.max_dev_f}, {"duty", r.max_dev_d}}},
          {"mean_deviation", {{"fsw", r.mean_dev_f}, {"duty", r.mean_dev_d}}},
          {"saturations",
           {{"input", r.stats.input_saturations},
            {"accumulator", r.stats.accumulator_saturations},
            {"requantize", r.stats.requantize_saturations},
            {"total", r.stats.total()}}},
          {"range_utilization", r.range_utilization}};
}

// Dataset CSV ---------------------------------------------------------------

inline constexpr const char* kDatasetHeader = "io_amps,vc_volts,pdes_watts,fsw_hz,duty,provenance";

inline std::string dataset_to_csv(const Dataset& ds) {
  std::string out = std::string(kDatasetHeader) + "\n";
  char buf[256];
  for (const Sample& s : ds.samples) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%s\n", s.i_o, s.v_c, s.p_des, s.f_sw, s.duty,
                  to_string(s.provenance));
    out += buf;
  }
  return out;
}

inline Dataset dataset_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kDatasetHeader) throw FormatError("dataset: unexpected header '" + line + "'");
  Dataset ds;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError("dataset: row " + std::to_string(row) + " does not have 6 fields");
    Sample s;
    try {
      s.i_o = std::stod(cells[0]);
      s.v_c = std::stod(cells[1]);
      s.p_des = std::stod(cells[2]);
      s.f_sw = std::stod(cells[3]);
      s.duty = std::stod(cells[4]);
      s.provenance = parse_provenance(cells[5]);
    } catch (const std::exception& e) {
      throw FormatError("dataset: row " + std::to_string(row) + ": " + e.what());
    }
    ds.samples.push_back(s);
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) { detail::write_text(path, dataset_to_csv(ds)); }

inline Dataset load_dataset(const std::string& path) { return dataset_from_csv(detail::read_text(path)); }

// Trace CSV and summaries ---------------------------------------------------

inline constexpr const char* kTraceHeader =
    "cycle,t_start_s,fsw_hz,duty,io_start_a,vc_start_v,p_avg_w,p_des_w,p_des_corrected_w,zvs_on_ok,zvs_off_ok,"
    "solver_status";

inline std::string trace_to_csv(const std::vector<CycleRecord>& trace) {
  std::string out = std::string(kTraceHeader) + "\n";
  char buf[512];
  for (const CycleRecord& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%s\n", r.cycle, r.t_start,
                  r.u.f_sw, r.u.duty, r.x_start.i_o, r.x_start.v_c, r.p_avg, r.p_des, r.p_des_corrected,
                  r.zvs_on_ok ? 1 : 0, r.zvs_off_ok ? 1 : 0, r.solver_status.c_str());
    out += buf;
  }
  return out;
}

inline json to_json(const RunMetrics& m) {
  json ss = json::array();
  for (const auto& e : m.steady_state_error) ss.push_back(e ? json(*e) : json(nullptr));
  return {{"avg_tracking_error_w", m.avg_tracking_error},
          {"zvs_violation_pct", m.zvs_violation_pct},
          {"steady_state_error_w", ss},
          {"cycles", m.cycles},
          {"violations", m.violations}};
}

inline json to_json(const BenchmarkResult& r) {
  json cs = json::array();
  for (const auto& c : r.controllers) {
    json runs = json::array();
    for (const auto& m : c.per_run) runs.push_back(to_json(m));
    cs.push_back({{"controller", to_string(c.kind)},
                  {"avg_tracking_error_w", c.avg_tracking_error},
                  {"zvs_violation_pct", c.zvs_violation_pct},
                  {"runs", c.runs},
                  {"failed_runs", c.failed_runs},
                  {"per_run", runs}});
  }
  return {{"controllers", cs}, {"partial", r.partial}};
}

inline json to_json(const std::vector<GridCell>& cells) {
  json out = json::array();
  for (const auto& c : cells) {
    out.push_back({{"r_error", c.r_error},
                   {"l_error", c.l_error},
                   {"p_des_w", c.p_des},
                   {"steady_state_error_w", c.steady_state_error},
                   {"steady_state_error_uncorrected_w", c.steady_state_error_uncorrected},
                   {"zvs_violation_pct", c.zvs_violation_pct}});
  }
  return out;
}

}  // namespace rsmpc
