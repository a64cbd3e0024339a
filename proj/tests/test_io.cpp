#include <gtest/gtest.h>

#include <filesystem>

#include "rsmpc/io.hpp"

using namespace rsmpc;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rsmpc_io_" + name)).string();
}

}  // namespace

TEST(Config, RoundTripThroughJson) {
  AppConfig c;
  c.nmpc.model.r_l = 3.1;
  c.nmpc.f_min = 31e3;
  c.nmpc.zvs_margin = 2.5;
  c.train.epochs = 17;
  c.train.activation = Activation::Sigmoid;
  c.scenario.controller = "dnn-quant";
  c.scenario.schedule = {{0, 700.0}, {8, 2100.0}};
  c.scenario.correction = true;
  c.pi_duty.ki = 2e-4;
  c.pi_duty.f_fixed = 37e3;
  const AppConfig d = config_from_json(to_json(c));
  EXPECT_EQ(to_json(c).dump(), to_json(d).dump());
  EXPECT_EQ(d.nmpc.model.r_l, 3.1);
  EXPECT_EQ(d.scenario.schedule[1].start_cycle, 8);
}

TEST(Config, PartialSectionsKeepDefaults) {
  const AppConfig c = config_from_json(json::parse(R"({"nmpc": {"f_max_hz": 90000}})"));
  EXPECT_EQ(c.nmpc.f_max, 90e3);
  EXPECT_EQ(c.nmpc.f_min, 30e3);
  EXPECT_EQ(c.nmpc.model.l_r, 19e-6);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(config_from_json(json::parse(R"({"nmpc": {"fmax": 1}})")), FormatError);
  EXPECT_THROW(config_from_json(json::parse(R"({"extra": {}})")), FormatError);
  EXPECT_THROW(config_from_json(json::parse(R"({"nmpc": {"n": "ten"}})")), FormatError);
  EXPECT_THROW(config_from_json(json::parse(R"({"nmpc": {"n": 7}})")), std::invalid_argument);
  EXPECT_THROW(config_from_json(json::parse(R"({"scenario": {"controller": "lqr"}})")), std::invalid_argument);
  EXPECT_THROW(load_config(temp_path("does_not_exist.json")), FormatError);
}

TEST(Network, RoundTripIsExact) {
  const PolicyNetwork net = init_network({3, 10, 10, 2}, Activation::Tanh, {}, {}, 5);
  const std::string path = temp_path("net.json");
  save_network(path, net);
  const PolicyNetwork back = load_network(path);
  EXPECT_EQ(back.layers, net.layers);
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    EXPECT_EQ(back.weights[l], net.weights[l]);
    EXPECT_EQ(back.biases[l], net.biases[l]);
  }
  const PolicyInput x{3.0, -40.0, 1234.0};
  EXPECT_EQ(forward(back, x), forward(net, x));
  const json j = to_json(net);
  for (const char* key : {"layers", "activation", "weights", "biases", "input_box", "output_box", "format_version"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  std::filesystem::remove(path);
}

TEST(Network, MalformedFilesRejected) {
  json j = to_json(zero_network({3, 4, 2}));
  j["format_version"] = 99;
  EXPECT_THROW(network_from_json(j), FormatError);
  j = to_json(zero_network({3, 4, 2}));
  j["weights"][0].erase(0);
  EXPECT_THROW(network_from_json(j), std::exception);
  j = to_json(zero_network({3, 4, 2}));
  j["surprise"] = 1;
  EXPECT_THROW(network_from_json(j), FormatError);
}

TEST(Qnet, RoundTripIsBitExact) {
  const PolicyNetwork net = init_network({3, 10, 10, 2}, Activation::Tanh, {}, {}, 6);
  const QuantizedNetwork q = quantize(net, sample_inputs(500, net.input_box, 7));
  const std::string path = temp_path("qnet.json");
  save_qnet(path, q);
  const QuantizedNetwork back = load_qnet(path);
  for (const PolicyInput& x : sample_inputs(200, net.input_box, 8)) EXPECT_EQ(forward_q_words(back, x), forward_q_words(q, x));
  std::filesystem::remove(path);
  json j = to_json(q);
  j["weights"][0]["words"][0] = 40000;
  EXPECT_THROW(qnet_from_json(j), FormatError);
  j = to_json(q);
  j["scale"] = 2;
  EXPECT_THROW(qnet_from_json(j), FormatError);
}

TEST(Dataset, CsvRoundTrip) {
  Dataset ds;
  ds.samples = {{1.5, -20.25, 1000.0, 45678.9, 0.321, Provenance::Trajectory},
                {-0.1, 3.0, 0.0, 30000.0, 0.2, Provenance::RandomState}};
  const std::string text = dataset_to_csv(ds);
  EXPECT_EQ(text.substr(0, text.find('\n')), "io_amps,vc_volts,pdes_watts,fsw_hz,duty,provenance");
  const Dataset back = dataset_from_csv(text);
  ASSERT_EQ(back.samples.size(), 2u);
  EXPECT_EQ(back.samples[0].f_sw, 45678.9);
  EXPECT_EQ(back.samples[1].provenance, Provenance::RandomState);
  EXPECT_THROW(dataset_from_csv("a,b\n"), FormatError);
  EXPECT_THROW(dataset_from_csv(std::string(kDatasetHeader) + "\n1,2,3\n"), FormatError);
  EXPECT_THROW(dataset_from_csv(std::string(kDatasetHeader) + "\n1,2,3,4,5,other\n"), FormatError);
}

TEST(Trace, HeaderAndFields) {
  CycleRecord r;
  r.cycle = 3;
  r.u = {40e3, 0.5};
  r.p_avg = 999.5;
  r.p_des = 1000.0;
  r.p_des_corrected = 1000.4;
  r.zvs_off_ok = false;
  r.solver_status = "converged";
  const std::string csv = trace_to_csv({r});
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "cycle,t_start_s,fsw_hz,duty,io_start_a,vc_start_v,p_avg_w,p_des_w,p_des_corrected_w,zvs_on_ok,"
            "zvs_off_ok,solver_status");
  const std::string row = csv.substr(csv.find('\n') + 1);
  EXPECT_EQ(row.substr(0, 2), "3,");
  EXPECT_NE(row.find(",1,0,converged"), std::string::npos);
}

TEST(Summary, MetricsJsonHasAllFields) {
  RunMetrics m;
  m.avg_tracking_error = 1.5;
  m.steady_state_error = {std::nullopt, 0.25};
  const json j = to_json(m);
  EXPECT_EQ(j.at("avg_tracking_error_w").get<double>(), 1.5);
  EXPECT_TRUE(j.at("steady_state_error_w")[0].is_null());
  EXPECT_EQ(j.at("steady_state_error_w")[1].get<double>(), 0.25);
  EXPECT_TRUE(j.contains("zvs_violation_pct"));
}
