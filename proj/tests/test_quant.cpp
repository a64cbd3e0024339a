#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "rsmpc/quant.hpp"

using namespace rsmpc;

namespace {

const std::vector<int> kLayers{3, 10, 10, 10, 10, 10, 2};

PolicyNetwork random_net(std::uint64_t seed, Activation act = Activation::Tanh) {
  PolicyNetwork net = init_network(kLayers, act, {}, {}, seed);
  std::mt19937_64 rng(seed + 100);
  std::uniform_real_distribution<double> b(-0.3, 0.3);
  for (auto& v : net.biases) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = b(rng);
  }
  return net;
}

double max_roundtrip_ratio(const PolicyNetwork& net, const QuantizedNetwork& q) {
  double worst = 0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = net.weights[l];
    const double bound = std::ldexp(1.0, -q.weights[l].frac_bits - 1);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      worst = std::max(worst, std::abs(dequantize(q.weights[l].words[static_cast<std::size_t>(i)], q.weights[l].frac_bits) -
                                       w.data()[i]) / bound);
    }
    const double bb = std::ldexp(1.0, -q.biases[l].frac_bits - 1);
    for (Eigen::Index i = 0; i < net.biases[l].size(); ++i) {
      worst = std::max(worst, std::abs(dequantize(q.biases[l].words[static_cast<std::size_t>(i)], q.biases[l].frac_bits) -
                                       net.biases[l](i)) / bb);
    }
  }
  return worst;
}

}  // namespace

TEST(Quantize, RoundTripWithinHalfQuantum) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const PolicyNetwork net = random_net(seed);
    const auto cal = sample_inputs(2000, net.input_box, seed);
    const QuantizedNetwork q = quantize(net, cal);
    EXPECT_LE(max_roundtrip_ratio(net, q), 1.0);
    for (const QTensor& t : q.weights) {
      for (std::int32_t w : t.words) {
        EXPECT_LE(w, 32767);
        EXPECT_GE(w, -32768);
      }
    }
  }
}

TEST(Quantize, FormatRuleLeavesSignAndGuardBits) {
  PolicyNetwork net = zero_network({3, 2, 2});
  net.weights[0](0, 0) = 0.5;  // max-abs 0.5: ceil(log2) + 1 = 0 integer bits
  net.weights[1](0, 0) = 3.0;  // ceil(log2 3) + 1 = 3 integer bits
  const auto cal = sample_inputs(100, net.input_box, 1);
  const QuantizedNetwork q = quantize(net, cal);
  EXPECT_EQ(q.weights[0].frac_bits, 15);
  EXPECT_EQ(q.weights[1].frac_bits, 12);
  // 0.5 is representable, so the roundtrip is exact.
  EXPECT_EQ(dequantize(q.weights[0].words[0], q.weights[0].frac_bits), 0.5);
}

TEST(Quantize, ZeroNetworkGivesZeroWordsAndCenter) {
  const PolicyNetwork net = zero_network();
  const auto cal = sample_inputs(100, net.input_box, 2);
  const QuantizedNetwork q = quantize(net, cal);
  for (const auto* ts : {&q.weights, &q.biases}) {
    for (const QTensor& t : *ts) {
      for (std::int32_t w : t.words) EXPECT_EQ(w, 0);
    }
  }
  for (const PolicyInput& x : sample_inputs(50, net.input_box, 3)) {
    const ControlInput u = forward_q(q, x);
    EXPECT_EQ(u, forward(net, x));
    EXPECT_EQ(u.f_sw, 65e3);
    EXPECT_EQ(u.duty, 0.5);
  }
}

TEST(Quantize, HugeTensorReportsItsName) {
  PolicyNetwork net = zero_network({3, 4, 2});
  net.weights[1](1, 1) = 40000.0;
  const auto cal = sample_inputs(10, net.input_box, 4);
  try {
    quantize(net, cal);
    FAIL() << "expected QuantizationError";
  } catch (const QuantizationError& e) {
    EXPECT_NE(e.tensor().find('1'), std::string::npos) << e.tensor();
  }
}

TEST(Quantize, EmptyCalibrationRejected) {
  EXPECT_THROW(quantize(zero_network(), std::span<const PolicyInput>{}), std::invalid_argument);
}

TEST(ForwardQ, BitExactAcrossRunsAndThreads) {
  const PolicyNetwork net = random_net(5);
  const auto cal = sample_inputs(2000, net.input_box, 5);
  const QuantizedNetwork q = quantize(net, cal);
  const auto xs = sample_inputs(4000, net.input_box, 6);
  std::vector<std::vector<std::int64_t>> serial(xs.size()), threaded(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) serial[k] = forward_q_words(q, xs[k]);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < 4; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t k = t; k < xs.size(); k += 4) threaded[k] = forward_q_words(q, xs[k]);
    });
  }
  for (auto& th : pool) th.join();
  EXPECT_EQ(serial, threaded);
}

TEST(ForwardQ, WorstCaseDeviationBelowFivePercent) {
  for (Activation act : {Activation::Tanh, Activation::Sigmoid, Activation::Relu}) {
    const PolicyNetwork net = random_net(7, act);
    const auto cal = sample_inputs(10000, net.input_box, 8);
    const QuantizedNetwork q = quantize(net, cal);
    const QuantReport r = quantization_report(net, q, sample_inputs(10000, net.input_box, 9));
    EXPECT_LT(r.max_deviation(), 0.05) << to_string(act);
  }
}

TEST(ForwardQ, PrecisionMonotoneInWordLength) {
  const PolicyNetwork net = random_net(10);
  const auto cal = sample_inputs(5000, net.input_box, 11);
  const auto test = sample_inputs(10000, net.input_box, 12);
  double prev = INFINITY;
  for (int bits : {16, 18, 20}) {
    const QuantizedNetwork q = quantize(net, cal, bits, 2 * bits);
    const double dev = quantization_report(net, q, test).max_deviation();
    EXPECT_LE(dev, prev) << bits << " bits";
    prev = dev;
  }
}

TEST(ForwardQ, CalibrationSetIsSaturationFree) {
  for (std::uint64_t seed : {13, 14, 15}) {
    const PolicyNetwork net = random_net(seed);
    const auto cal = sample_inputs(5000, net.input_box, seed);
    const QuantizedNetwork q = quantize(net, cal);
    QuantStats st;
    for (const PolicyInput& x : cal) forward_q(q, x, &st);
    EXPECT_EQ(st.total(), 0);
  }
}

TEST(ForwardQ, WideRunningSumsStayInsideAccumulator) {
  // Identical saturated hidden units summed with weight 1.9: running sums
  // reach 19, beyond the +-8 a product-aligned 32-bit accumulator holds.
  PolicyNetwork net = zero_network({3, 10, 10, 2});
  net.weights[0].setConstant(3.0);
  net.weights[1].setConstant(1.9);
  net.weights[2].setConstant(0.05);
  const auto cal = sample_inputs(2000, net.input_box, 19);
  const QuantizedNetwork q = quantize(net, cal);
  EXPECT_LT(q.acc_frac_bits[1], q.weights[1].frac_bits + q.input_frac(1));
  QuantStats st;
  for (const PolicyInput& x : cal) forward_q(q, x, &st);
  EXPECT_EQ(st.total(), 0);
  EXPECT_LT(quantization_report(net, q, sample_inputs(2000, net.input_box, 20)).max_deviation(), 0.05);
}

TEST(Report, CountsAndHighPrecisionRegime) {
  PolicyNetwork net = random_net(16);
  for (auto& w : net.weights) w *= 0.01;
  for (auto& b : net.biases) b *= 0.01;
  const auto cal = sample_inputs(1000, net.input_box, 17);
  const QuantizedNetwork q = quantize(net, cal);
  for (const QTensor& t : q.weights) EXPECT_GE(t.frac_bits, 15);
  const auto test = sample_inputs(777, net.input_box, 18);
  const QuantReport r = quantization_report(net, q, test);
  EXPECT_EQ(r.n, test.size());
  EXPECT_LT(r.max_deviation(), 1e-3);
  EXPECT_EQ(r.range_utilization.size(), net.weights.size());
  EXPECT_THROW(quantization_report(net, q, {}), std::invalid_argument);
}

TEST(ForwardQ, TableMatchesActivationClosely) {
  const ActivationTable t = detail::build_table(Activation::Tanh, 16);
  ASSERT_EQ(t.values.size(), 1024u);
  const int f = 12;
  for (double z = -5.0; z <= 5.0; z += 0.01) {
    const auto word = static_cast<std::int64_t>(std::llround(std::ldexp(z, f)));
    const double y = dequantize(detail::table_lookup(t, word, f), t.frac_bits);
    EXPECT_NEAR(y, std::tanh(std::clamp(z, -4.0, 4.0)), 2e-4) << z;
  }
}
