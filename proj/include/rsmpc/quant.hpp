// Fixed-point emulation of the policy network: per-tensor Q-formats chosen
// from calibration data, integer forward pass with a table-driven activation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsmpc/policy.hpp"

namespace rsmpc {

class QuantizationError : public std::runtime_error {
 public:
  QuantizationError(const std::string& what, std::string tensor)
      : std::runtime_error(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

/// Signed fixed-point tensor: value = word * 2^-frac_bits.
struct QTensor {
  int rows = 0;
  int cols = 1;
  int frac_bits = 0;
  std::vector<std::int32_t> words;  // row-major

  std::int32_t at(int r, int c) const { return words[static_cast<std::size_t>(r * cols + c)]; }
};

/// Interpolated activation table over [-range, range], values in Q(frac_bits).
struct ActivationTable {
  int entries = 1024;
  int range_log2 = 2;  // range = 2^range_log2
  int frac_bits = 15;
  std::vector<std::int32_t> values;
};

struct QuantizedNetwork {
  std::vector<int> layers;
  Activation activation = Activation::Tanh;
  int word_bits = 16;
  int accumulator_bits = 32;
  int input_frac_bits = 15;
  std::vector<QTensor> weights;
  std::vector<QTensor> biases;
  std::vector<int> preact_frac_bits;  // per layer, format of W a + b
  std::vector<int> acc_frac_bits;     // per layer, format of the running sum
  ActivationTable table;
  InputBox input_box;
  OutputBox output_box;

  std::int64_t word_max() const { return (std::int64_t{1} << (word_bits - 1)) - 1; }
  std::int64_t word_min() const { return -(std::int64_t{1} << (word_bits - 1)); }

  /// Fractional bits of the input to layer l.
  int input_frac(std::size_t l) const {
    if (l == 0) return input_frac_bits;
    if (activation == Activation::Relu) return preact_frac_bits[l - 1];
    return table.frac_bits;
  }

  void validate() const {
    if (word_bits < 8 || word_bits > 24) throw std::invalid_argument("QuantizedNetwork: word_bits must be in [8, 24]");
    if (accumulator_bits < 2 * word_bits || accumulator_bits > 62) {
      throw std::invalid_argument("QuantizedNetwork: accumulator_bits must be in [2 word_bits, 62]");
    }
    if (layers.size() < 2 || weights.size() != layers.size() - 1 || biases.size() != weights.size() ||
        preact_frac_bits.size() != weights.size() || acc_frac_bits.size() != weights.size()) {
      throw std::invalid_argument("QuantizedNetwork: tensor count does not match layers");
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const QTensor& w = weights[l];
      const QTensor& b = biases[l];
      if (acc_frac_bits[l] > w.frac_bits + input_frac(l)) {
        throw std::invalid_argument("QuantizedNetwork: accumulator format finer than the products in layer " +
                                    std::to_string(l));
      }
      if (w.rows != layers[l + 1] || w.cols != layers[l] || b.rows != layers[l + 1] || b.cols != 1 ||
          w.words.size() != static_cast<std::size_t>(w.rows * w.cols) ||
          b.words.size() != static_cast<std::size_t>(b.rows)) {
        throw std::invalid_argument("QuantizedNetwork: layer " + std::to_string(l) + " has inconsistent dimensions");
      }
      for (const auto* t : {&w, &b}) {
        for (std::int32_t v : t->words) {
          if (v > word_max() || v < word_min()) {
            throw std::invalid_argument("QuantizedNetwork: word outside signed range in layer " + std::to_string(l));
          }
        }
      }
    }
    if (activation != Activation::Relu &&
        (table.entries < 2 || table.values.size() != static_cast<std::size_t>(table.entries))) {
      throw std::invalid_argument("QuantizedNetwork: activation table size mismatch");
    }
    input_box.validate();
    output_box.validate();
  }
};

/// Saturation events observed during integer evaluation.
struct QuantStats {
  long input_saturations = 0;
  long accumulator_saturations = 0;
  long requantize_saturations = 0;
  std::vector<std::int64_t> max_abs_preact;  // per layer, in words

  long total() const { return input_saturations + accumulator_saturations + requantize_saturations; }
};

namespace detail {

/// Arithmetic right shift by s with round-half-to-even; left shift for s < 0.
inline std::int64_t shift_round_even(std::int64_t v, int s) {
  if (s <= 0) return v * (std::int64_t{1} << -s);
  const std::int64_t q = v >> s;  // floor
  const std::int64_t rem = v - q * (std::int64_t{1} << s);
  const std::int64_t half = std::int64_t{1} << (s - 1);
  if (rem > half || (rem == half && (q & 1) != 0)) return q + 1;
  return q;
}

inline std::int64_t saturate(std::int64_t v, std::int64_t lo, std::int64_t hi, long* count) {
  if (v > hi) {
    if (count != nullptr) ++*count;
    return hi;
  }
  if (v < lo) {
    if (count != nullptr) ++*count;
    return lo;
  }
  return v;
}

/// Fractional bits for a tensor with the given max-abs: integer bits are
/// ceil(log2(max_abs)) plus a sign bit, fractional bits fill the remaining
/// word_bits - 1. The spare bit is a guard bit.
inline int frac_bits_for(double max_abs, int word_bits, const std::string& tensor) {
  if (!std::isfinite(max_abs)) throw QuantizationError("non-finite value in tensor " + tensor, tensor);
  if (max_abs == 0.0) return word_bits - 2;
  const int int_bits = static_cast<int>(std::ceil(std::log2(max_abs))) + 1;
  if (int_bits > word_bits - 1) {
    throw QuantizationError("tensor " + tensor + " max-abs " + std::to_string(max_abs) + " exceeds the word range",
                            tensor);
  }
  // Tiny tensors would need shifts beyond the accumulator; cap the precision.
  return std::min(word_bits - 1 - int_bits, 2 * word_bits);
}

/// Round-half-even quantization of a real value, saturated to the word.
inline std::int64_t quantize_value(double x, int frac_bits, std::int64_t lo, std::int64_t hi, long* count) {
  const double scaled = std::nearbyint(std::ldexp(x, frac_bits));  // default mode: ties to even
  if (scaled > static_cast<double>(hi)) return saturate(hi + 1, lo, hi, count);
  if (scaled < static_cast<double>(lo)) return saturate(lo - 1, lo, hi, count);
  return static_cast<std::int64_t>(scaled);
}

inline double table_function(Activation a, double x) {
  return a == Activation::Sigmoid ? 1.0 / (1.0 + std::exp(-x)) : std::tanh(x);
}

inline ActivationTable build_table(Activation a, int word_bits) {
  ActivationTable t;
  t.entries = 1024;
  t.range_log2 = a == Activation::Sigmoid ? 3 : 2;
  t.frac_bits = word_bits - 1;
  const double range = std::ldexp(1.0, t.range_log2);
  const std::int64_t hi = (std::int64_t{1} << (word_bits - 1)) - 1;
  const std::int64_t lo = -hi - 1;
  t.values.resize(static_cast<std::size_t>(t.entries));
  for (int k = 0; k < t.entries; ++k) {
    const double x = -range + 2.0 * range * k / (t.entries - 1);
    t.values[static_cast<std::size_t>(k)] =
        static_cast<std::int32_t>(quantize_value(table_function(a, x), t.frac_bits, lo, hi, nullptr));
  }
  return t;
}

/// Table lookup with linear interpolation; z has frac_bits fractional bits.
/// Result is in the table format. Integer-only.
inline std::int64_t table_lookup(const ActivationTable& t, std::int64_t z, int frac_bits) {
  const std::int64_t range = std::int64_t{1} << (t.range_log2 + frac_bits);  // range in z units
  if (z <= -range) return t.values.front();
  if (z >= range) return t.values.back();
  // Position in table steps: (z + range) * (entries - 1) / (2 range).
  const int shift = t.range_log2 + frac_bits + 1;
  const std::int64_t u = (z + range) * (t.entries - 1);
  const std::int64_t idx = u >> shift;
  const std::int64_t frac = u - (idx << shift);
  const std::int64_t y0 = t.values[static_cast<std::size_t>(idx)];
  const std::int64_t y1 = t.values[static_cast<std::size_t>(std::min<std::int64_t>(idx + 1, t.entries - 1))];
  return y0 + shift_round_even((y1 - y0) * frac, shift);
}

inline QTensor quantize_tensor(const double* data, int rows, int cols, int word_bits, const std::string& name) {
  double max_abs = 0.0;
  for (int k = 0; k < rows * cols; ++k) max_abs = std::max(max_abs, std::abs(data[k]));
  QTensor q;
  q.rows = rows;
  q.cols = cols;
  q.frac_bits = frac_bits_for(max_abs, word_bits, name);
  const std::int64_t hi = (std::int64_t{1} << (word_bits - 1)) - 1;
  q.words.resize(static_cast<std::size_t>(rows * cols));
  for (int k = 0; k < rows * cols; ++k) {
    q.words[static_cast<std::size_t>(k)] =
        static_cast<std::int32_t>(quantize_value(data[k], q.frac_bits, -hi - 1, hi, nullptr));
  }
  return q;
}

inline Eigen::Vector3d normalized_finite_input(const InputBox& box, const PolicyInput& x) {
  Eigen::Vector3d xn = normalize_input(box, x);
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(xn(i))) xn(i) = 0.0;
  }
  return xn;
}

}  // namespace detail

/// Real value of a word in the given format.
inline double dequantize(std::int64_t word, int frac_bits) { return std::ldexp(static_cast<double>(word), -frac_bits); }

/// Chooses per-tensor formats from the weights and from the float network's
/// activations on the calibration inputs, and rounds every parameter.
inline QuantizedNetwork quantize(const PolicyNetwork& net, std::span<const PolicyInput> calibration,
                                 int word_bits = 16, int accumulator_bits = 32) {
  net.validate();
  if (calibration.empty()) throw std::invalid_argument("quantize: empty calibration set");
  QuantizedNetwork q;
  q.layers = net.layers;
  q.activation = net.activation;
  q.word_bits = word_bits;
  q.accumulator_bits = accumulator_bits;
  q.input_box = net.input_box;
  q.output_box = net.output_box;
  if (net.activation != Activation::Relu) q.table = detail::build_table(net.activation, word_bits);

  Eigen::MatrixXd a(3, static_cast<Eigen::Index>(calibration.size()));
  for (std::size_t k = 0; k < calibration.size(); ++k) {
    a.col(static_cast<Eigen::Index>(k)) = detail::normalized_finite_input(net.input_box, calibration[k]);
  }
  q.input_frac_bits = detail::frac_bits_for(a.cwiseAbs().maxCoeff(), word_bits, "input");

  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const std::string tag = "layer" + std::to_string(l);
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = net.weights[l];
    q.weights.push_back(detail::quantize_tensor(w.data(), static_cast<int>(w.rows()), static_cast<int>(w.cols()),
                                                word_bits, tag + ".weights"));
    q.biases.push_back(detail::quantize_tensor(net.biases[l].data(), static_cast<int>(net.biases[l].size()), 1,
                                               word_bits, tag + ".biases"));
    // Largest running sum (bias first, then columns in order) on calibration.
    double partial = 0.0;
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r) {
        double sum = net.biases[l](r);
        partial = std::max(partial, std::abs(sum));
        for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c) {
          sum += net.weights[l](r, c) * a(c, k);
          partial = std::max(partial, std::abs(sum));
        }
      }
    }
    q.acc_frac_bits.push_back(std::min(q.weights[l].frac_bits + q.input_frac(l),
                                       detail::frac_bits_for(partial, accumulator_bits, tag + ".accumulator")));
    Eigen::MatrixXd z = net.weights[l] * a;
    z.colwise() += net.biases[l];
    q.preact_frac_bits.push_back(detail::frac_bits_for(z.cwiseAbs().maxCoeff(), word_bits, tag + ".preactivation"));
    if (l + 1 < net.weights.size()) a = z.unaryExpr([&](double v) { return detail::activate(net.activation, v); });
  }
  q.validate();
  return q;
}

/// Integer evaluation returning the final pre-activation words.
inline std::vector<std::int64_t> forward_q_words(const QuantizedNetwork& q, const PolicyInput& x,
                                                 QuantStats* stats = nullptr) {
  const Eigen::Vector3d xn = detail::normalized_finite_input(q.input_box, x);
  const std::int64_t lo = q.word_min(), hi = q.word_max();
  const std::int64_t acc_hi = (std::int64_t{1} << (q.accumulator_bits - 1)) - 1;
  const std::int64_t acc_lo = -acc_hi - 1;
  if (stats != nullptr && stats->max_abs_preact.size() != q.weights.size()) {
    stats->max_abs_preact.assign(q.weights.size(), 0);
  }

  std::vector<std::int64_t> act(3);
  for (int i = 0; i < 3; ++i) {
    act[static_cast<std::size_t>(i)] =
        detail::quantize_value(xn(i), q.input_frac_bits, lo, hi, stats ? &stats->input_saturations : nullptr);
  }
  for (std::size_t l = 0; l < q.weights.size(); ++l) {
    const QTensor& w = q.weights[l];
    const QTensor& b = q.biases[l];
    const int acc_frac = q.acc_frac_bits[l];
    const int product_shift = w.frac_bits + q.input_frac(l) - acc_frac;
    const int fz = q.preact_frac_bits[l];
    std::vector<std::int64_t> z(static_cast<std::size_t>(w.rows));
    for (int r = 0; r < w.rows; ++r) {
      std::int64_t acc = detail::saturate(detail::shift_round_even(b.words[static_cast<std::size_t>(r)],
                                                                   b.frac_bits - acc_frac),
                                          acc_lo, acc_hi, stats ? &stats->accumulator_saturations : nullptr);
      for (int c = 0; c < w.cols; ++c) {
        const std::int64_t product = static_cast<std::int64_t>(w.at(r, c)) * act[static_cast<std::size_t>(c)];
        acc = detail::saturate(acc + detail::shift_round_even(product, product_shift), acc_lo, acc_hi,
                               stats ? &stats->accumulator_saturations : nullptr);
      }
      const std::int64_t zr = detail::saturate(detail::shift_round_even(acc, acc_frac - fz), lo, hi,
                                               stats ? &stats->requantize_saturations : nullptr);
      z[static_cast<std::size_t>(r)] = zr;
      if (stats != nullptr) {
        stats->max_abs_preact[l] = std::max(stats->max_abs_preact[l], zr < 0 ? -zr : zr);
      }
    }
    if (l + 1 == q.weights.size()) return z;
    act.assign(z.size(), 0);
    for (std::size_t r = 0; r < z.size(); ++r) {
      act[r] = q.activation == Activation::Relu ? std::max<std::int64_t>(z[r], 0)
                                                : detail::table_lookup(q.table, z[r], fz);
    }
  }
  return {};
}

inline ControlInput forward_q(const QuantizedNetwork& q, const PolicyInput& x, QuantStats* stats = nullptr) {
  const std::vector<std::int64_t> y = forward_q_words(q, x, stats);
  const int f = q.preact_frac_bits.back();
  return detail::denormalize_output(q.output_box, dequantize(y[0], f), dequantize(y[1], f));
}

struct QuantReport {
  std::size_t n = 0;
  double max_dev_f = 0.0;  // relative to output-box half-width
  double max_dev_d = 0.0;
  double mean_dev_f = 0.0;
  double mean_dev_d = 0.0;
  QuantStats stats;
  std::vector<double> range_utilization;  // per layer, max |preactivation| / word max

  double max_deviation() const { return std::max(max_dev_f, max_dev_d); }
};

inline QuantReport quantization_report(const PolicyNetwork& net, const QuantizedNetwork& q,
                                       std::span<const PolicyInput> testset) {
  if (testset.empty()) throw std::invalid_argument("quantization_report: empty test set");
  QuantReport rep;
  const double hw_f = 0.5 * (net.output_box.f_max - net.output_box.f_min);
  const double hw_d = 0.5 * (net.output_box.d_max - net.output_box.d_min);
  for (const PolicyInput& x : testset) {
    const ControlInput uf = forward(net, x);
    const ControlInput uq = forward_q(q, x, &rep.stats);
    const double df = std::abs(uq.f_sw - uf.f_sw) / hw_f;
    const double dd = std::abs(uq.duty - uf.duty) / hw_d;
    rep.max_dev_f = std::max(rep.max_dev_f, df);
    rep.max_dev_d = std::max(rep.max_dev_d, dd);
    rep.mean_dev_f += df;
    rep.mean_dev_d += dd;
    ++rep.n;
  }
  rep.mean_dev_f /= static_cast<double>(rep.n);
  rep.mean_dev_d /= static_cast<double>(rep.n);
  for (std::int64_t m : rep.stats.max_abs_preact) {
    rep.range_utilization.push_back(static_cast<double>(m) / static_cast<double>(q.word_max()));
  }
  return rep;
}

/// Uniform draws from the sampling box.
inline std::vector<PolicyInput> sample_inputs(std::size_t n, const InputBox& box, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> di(box.i_min, box.i_max), dv(box.v_min, box.v_max),
      dp(box.p_min, box.p_max);
  std::vector<PolicyInput> out(n);
  for (auto& x : out) {
    x.i_o = di(rng);
    x.v_c = dv(rng);
    x.p_des = dp(rng);
  }
  return out;
}

}  // namespace rsmpc
