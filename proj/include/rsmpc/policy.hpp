// Feed-forward policy network approximating the NMPC law, trained on
// (state, setpoint) -> optimal first input pairs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsmpc/nmpc.hpp"
#include "rsmpc/parallel.hpp"
#include "rsmpc/plant.hpp"

namespace rsmpc {

enum class Activation { Tanh, Relu, Sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "unknown";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw std::invalid_argument("unknown activation: " + s);
}

/// Sampling box of the network inputs; also the normalization box.
struct InputBox {
  double i_min = -150.0, i_max = 150.0;    // [A]
  double v_min = -2000.0, v_max = 2000.0;  // [V]
  double p_min = 0.0, p_max = 3000.0;      // [W]

  void validate() const {
    if (!(i_min < i_max && v_min < v_max && p_min < p_max)) throw std::invalid_argument("InputBox: empty range");
  }
  bool contains(double i, double v, double p) const {
    return i >= i_min && i <= i_max && v >= v_min && v <= v_max && p >= p_min && p <= p_max;
  }
};

/// Input-constraint box the network outputs are mapped into.
struct OutputBox {
  double f_min = 30e3, f_max = 100e3;
  double d_min = 0.2, d_max = 0.8;

  static OutputBox from(const NmpcConfig& cfg) { return {cfg.f_min, cfg.f_max, cfg.d_min, cfg.d_max}; }
  void validate() const {
    if (!(f_min < f_max && d_min < d_max)) throw std::invalid_argument("OutputBox: empty range");
  }
  ControlInput center() const { return {0.5 * (f_min + f_max), 0.5 * (d_min + d_max)}; }
};

struct PolicyInput {
  double i_o = 0.0;
  double v_c = 0.0;
  double p_des = 0.0;
};

struct PolicyNetwork {
  std::vector<int> layers{3, 10, 10, 10, 10, 10, 2};
  Activation activation = Activation::Tanh;
  std::vector<Eigen::MatrixXd> weights;  // weights[l] is layers[l+1] x layers[l]
  std::vector<Eigen::VectorXd> biases;
  InputBox input_box;
  OutputBox output_box;

  std::size_t depth() const { return weights.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
  }

  void validate() const {
    if (layers.size() < 2 || layers.front() != 3 || layers.back() != 2) {
      throw std::invalid_argument("PolicyNetwork: layers must start with 3 inputs and end with 2 outputs");
    }
    if (weights.size() != layers.size() - 1 || biases.size() != weights.size()) {
      throw std::invalid_argument("PolicyNetwork: tensor count does not match layers");
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != layers[l + 1] || weights[l].cols() != layers[l] || biases[l].size() != layers[l + 1]) {
        throw std::invalid_argument("PolicyNetwork: layer " + std::to_string(l) + " has inconsistent dimensions");
      }
    }
    input_box.validate();
    output_box.validate();
  }
};

/// Network with zero weights and biases.
inline PolicyNetwork zero_network(std::vector<int> layers = {3, 10, 10, 10, 10, 10, 2},
                                  Activation act = Activation::Tanh, InputBox in = {}, OutputBox out = {}) {
  PolicyNetwork net;
  net.layers = std::move(layers);
  net.activation = act;
  net.input_box = in;
  net.output_box = out;
  for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
    net.weights.push_back(Eigen::MatrixXd::Zero(net.layers[l + 1], net.layers[l]));
    net.biases.push_back(Eigen::VectorXd::Zero(net.layers[l + 1]));
  }
  net.validate();
  return net;
}

/// Glorot-uniform weights, zero biases.
inline PolicyNetwork init_network(std::vector<int> layers, Activation act, InputBox in, OutputBox out,
                                  std::uint64_t seed) {
  PolicyNetwork net = zero_network(std::move(layers), act, in, out);
  std::mt19937_64 rng(seed);
  for (auto& w : net.weights) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  }
  return net;
}

/// Rounds every parameter to the nearest 32-bit float.
inline void round_to_float32(PolicyNetwork& net) {
  for (auto& w : net.weights) w = w.cast<float>().cast<double>();
  for (auto& b : net.biases) b = b.cast<float>().cast<double>();
}

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::Tanh: return std::tanh(z);
    case Activation::Relu: return z > 0.0 ? z : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-z));
  }
  return z;
}

// Derivative from the pre-activation z and the activation value y.
inline double activate_derivative(Activation a, double z, double y) {
  switch (a) {
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::Sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

inline double to_unit(double x, double lo, double hi) { return (2.0 * x - (lo + hi)) / (hi - lo); }

inline Eigen::Vector3d normalize_input(const InputBox& b, const PolicyInput& x) {
  return {to_unit(x.i_o, b.i_min, b.i_max), to_unit(x.v_c, b.v_min, b.v_max), to_unit(x.p_des, b.p_min, b.p_max)};
}

inline Eigen::Vector2d normalize_target(const OutputBox& b, const ControlInput& u) {
  return {to_unit(u.f_sw, b.f_min, b.f_max), to_unit(u.duty, b.d_min, b.d_max)};
}

/// Affine map from [-1, 1] to the box, clamped.
inline ControlInput denormalize_output(const OutputBox& b, double yf, double yd) {
  const double f = 0.5 * (b.f_min + b.f_max) + 0.5 * (b.f_max - b.f_min) * yf;
  const double d = 0.5 * (b.d_min + b.d_max) + 0.5 * (b.d_max - b.d_min) * yd;
  return {std::clamp(std::isnan(f) ? 0.5 * (b.f_min + b.f_max) : f, b.f_min, b.f_max),
          std::clamp(std::isnan(d) ? 0.5 * (b.d_min + b.d_max) : d, b.d_min, b.d_max)};
}

}  // namespace detail

/// Pre-clamp normalized outputs for a batch of normalized inputs (3 x B).
inline Eigen::MatrixXd forward_normalized(const PolicyNetwork& net, const Eigen::MatrixXd& xn) {
  Eigen::MatrixXd a = xn;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    Eigen::MatrixXd z = net.weights[l] * a;
    z.colwise() += net.biases[l];
    if (l + 1 < net.weights.size()) {
      a = z.unaryExpr([&](double v) { return detail::activate(net.activation, v); });
    } else {
      a = std::move(z);  // linear output layer
    }
  }
  return a;
}

inline ControlInput forward(const PolicyNetwork& net, const PolicyInput& x) {
  Eigen::Vector3d xn = detail::normalize_input(net.input_box, x);
  // Non-finite inputs map to the box center rather than propagating NaN.
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(xn(i))) xn(i) = 0.0;
  }
  const Eigen::MatrixXd y = forward_normalized(net, xn);
  return detail::denormalize_output(net.output_box, y(0, 0), y(1, 0));
}

enum class Provenance { RandomState, Trajectory };

inline const char* to_string(Provenance p) {
  return p == Provenance::RandomState ? "random-state" : "trajectory";
}

inline Provenance parse_provenance(const std::string& s) {
  if (s == "random-state") return Provenance::RandomState;
  if (s == "trajectory") return Provenance::Trajectory;
  throw std::invalid_argument("unknown provenance: " + s);
}

struct Sample {
  double i_o = 0.0;    // [A]
  double v_c = 0.0;    // [V]
  double p_des = 0.0;  // [W]
  double f_sw = 0.0;   // [Hz]
  double duty = 0.0;
  Provenance provenance = Provenance::RandomState;
};

struct Dataset {
  std::vector<Sample> samples;
  std::uint64_t seed = 0;
  int discarded = 0;             // draws or steps whose solve did not converge
  bool budget_exhausted = false;
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

namespace detail {

inline void pack_batch(const PolicyNetwork& net, std::span<const Sample> batch, Eigen::MatrixXd& x,
                       Eigen::MatrixXd& t) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  x.resize(3, n);
  t.resize(2, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Sample& s = batch[static_cast<std::size_t>(k)];
    x.col(k) = normalize_input(net.input_box, {s.i_o, s.v_c, s.p_des});
    t.col(k) = normalize_target(net.output_box, {s.f_sw, s.duty});
  }
}

}  // namespace detail

/// Mean over samples and outputs of the squared error on normalized targets.
inline double batch_loss(const PolicyNetwork& net, std::span<const Sample> batch) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Eigen::MatrixXd x, t;
  detail::pack_batch(net, batch, x, t);
  return (forward_normalized(net, x) - t).squaredNorm() / static_cast<double>(t.size());
}

/// Exact gradients of batch_loss with respect to every weight and bias.
inline Gradients backprop_gradients(const PolicyNetwork& net, std::span<const Sample> batch,
                                    double* loss = nullptr) {
  if (batch.empty()) throw std::invalid_argument("backprop_gradients: empty batch");
  Eigen::MatrixXd x, t;
  detail::pack_batch(net, batch, x, t);
  const std::size_t nl = net.weights.size();

  std::vector<Eigen::MatrixXd> pre(nl), act(nl + 1);
  act[0] = x;
  for (std::size_t l = 0; l < nl; ++l) {
    pre[l] = net.weights[l] * act[l];
    pre[l].colwise() += net.biases[l];
    if (l + 1 < nl) {
      act[l + 1] = pre[l].unaryExpr([&](double v) { return detail::activate(net.activation, v); });
    } else {
      act[l + 1] = pre[l];
    }
  }
  const Eigen::MatrixXd err = act[nl] - t;
  const double scale = 1.0 / static_cast<double>(t.size());
  if (loss != nullptr) *loss = err.squaredNorm() * scale;

  Gradients g;
  g.weights.resize(nl);
  g.biases.resize(nl);
  Eigen::MatrixXd delta = 2.0 * scale * err;
  for (std::size_t l = nl; l-- > 0;) {
    g.weights[l] = delta * act[l].transpose();
    g.biases[l] = delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd back = net.weights[l].transpose() * delta;
    for (Eigen::Index k = 0; k < back.size(); ++k) {
      back.data()[k] *= detail::activate_derivative(net.activation, pre[l - 1].data()[k], act[l].data()[k]);
    }
    delta = std::move(back);
  }
  return g;
}

struct TrainConfig {
  std::vector<int> layers{3, 10, 10, 10, 10, 10, 2};
  Activation activation = Activation::Tanh;
  int epochs = 300;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs and batch_size must be >= 1");
    if (!(learning_rate > 0.0 && beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
      throw std::invalid_argument("TrainConfig: Adam parameters out of range");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction <= 0.5)) {
      throw std::invalid_argument("TrainConfig: validation_fraction must be in [0, 0.5]");
    }
  }
};

struct TrainResult {
  PolicyNetwork net;                // parameters with the best validation loss
  std::vector<double> train_loss;   // full training-set loss after each epoch
  std::vector<double> val_loss;     // empty when there is no validation split
  std::vector<double> batch_loss;   // mean minibatch loss during each epoch
  int best_epoch = 0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch) : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Adam on minibatches of the seeded 90/10 (configurable) split. Training runs
/// in double precision; the returned parameters are rounded to float32.
inline TrainResult train(const Dataset& data, const TrainConfig& cfg, const InputBox& in = {},
                         const OutputBox& out = {}) {
  cfg.validate();
  if (data.samples.empty()) throw std::invalid_argument("train: empty dataset");
  std::mt19937_64 rng(cfg.seed);

  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(order.size())));
  std::vector<Sample> val, tr;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_val ? val : tr).push_back(data.samples[order[k]]);

  TrainResult res;
  res.net = init_network(cfg.layers, cfg.activation, in, out, rng());
  PolicyNetwork& net = res.net;
  const std::size_t nl = net.weights.size();

  std::vector<Eigen::MatrixXd> mw(nl), vw(nl);
  std::vector<Eigen::VectorXd> mb(nl), vb(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    mw[l] = vw[l] = Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols());
    mb[l] = vb[l] = Eigen::VectorXd::Zero(net.biases[l].size());
  }

  PolicyNetwork best = net;
  double best_loss = std::numeric_limits<double>::infinity();
  long step = 0;
  std::vector<Sample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(tr.begin(), tr.end(), rng);
    double epoch_sum = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < tr.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(tr.size(), start + static_cast<std::size_t>(cfg.batch_size));
      double loss = 0.0;
      const Gradients g = backprop_gradients(net, std::span<const Sample>(tr.data() + start, stop - start), &loss);
      if (!std::isfinite(loss)) throw TrainingError("training diverged (non-finite loss)", epoch);
      epoch_sum += loss;
      ++n_batches;
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t l = 0; l < nl; ++l) {
        mw[l] = cfg.beta1 * mw[l] + (1.0 - cfg.beta1) * g.weights[l];
        vw[l] = cfg.beta2 * vw[l] + (1.0 - cfg.beta2) * g.weights[l].cwiseAbs2();
        mb[l] = cfg.beta1 * mb[l] + (1.0 - cfg.beta1) * g.biases[l];
        vb[l] = cfg.beta2 * vb[l] + (1.0 - cfg.beta2) * g.biases[l].cwiseAbs2();
        net.weights[l].array() -= cfg.learning_rate * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + cfg.epsilon);
        net.biases[l].array() -= cfg.learning_rate * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + cfg.epsilon);
      }
    }
    const double train_loss = batch_loss(net, tr);
    if (!std::isfinite(train_loss)) throw TrainingError("training diverged (non-finite loss)", epoch);
    res.train_loss.push_back(train_loss);
    res.batch_loss.push_back(epoch_sum / n_batches);
    double score = train_loss;
    if (!val.empty()) {
      score = batch_loss(net, val);
      res.val_loss.push_back(score);
    }
    if (score < best_loss) {
      best_loss = score;
      best = net;
      res.best_epoch = epoch;
    }
  }
  res.net = std::move(best);
  round_to_float32(res.net);
  return res;
}

namespace detail {

inline PlantState draw_state(std::mt19937_64& rng, const InputBox& box) {
  std::uniform_real_distribution<double> di(box.i_min, box.i_max), dv(box.v_min, box.v_max);
  const double i = di(rng);
  return {i, dv(rng)};
}

inline double draw_setpoint(std::mt19937_64& rng, const InputBox& box) {
  return std::uniform_real_distribution<double>(box.p_min, box.p_max)(rng);
}

}  // namespace detail

/// Uniform random (p_des, i_o, v_c) draws labelled by solving the NMPC
/// problem. Non-converged draws are discarded until n samples exist or 10 n
/// draws have been spent. Draws are consumed in a fixed order, so the result
/// does not depend on the thread count.
inline Dataset generate_dataset_random(int n, const NmpcConfig& cfg, std::uint64_t seed, const InputBox& box = {},
                                       unsigned threads = default_threads()) {
  if (n < 1) throw std::invalid_argument("generate_dataset_random: n must be >= 1");
  cfg.validate();
  box.validate();
  Dataset ds;
  ds.seed = seed;
  std::mt19937_64 rng(seed);
  const long budget = 10L * n;
  long drawn = 0;
  struct Draw {
    PlantState x;
    double p;
    ControlInput u;
    bool ok = false;
  };
  while (static_cast<int>(ds.samples.size()) < n && drawn < budget) {
    const long want = std::min<long>(budget - drawn, n - static_cast<long>(ds.samples.size()));
    std::vector<Draw> draws(static_cast<std::size_t>(want));
    for (auto& d : draws) {
      const double p = detail::draw_setpoint(rng, box);
      d.x = detail::draw_state(rng, box);
      d.p = p;
    }
    drawn += want;
    parallel_for(draws.size(), threads, [&](std::size_t k) {
      const NmpcSolution sol = solve(draws[k].x, draws[k].p, cfg);
      draws[k].ok = sol.status == SolverStatus::Converged;
      if (draws[k].ok) draws[k].u = sol.inputs.front();
    });
    for (const auto& d : draws) {
      if (!d.ok) {
        ++ds.discarded;
        continue;
      }
      if (static_cast<int>(ds.samples.size()) < n) {
        ds.samples.push_back({d.x.i_o, d.x.v_c, d.p, d.u.f_sw, d.u.duty, Provenance::RandomState});
      }
    }
  }
  ds.budget_exhausted = static_cast<int>(ds.samples.size()) < n;
  return ds;
}

/// Closed-loop exact-NMPC trajectories from uniform random initial states.
/// The setpoint is redrawn every `setpoint_hold` steps (0: once per
/// trajectory). Every converged step whose state lies in the sampling box
/// contributes its (state, setpoint) and applied input; the other steps are
/// counted as discarded.
inline Dataset generate_dataset_trajectories(int n_traj, int steps, const NmpcConfig& cfg, std::uint64_t seed,
                                             const InputBox& box = {}, int setpoint_hold = 0,
                                             unsigned threads = default_threads()) {
  if (n_traj < 1 || steps < 1) throw std::invalid_argument("generate_dataset_trajectories: counts must be >= 1");
  if (setpoint_hold < 0) throw std::invalid_argument("generate_dataset_trajectories: setpoint_hold must be >= 0");
  cfg.validate();
  box.validate();
  std::vector<std::vector<Sample>> per(static_cast<std::size_t>(n_traj));
  std::vector<int> dropped(static_cast<std::size_t>(n_traj), 0);
  parallel_for(per.size(), threads, [&](std::size_t j) {
    std::seed_seq sq{seed, static_cast<std::uint64_t>(j)};
    std::mt19937_64 rng(sq);
    PlantState x = detail::draw_state(rng, box);
    double p = detail::draw_setpoint(rng, box);
    Controller ctrl(cfg);
    for (int k = 0; k < steps; ++k) {
      if (setpoint_hold > 0 && k > 0 && k % setpoint_hold == 0) p = detail::draw_setpoint(rng, box);
      const ControlInput u = ctrl.step(x, p);
      if (ctrl.degraded() || !box.contains(x.i_o, x.v_c, p)) {
        ++dropped[j];
      } else {
        per[j].push_back({x.i_o, x.v_c, p, u.f_sw, u.duty, Provenance::Trajectory});
      }
      x = simulate_cycle(x, cfg.model, u).state_end;
    }
  });
  Dataset ds;
  ds.seed = seed;
  for (std::size_t j = 0; j < per.size(); ++j) {
    ds.samples.insert(ds.samples.end(), per[j].begin(), per[j].end());
    ds.discarded += dropped[j];
  }
  return ds;
}

}  // namespace rsmpc
