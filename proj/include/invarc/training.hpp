#pragma once

// Multi-step rollout training with AdamW, cosine annealing and gradient
// clipping, plus the penalty and invariant-penalty baselines.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "invarc/autodiff.hpp"
#include "invarc/compiler.hpp"
#include "invarc/errors.hpp"
#include "invarc/integrator.hpp"
#include "invarc/metrics.hpp"
#include "invarc/nets.hpp"
#include "invarc/systems.hpp"

namespace invarc::training {

using ad::Mat;
using ad::Var;
using ad::Tape;
using Eigen::VectorXd;
using Index = Eigen::Index;
using Time = Eigen::RowVectorXd;

/// `none` trains the compiled model; the others train the free MLP field.
enum class Baseline { none, unconstrained, penalty, pinns };

inline const char* baseline_name(Baseline b) {
  switch (b) {
    case Baseline::none: return "none";
    case Baseline::unconstrained: return "unconstrained";
    case Baseline::penalty: return "penalty";
    case Baseline::pinns: return "pinns";
  }
  return "?";
}

inline Baseline parse_baseline(const std::string& s) {
  for (auto b : {Baseline::none, Baseline::unconstrained, Baseline::penalty, Baseline::pinns})
    if (s == baseline_name(b)) return b;
  throw ConfigError("unknown baseline '" + s + "'");
}

struct TrainConfig {
  long n_steps = 4;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  long epochs = 300;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  Baseline baseline = Baseline::none;
  double lambda = 10.0;
  long batch = 64;
  double max_skip_fraction = 0.01;

  void validate() const {
    if (n_steps < 1) throw ConfigError("n_steps must be at least 1");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(clip_norm > 0)) throw ConfigError("clip norm must be positive");
    if (lambda < 0) throw ConfigError("penalty weight must be non-negative");
    if (batch < 1) throw ConfigError("batch size must be at least 1");
  }

  nlohmann::ordered_json to_json() const {
    return {{"n_steps", n_steps},           {"lr", lr},       {"weight_decay", weight_decay},
            {"epochs", epochs},             {"clip_norm", clip_norm}, {"seed", seed},
            {"baseline", baseline_name(baseline)}, {"lambda", lambda}, {"batch", batch}};
  }
};

// ---------------------------------------------------------------------------
// Losses

/// (1/n) sum_k (1/k) mean_b |pred_k - target_k|^2, where preds[k-1] is the
/// k-step prediction and targets[k] the matching data (targets[0] is the start).
inline Var rollout_loss(const std::vector<Var>& preds, const std::vector<Mat>& targets) {
  if (preds.empty()) throw ContractError("rollout_loss: no predictions");
  if (targets.size() < preds.size() + 1) throw ContractError("rollout_loss: window too short");
  Tape& tape = preds.front().tape();
  const double n = static_cast<double>(preds.size());
  Var total;
  for (std::size_t k = 1; k <= preds.size(); ++k) {
    const Var err = ad::mean(ad::colsum(ad::square(preds[k - 1] - tape.constant(targets[k]))));
    const Var term = ad::scale(err, 1.0 / (n * static_cast<double>(k)));
    total = total.valid() ? total + term : term;
  }
  return total;
}

/// Rolls the model n_steps RK4 steps from window[0] (dim x B) and returns the
/// decoded physical predictions for steps 1..n_steps.
inline std::vector<Var> predict_window(const compiler::CompiledModel& model, nets::BoundParams& p,
                                       const std::vector<Mat>& window, double h, long n_steps, const Time& t0) {
  if (n_steps < 1) throw ContractError("predict_window: n_steps must be at least 1");
  if (static_cast<long>(window.size()) < n_steps + 1)
    throw ContractError("window has " + std::to_string(window.size()) + " states, need n_steps + 1 = " +
                        std::to_string(n_steps + 1));
  Tape& tape = p.tape();
  const auto& field = model.field();
  auto f = [&](const Var& z, const Time& t) { return field.eval(p, z, t); };
  Var z = model.encode(p, tape.constant(window[0]));
  std::vector<Var> preds;
  preds.reserve(n_steps);
  for (long k = 0; k < n_steps; ++k) {
    const Time t = (t0.array() + static_cast<double>(k) * h).matrix();
    z = integrator::rk4_step(f, z, t, h, k);
    preds.push_back(model.decode(p, z));
  }
  return preds;
}

inline Var multistep_loss(const compiler::CompiledModel& model, nets::BoundParams& p, const std::vector<Mat>& window,
                          double h, long n_steps, const Time& t0) {
  return rollout_loss(predict_window(model, p, window, h, n_steps, t0), window);
}

/// Differentiable per-column constraint residual of a physical prediction;
/// `start` is the window's first state (used by stoichiometric drift).
using ViolationFn = std::function<Var(Var x, const Mat& start)>;

inline ViolationFn violation_fn(const systems::CatalogSystem& sys) {
  switch (sys.constraint) {
    case systems::ConstraintKind::simplex:
      return [](Var x, const Mat&) {
        return ad::abs(ad::add_scalar(ad::colsum(x), -1.0)) + ad::colsum(ad::relu(-x));
      };
    case systems::ConstraintKind::cone: {
      const auto order = sys.cone_order;
      return [order](Var x, const Mat&) {
        const Index n = x.rows();
        Mat perm = Mat::Zero(n, n);
        for (Index i = 0; i < n; ++i) perm(i, order[i]) = 1.0;
        const Var z = ad::matmul(x.tape().constant(perm), x);
        return ad::relu(ad::norm_cols(ad::rows(z, 1, n - 1)) - ad::rows(z, 0, 1));
      };
    }
    case systems::ConstraintKind::stoichiometric: {
      const Mat m = sys.molecular;
      return [m](Var x, const Mat& start) {
        Tape& tape = x.tape();
        return ad::norm_cols(ad::matmul(tape.constant(m), x - tape.constant(start)));
      };
    }
    case systems::ConstraintKind::none: break;
  }
  throw ConfigError("system '" + sys.id + "' declares no constraint for the penalty baseline");
}

/// Mean over steps and batch of violation(pred_k).
inline Var mean_violation(const std::vector<Var>& preds, const Mat& start, const ViolationFn& viol) {
  Var total;
  for (const auto& x : preds) {
    const Var v = ad::mean(viol(x, start));
    total = total.valid() ? total + v : v;
  }
  return ad::scale(total, 1.0 / static_cast<double>(preds.size()));
}

inline Var penalty_loss(const compiler::CompiledModel& model, nets::BoundParams& p, const std::vector<Mat>& window,
                        double h, long n_steps, const Time& t0, double lambda, const ViolationFn& viol) {
  const auto preds = predict_window(model, p, window, h, n_steps, t0);
  return rollout_loss(preds, window) + ad::scale(mean_violation(preds, window[0], viol), lambda);
}

/// Sum over invariants of mean_{k,b} (Q(pred_k) - Q(data_k))^2.
inline Var invariant_penalty(const std::vector<Var>& preds, const std::vector<Mat>& window,
                             const std::vector<systems::Invariant>& invariants) {
  if (invariants.empty()) throw ConfigError("no analytic invariants available for the pinns baseline");
  Tape& tape = preds.front().tape();
  Var total;
  for (const auto& q : invariants) {
    for (std::size_t k = 1; k <= preds.size(); ++k) {
      const Var target = q.batch_value(tape.constant(window[k]));
      const Var d = q.batch_value(preds[k - 1]) - tape.constant(target.value());
      const Var term = ad::scale(ad::mean(ad::square(d)), 1.0 / static_cast<double>(preds.size()));
      total = total.valid() ? total + term : term;
    }
  }
  return total;
}

inline Var pinns_loss(const compiler::CompiledModel& model, nets::BoundParams& p, const std::vector<Mat>& window,
                      double h, long n_steps, const Time& t0, double lambda,
                      const std::vector<systems::Invariant>& invariants) {
  const auto preds = predict_window(model, p, window, h, n_steps, t0);
  return rollout_loss(preds, window) + ad::scale(invariant_penalty(preds, window, invariants), lambda);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Scales g in place to norm at most max_norm; returns the norm before clipping.
inline double clip_gradient(VectorXd& g, double max_norm) {
  const double norm = g.norm();
  if (norm > max_norm) g *= max_norm / norm;
  return norm;
}

/// Cosine annealing from base_lr at epoch 0 towards 0 at `epochs`.
inline double cosine_lr(double base_lr, long epoch, long epochs) {
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  VectorXd m, v;
  long t = 0;

  void step(VectorXd& theta, const VectorXd& g, double lr) {
    if (m.size() != theta.size()) {
      m = VectorXd::Zero(theta.size());
      v = VectorXd::Zero(theta.size());
    }
    ++t;
    theta *= 1.0 - lr * weight_decay;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

// ---------------------------------------------------------------------------
// Windows and the training loop

struct WindowRef {
  long traj = 0;
  long start = 0;
};

/// Every contiguous (n_steps + 1)-point slice of every trajectory.
inline std::vector<WindowRef> make_windows(const std::vector<integrator::Trajectory>& data, long n_steps) {
  std::vector<WindowRef> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (long s = 0; s + n_steps < data[i].points(); ++s) out.push_back({static_cast<long>(i), s});
  if (out.empty()) throw ConfigError("dataset has no window of " + std::to_string(n_steps + 1) + " points");
  return out;
}

/// Gathers windows refs[first, first + count) into n_steps + 1 matrices.
inline std::vector<Mat> gather(const std::vector<integrator::Trajectory>& data, const std::vector<WindowRef>& refs,
                               std::size_t first, std::size_t count, long n_steps, Time* t0 = nullptr) {
  const Index dim = data.front().dim();
  std::vector<Mat> w(n_steps + 1, Mat(dim, static_cast<Index>(count)));
  if (t0) t0->resize(static_cast<Index>(count));
  for (std::size_t c = 0; c < count; ++c) {
    const auto& r = refs[first + c];
    const auto& tr = data[r.traj];
    for (long k = 0; k <= n_steps; ++k) w[k].col(static_cast<Index>(c)) = tr.states.row(r.start + k).transpose();
    if (t0) (*t0)(static_cast<Index>(c)) = tr.times(r.start);
  }
  return w;
}

struct EpochLog {
  long epoch = 0;
  double lr = 0;
  double loss = 0;
  double violation = 0;  // mean constraint residual of the training predictions
  long skipped = 0;
  double wall_time = 0;

  /// Deterministic fields first; wall time is the only non-reproducible value.
  nlohmann::ordered_json to_json() const {
    return {{"epoch", epoch},
            {"lr", lr},
            {"loss", loss},
            {"violation", violation},
            {"skipped", skipped},
            {"wall_time", wall_time}};
  }
};

struct TrainState {
  nets::ParamStore params;
  AdamW opt;
  long next_epoch = 0;
  long skipped = 0;
  std::vector<EpochLog> log;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  // written after every epoch
  std::ostream* log_stream = nullptr;                   // JSON line per epoch
  std::ostream* warn_stream = &std::cerr;
  long stop_after_epoch = -1;  // stop early (for resume tests); -1 runs to cfg.epochs
};

inline void save_state(const std::filesystem::path& dir, const TrainState& st, const TrainConfig& cfg) {
  nets::save_checkpoint(dir, st.params);
  if (st.opt.m.size()) {
    nets::write_vector(dir / "adam_m.bin", st.opt.m);
    nets::write_vector(dir / "adam_v.bin", st.opt.v);
  }
  nlohmann::ordered_json j;
  j["next_epoch"] = st.next_epoch;
  j["adam_t"] = st.opt.t;
  j["skipped"] = st.skipped;
  j["config"] = cfg.to_json();
  auto& log = j["log"] = nlohmann::ordered_json::array();
  for (const auto& e : st.log) log.push_back(e.to_json());
  std::ofstream(dir / "train_state.json") << j.dump(2) << "\n";
}

/// Restores parameters and optimizer state written by save_state.
inline TrainState load_state(const std::filesystem::path& dir, const compiler::CompiledModel& model) {
  TrainState st;
  st.params = nets::ParamStore(model.schema());
  nets::load_checkpoint(dir, st.params);
  std::ifstream in(dir / "train_state.json");
  if (!in) throw ConfigError("missing train_state.json in " + dir.string());
  const auto j = nlohmann::json::parse(in);
  st.next_epoch = j["next_epoch"].get<long>();
  st.opt.t = j["adam_t"].get<long>();
  st.skipped = j["skipped"].get<long>();
  if (st.opt.t > 0) {
    st.opt.m = nets::read_vector(dir / "adam_m.bin", st.params.size());
    st.opt.v = nets::read_vector(dir / "adam_v.bin", st.params.size());
  }
  for (const auto& e : j["log"])
    st.log.push_back({e["epoch"].get<long>(), e["lr"].get<double>(), e["loss"].get<double>(),
                      e["violation"].get<double>(), e["skipped"].get<long>(), e["wall_time"].get<double>()});
  return st;
}

namespace detail {

struct BatchResult {
  double loss = 0;
  double violation = 0;
  VectorXd grad;
};

inline BatchResult batch_step(const compiler::CompiledModel& model, const nets::ParamStore& params,
                              const std::vector<Mat>& window, const Time& t0, double h, const TrainConfig& cfg,
                              const systems::CatalogSystem& sys, const ViolationFn& viol) {
  ad::Tape tape;
  nets::BoundParams p(params, tape, true);
  const auto preds = predict_window(model, p, window, h, cfg.n_steps, t0);
  Var loss = rollout_loss(preds, window);
  if (cfg.baseline == Baseline::penalty)
    loss = loss + ad::scale(mean_violation(preds, window[0], viol), cfg.lambda);
  else if (cfg.baseline == Baseline::pinns)
    loss = loss + ad::scale(invariant_penalty(preds, window, sys.invariants), cfg.lambda);
  BatchResult r;
  r.loss = loss.value()(0, 0);
  if (!std::isfinite(r.loss)) return r;
  tape.backward(loss);
  r.grad = p.gradient();
  double v = 0;
  for (const auto& x : preds)
    for (Index c = 0; c < x.cols(); ++c) v += metrics::violation(sys, x.value().col(c), window[0].col(c));
  r.violation = v / static_cast<double>(preds.size());
  return r;
}

}  // namespace detail

/// Trains `model` on `data` (trajectories of `sys`) starting from `init`, or
/// from `resume` when given. Deterministic given cfg.seed.
inline TrainState train(const compiler::CompiledModel& model, const std::vector<integrator::Trajectory>& data,
                        const systems::CatalogSystem& sys, const TrainConfig& cfg, const nets::ParamStore& init,
                        const TrainOptions& opts = {}, std::optional<TrainState> resume = std::nullopt) {
  cfg.validate();
  if (data.empty()) throw ConfigError("empty dataset");
  if (data.front().dim() != model.state_dim()) throw DimensionError("dataset dimension does not match the model");
  const bool is_baseline = cfg.baseline != Baseline::none;
  if (is_baseline != model.unconstrained())
    throw ConfigError(is_baseline ? "baselines train the unconstrained field" : "baseline 'none' needs a compiled model");
  ViolationFn viol;
  if (cfg.baseline == Baseline::penalty) viol = violation_fn(sys);
  if (cfg.baseline == Baseline::pinns && sys.invariants.empty())
    throw ConfigError("system '" + sys.id + "' has no analytic invariants for the pinns baseline");

  const double h = data.front().times(1) - data.front().times(0);
  auto refs = make_windows(data, cfg.n_steps);
  const long total_windows = static_cast<long>(refs.size());

  TrainState st;
  if (resume) {
    st = std::move(*resume);
  } else {
    st.params = init;
  }
  st.opt.weight_decay = cfg.weight_decay;

  const long last = opts.stop_after_epoch >= 0 ? std::min(opts.stop_after_epoch + 1, cfg.epochs) : cfg.epochs;
  for (long epoch = st.next_epoch; epoch < last; ++epoch) {
    const auto t_start = std::chrono::steady_clock::now();
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
    std::vector<WindowRef> order = refs;
    std::mt19937_64 rng(nets::derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0, viol_sum = 0;
    long used = 0, skipped = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t count = std::min<std::size_t>(cfg.batch, order.size() - first);
      std::vector<WindowRef> batch(order.begin() + static_cast<long>(first),
                                   order.begin() + static_cast<long>(first + count));
      detail::BatchResult r;
      bool done = false;
      while (!done && !batch.empty()) {
        Time t0;
        const auto window = gather(data, batch, 0, batch.size(), cfg.n_steps, &t0);
        try {
          r = detail::batch_step(model, st.params, window, t0, h, cfg, sys, viol);
          done = true;
        } catch (const DivergenceError&) {
          // Find and drop the offending windows, then retry the rest.
          std::vector<WindowRef> keep;
          for (const auto& w : batch) {
            Time t1;
            const auto single = gather(data, std::vector<WindowRef>{w}, 0, 1, cfg.n_steps, &t1);
            try {
              ad::Tape tape;
              nets::BoundParams p(st.params, tape, false);
              predict_window(model, p, single, h, cfg.n_steps, t1);
              keep.push_back(w);
            } catch (const DivergenceError&) {
              ++skipped;
              if (opts.warn_stream)
                *opts.warn_stream << "warning: skipping divergent window (trajectory " << w.traj << ", start "
                                  << w.start << ") at epoch " << epoch << "\n";
            }
          }
          if (keep.size() == batch.size()) throw;
          batch = std::move(keep);
        }
      }
      if (!done) continue;
      if (!std::isfinite(r.loss) || !r.grad.allFinite())
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(first / static_cast<std::size_t>(cfg.batch)),
                              epoch, 0);
      clip_gradient(r.grad, cfg.clip_norm);
      st.opt.step(st.params.values(), r.grad, lr);
      loss_sum += r.loss * static_cast<double>(batch.size());
      viol_sum += r.violation;
      used += static_cast<long>(batch.size());
    }
    st.skipped += skipped;
    if (static_cast<double>(skipped) > cfg.max_skip_fraction * static_cast<double>(total_windows))
      throw DivergenceError("epoch " + std::to_string(epoch) + " skipped " + std::to_string(skipped) + " of " +
                                std::to_string(total_windows) + " windows",
                            epoch, 0);

    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.loss = used ? loss_sum / static_cast<double>(used) : 0.0;
    e.violation = used ? viol_sum / static_cast<double>(used) : 0.0;
    e.skipped = skipped;
    e.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    st.log.push_back(e);
    st.next_epoch = epoch + 1;
    if (opts.log_stream) *opts.log_stream << e.to_json().dump() << std::endl;
    if (opts.checkpoint_dir) save_state(*opts.checkpoint_dir, st, cfg);
  }
  return st;
}

}  // namespace invarc::training
