#pragma once

// Evaluation metrics: MSE splits, violations, the deviation integral and
// improvement factors, plus the held-out evaluation driver.

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "invarc/compiler.hpp"
#include "invarc/errors.hpp"
#include "invarc/integrator.hpp"
#include "invarc/parallel.hpp"
#include "invarc/systems.hpp"

namespace invarc::metrics {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Index = Eigen::Index;

struct MseSplit {
  double train = 0.0;
  double extrap = 0.0;
  double total = 0.0;
  Index n_train = 0;
  Index n_extrap = 0;
};

/// Mean over grid points of the squared state-error norm. The point at
/// t_train_end itself belongs to the training window.
inline MseSplit mse_split(const integrator::Trajectory& pred, const integrator::Trajectory& truth, double t_train_end) {
  if (pred.points() != truth.points() || pred.dim() != truth.dim())
    throw DimensionError("mse_split: prediction and truth have different shapes");
  const double tol = 1e-12 * std::max(1.0, truth.times.cwiseAbs().maxCoeff());
  if ((pred.times - truth.times).cwiseAbs().maxCoeff() > tol)
    throw ContractError("mse_split: prediction and truth use different grids");
  MseSplit out;
  double s_train = 0, s_extrap = 0;
  for (Index i = 0; i < truth.points(); ++i) {
    const double e = (pred.states.row(i) - truth.states.row(i)).squaredNorm();
    if (truth.times(i) <= t_train_end + tol) {
      s_train += e;
      ++out.n_train;
    } else {
      s_extrap += e;
      ++out.n_extrap;
    }
  }
  out.train = out.n_train ? s_train / static_cast<double>(out.n_train) : 0.0;
  out.extrap = out.n_extrap ? s_extrap / static_cast<double>(out.n_extrap) : 0.0;
  out.total = (s_train + s_extrap) / static_cast<double>(truth.points());
  return out;
}

/// (1/T) * integral |Q - Q_theory| dt with the trapezoid rule.
inline double deviation(const VectorXd& q_pred, const VectorXd& q_theory, const VectorXd& grid) {
  if (q_pred.size() != q_theory.size() || q_pred.size() != grid.size())
    throw DimensionError("deviation: series lengths differ");
  if (grid.size() < 2) throw ContractError("deviation: need at least two grid points");
  const double span = grid(grid.size() - 1) - grid(0);
  if (!(span > 0)) throw ContractError("deviation: grid must be increasing");
  double acc = 0;
  for (Index i = 0; i + 1 < grid.size(); ++i) {
    const double a = std::abs(q_pred(i) - q_theory(i));
    const double b = std::abs(q_pred(i + 1) - q_theory(i + 1));
    acc += 0.5 * (a + b) * (grid(i + 1) - grid(i));
  }
  return acc / span;
}

/// Constraint residual of one state; `reference` is the initial state for
/// stoichiometric drift.
inline double violation(systems::ConstraintKind kind, const VectorXd& x, const MatrixXd& molecular = MatrixXd(),
                        const VectorXd& reference = VectorXd()) {
  switch (kind) {
    case systems::ConstraintKind::none: return 0.0;
    case systems::ConstraintKind::simplex: return std::abs(x.sum() - 1.0) + (-x.array()).max(0.0).sum();
    case systems::ConstraintKind::cone: return std::max(0.0, x.tail(x.size() - 1).norm() - x(0));
    case systems::ConstraintKind::stoichiometric:
      if (molecular.cols() != x.size() || reference.size() != x.size())
        throw DimensionError("violation: stoichiometric check needs the molecular matrix and a reference state");
      return (molecular * (x - reference)).norm();
  }
  return 0.0;
}

inline double violation(const systems::CatalogSystem& sys, const VectorXd& x, const VectorXd& reference) {
  VectorXd ordered = x;
  if (sys.constraint == systems::ConstraintKind::cone)
    for (std::size_t i = 0; i < sys.cone_order.size(); ++i) ordered(i) = x(sys.cone_order[i]);
  return violation(sys.constraint, ordered, sys.molecular, reference);
}

/// baseline / ours, or nothing when ours is not the best.
inline std::optional<double> improvement_factor(double baseline, double ours) {
  if (std::isnan(baseline) || std::isnan(ours) || baseline < 0 || ours < 0) throw ContractError("improvement_factor: metrics must be non-negative");
  if (ours > baseline) return std::nullopt;
  if (ours == 0.0) return baseline == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return baseline / ours;
}

inline std::string format_factor(const std::optional<double>& f) {
  if (!f) return "—";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", *f);
  return buf;
}

// ---------------------------------------------------------------------------
// Held-out evaluation

/// JSON has no infinity; non-finite metrics are written as the string "inf".
inline nlohmann::ordered_json json_number(double v) {
  if (std::isfinite(v)) return v;
  return "inf";
}

inline double read_number(const nlohmann::ordered_json& j) {
  if (j.is_string()) return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

struct EvalOptions {
  long n_test = 20;
  std::uint64_t seed = 0;
  double horizon_mult = 1.0;  // evaluation horizon in units of the training horizon
  double t_train_end = 0.0;   // 0: use the system horizon
};

/// Rolls the model out from held-out initial conditions and compares against
/// fine-step ground truth. Returns a JSON object with a stable key order.
inline nlohmann::ordered_json evaluate(const compiler::CompiledModel& model, const nets::ParamStore& params,
                                       const systems::CatalogSystem& sys, const EvalOptions& opt) {
  const double t_train = opt.t_train_end > 0 ? opt.t_train_end : sys.t_end;
  const double h = sys.grid_step();
  const long n_steps = std::lround(opt.horizon_mult * t_train / h);
  const long points = n_steps + 1;
  const double t_end = static_cast<double>(n_steps) * h;

  struct PerTraj {
    MseSplit mse;
    std::vector<double> dev;
    double violation = 0.0;
    bool diverged = false;
  };
  std::vector<PerTraj> per(opt.n_test);
  parallel_for(opt.n_test, [&](long i) {
    systems::Rng rng(systems::trajectory_seed(nets::derive_seed(opt.seed, "test"), i));
    const VectorXd x0 = sys.sample_ic(rng);
    const auto truth = systems::simulate_truth(sys, x0, t_end, points);
    auto& r = per[i];
    r.dev.assign(sys.invariants.size(), std::numeric_limits<double>::infinity());
    integrator::Trajectory pred;
    pred.times = truth.times;
    pred.states.resize(points, sys.dim());
    try {
      const auto xs = model.simulate(params, x0, 0.0, h, n_steps);
      for (long k = 0; k < points; ++k) pred.states.row(k) = xs[k].col(0).transpose();
      if (!pred.states.allFinite()) throw DivergenceError("non-finite prediction");
    } catch (const Error&) {
      r.diverged = true;
      r.mse = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
               std::numeric_limits<double>::infinity(), 0, 0};
      r.violation = std::numeric_limits<double>::infinity();
      return;
    }
    r.mse = mse_split(pred, truth, t_train);
    for (std::size_t q = 0; q < sys.invariants.size(); ++q) {
      VectorXd qp(points), qt(points);
      for (long k = 0; k < points; ++k) {
        qp(k) = sys.invariants[q].value(pred.states.row(k).transpose());
        qt(k) = sys.invariants[q].value(truth.states.row(k).transpose());
      }
      const double d = deviation(qp, qt, truth.times);
      r.dev[q] = std::isfinite(d) ? d : std::numeric_limits<double>::infinity();
    }
    double v = 0;
    for (long k = 0; k < points; ++k) v += violation(sys, pred.states.row(k).transpose(), x0);
    r.violation = v / static_cast<double>(points);
  });

  auto mean = [&](auto get) {
    double s = 0;
    for (const auto& r : per) s += get(r);
    return s / static_cast<double>(per.size());
  };
  auto stdev = [&](auto get) {
    const double m = mean(get);
    double s = 0;
    for (const auto& r : per) s += (get(r) - m) * (get(r) - m);
    return std::sqrt(s / static_cast<double>(per.size()));
  };
  long diverged = 0;
  for (const auto& r : per) diverged += r.diverged;

  nlohmann::ordered_json rep;
  rep["system"] = sys.id;
  rep["model"] = model.unconstrained() ? compiler::kUnconstrained : compiler::kind_name(model.ir().invariant.kind);
  rep["horizon_mult"] = opt.horizon_mult;
  rep["t_train_end"] = t_train;
  rep["t_end"] = t_end;
  rep["n_test"] = opt.n_test;
  rep["diverged"] = diverged;
  rep["mse_train"] = json_number(mean([](const PerTraj& r) { return r.mse.train; }));
  rep["mse_extrap"] = json_number(mean([](const PerTraj& r) { return r.mse.extrap; }));
  rep["mse_total"] = json_number(mean([](const PerTraj& r) { return r.mse.total; }));
  rep["mse_total_std"] = json_number(stdev([](const PerTraj& r) { return r.mse.total; }));
  rep["violation"] = json_number(mean([](const PerTraj& r) { return r.violation; }));
  auto& dev = rep["deviation"] = nlohmann::ordered_json::object();
  for (std::size_t q = 0; q < sys.invariants.size(); ++q)
    dev[sys.invariants[q].name] = json_number(mean([q](const PerTraj& r) { return r.dev[q]; }));
  return rep;
}

/// Adds improvement factors of `ours` against each named baseline report.
inline nlohmann::ordered_json improvement_table(const nlohmann::ordered_json& ours,
                                                const std::vector<std::pair<std::string, nlohmann::ordered_json>>& baselines) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  auto factor = [&](const std::string& key, const std::string& sub) {
    std::optional<double> best;
    for (const auto& [name, rep] : baselines) {
      const double v = read_number(sub.empty() ? rep[key] : rep[key][sub]);
      if (!best || v < *best) best = v;
    }
    if (!best) return std::string("—");
    const double o = read_number(sub.empty() ? ours[key] : ours[key][sub]);
    return format_factor(improvement_factor(*best, o));
  };
  out["mse_total"] = factor("mse_total", "");
  out["violation"] = factor("violation", "");
  for (const auto& [name, _] : ours["deviation"].items()) out["deviation_" + name] = factor("deviation", name);
  return out;
}

}  // namespace invarc::metrics
