#pragma once

// Fixed-step classical RK4, usable on plain matrices and on tape variables.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "invarc/autodiff.hpp"
#include "invarc/errors.hpp"

namespace invarc::integrator {

using ad::Mat;
using ad::Var;
using Index = Eigen::Index;
using Time = Eigen::RowVectorXd;

namespace detail {
inline bool all_finite(const Mat& m) { return m.allFinite(); }
inline bool all_finite(const Var& v) { return v.value().allFinite(); }
}  // namespace detail

/// One RK4 step for a batch of states (one per column) that all share the
/// same step size. f(x, t) must return a value with the shape of x.
template <class State, class F>
State rk4_step(F&& f, const State& x, const Time& t, double h, long step = -1) {
  if (!(h > 0)) throw ContractError("rk4_step: step size must be positive");
  auto check = [&](const State& k, int stage) {
    if (!detail::all_finite(k))
      throw DivergenceError("non-finite value in RK4 stage " + std::to_string(stage), step, stage);
  };
  const Time t_half = (t.array() + 0.5 * h).matrix();
  const Time t_full = (t.array() + h).matrix();
  State k1 = f(x, t);
  check(k1, 1);
  State k2 = f(x + (0.5 * h) * k1, t_half);
  check(k2, 2);
  State k3 = f(x + (0.5 * h) * k2, t_half);
  check(k3, 3);
  State k4 = f(x + h * k3, t_full);
  check(k4, 4);
  State next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!detail::all_finite(next)) throw DivergenceError("non-finite state after RK4 step", step, 0);
  return next;
}

/// Convenience overload for a scalar start time.
template <class State, class F>
State rk4_step(F&& f, const State& x, double t, double h, long step = -1) {
  return rk4_step(std::forward<F>(f), x, Time::Constant(x.cols(), t), h, step);
}

using Rhs = std::function<Mat(const Mat&, const Time&)>;
using Diagnostic = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct Trajectory {
  Eigen::VectorXd times;
  Mat states;       // points x dim
  Mat diagnostics;  // points x n_diag (possibly 0 columns)
  std::vector<std::string> state_names;
  std::vector<std::string> diagnostic_names;

  Index points() const { return times.size(); }
  Index dim() const { return states.cols(); }
};

/// Uniform grid t0, t0 + h, ..., t0 + n h (computed by multiplication, not
/// accumulation, so grids of different runs agree bit for bit).
inline Eigen::VectorXd uniform_grid(double t0, double h, long n_steps) {
  Eigen::VectorXd g(n_steps + 1);
  for (long i = 0; i <= n_steps; ++i) g(i) = t0 + static_cast<double>(i) * h;
  return g;
}

/// Batched rollout: returns n_steps + 1 matrices (dim x B).
inline std::vector<Mat> rollout_batch(const Rhs& f, const Mat& x0, double t0, double h, long n_steps,
                                      int substeps = 1) {
  if (n_steps < 1) throw ContractError("rollout: n_steps must be at least 1");
  if (substeps < 1) throw ContractError("rollout: substeps must be at least 1");
  std::vector<Mat> out;
  out.reserve(n_steps + 1);
  out.push_back(x0);
  Mat x = x0;
  const double hs = h / substeps;
  for (long i = 0; i < n_steps; ++i) {
    for (int s = 0; s < substeps; ++s) {
      const double t = t0 + static_cast<double>(i) * h + static_cast<double>(s) * hs;
      x = rk4_step(f, x, Time::Constant(x.cols(), t), hs, i);
    }
    out.push_back(x);
  }
  return out;
}

/// Single-trajectory rollout with optional per-point diagnostics.
inline Trajectory rollout(const Rhs& f, const Eigen::VectorXd& x0, double h, long n_steps,
                          const Diagnostic& diag = nullptr, double t0 = 0.0, int substeps = 1) {
  const auto states = rollout_batch(f, x0, t0, h, n_steps, substeps);
  Trajectory tr;
  tr.times = uniform_grid(t0, h, n_steps);
  tr.states.resize(n_steps + 1, x0.size());
  for (long i = 0; i <= n_steps; ++i) tr.states.row(i) = states[i].col(0).transpose();
  if (diag) {
    for (long i = 0; i <= n_steps; ++i) {
      const Eigen::VectorXd d = diag(tr.states.row(i).transpose());
      if (i == 0) tr.diagnostics.resize(n_steps + 1, d.size());
      tr.diagnostics.row(i) = d.transpose();
    }
  }
  return tr;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(std::ostream& out, const Trajectory& tr) {
  out << "t";
  for (Index j = 0; j < tr.dim(); ++j)
    out << "," << (j < static_cast<Index>(tr.state_names.size()) ? tr.state_names[j] : "x" + std::to_string(j));
  for (Index j = 0; j < tr.diagnostics.cols(); ++j)
    out << "," << (j < static_cast<Index>(tr.diagnostic_names.size()) ? tr.diagnostic_names[j] : "d" + std::to_string(j));
  out << "\n";
  for (Index i = 0; i < tr.points(); ++i) {
    out << format_double(tr.times(i));
    for (Index j = 0; j < tr.dim(); ++j) out << "," << format_double(tr.states(i, j));
    for (Index j = 0; j < tr.diagnostics.cols(); ++j) out << "," << format_double(tr.diagnostics(i, j));
    out << "\n";
  }
}

inline void write_csv(const std::string& path, const Trajectory& tr) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  write_csv(out, tr);
}

/// Reads a CSV produced by write_csv; columns beyond `dim` states are taken as
/// diagnostics.
inline Trajectory read_csv(const std::string& path, Index dim) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      header.push_back(line.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
  }
  if (static_cast<Index>(header.size()) < dim + 1) throw ConfigError(path + ": too few columns");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      r.push_back(std::stod(line.substr(start, pos - start)));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    if (r.size() != header.size()) throw ConfigError(path + ": ragged row");
    rows.push_back(std::move(r));
  }
  Trajectory tr;
  const Index n = static_cast<Index>(rows.size());
  const Index nd = static_cast<Index>(header.size()) - 1 - dim;
  tr.times.resize(n);
  tr.states.resize(n, dim);
  tr.diagnostics.resize(n, nd);
  for (Index i = 0; i < n; ++i) {
    tr.times(i) = rows[i][0];
    for (Index j = 0; j < dim; ++j) tr.states(i, j) = rows[i][1 + j];
    for (Index j = 0; j < nd; ++j) tr.diagnostics(i, j) = rows[i][1 + dim + j];
  }
  tr.state_names.assign(header.begin() + 1, header.begin() + 1 + dim);
  tr.diagnostic_names.assign(header.begin() + 1 + dim, header.end());
  return tr;
}

}  // namespace invarc::integrator
