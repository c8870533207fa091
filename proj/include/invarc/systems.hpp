#pragma once

// Ground-truth catalog systems: right-hand sides, initial-condition samplers,
// analytic invariants and dataset generation.

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "invarc/autodiff.hpp"
#include "invarc/errors.hpp"
#include "invarc/integrator.hpp"
#include "invarc/nets.hpp"
#include "invarc/parallel.hpp"

namespace invarc::systems {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

struct Invariant {
  std::string name;
  bool conserved = true;  // false: monotone (e.g. entropy), reported but not penalized
  std::function<double(const VectorXd&)> value;
  std::function<ad::Var(ad::Var)> batch_value;  // (dim x B) -> (1 x B), differentiable
};

/// Builds both evaluation paths from one generic formula f(c), where c(i)
/// yields state component i as a double or as a (1 x B) tape row.
template <class F>
Invariant make_invariant(std::string name, bool conserved, F f) {
  return {std::move(name), conserved, [f](const VectorXd& x) { return f([&](int i) { return x(i); }); },
          [f](ad::Var x) { return f([&](int i) { return ad::rows(x, i, 1); }); }};
}

/// Constraint family used for violation metrics and the penalty baseline.
enum class ConstraintKind { none, simplex, cone, stoichiometric };

struct CatalogSystem {
  std::string id;
  std::vector<std::string> state_names;
  std::function<VectorXd(const VectorXd&, double)> rhs;
  std::function<VectorXd(Rng&)> sample_ic;
  std::vector<Invariant> invariants;
  double t_end = 10.0;
  long points = 200;
  int substeps = 10;    // fine RK4 steps per data interval
  long n_train = 100;   // desk-scale default trajectory count
  ConstraintKind constraint = ConstraintKind::none;
  MatrixXd molecular;   // stoichiometric systems only
  std::vector<int> cone_order;  // state indices of (t, x...) for cone systems
  nlohmann::ordered_json parameters;

  Index dim() const { return static_cast<Index>(state_names.size()); }
  double grid_step() const { return t_end / static_cast<double>(points - 1); }

  const Invariant& invariant(const std::string& name) const {
    for (const auto& q : invariants)
      if (q.name == name) return q;
    throw ConfigError("system '" + id + "' has no invariant named '" + name + "'");
  }
};

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline std::vector<Invariant> element_totals(const MatrixXd& m, const std::vector<std::string>& elements) {
  std::vector<Invariant> out;
  for (Index e = 0; e < m.rows(); ++e) {
    const VectorXd row = m.row(e).transpose();
    out.push_back(make_invariant("element_" + elements[e], true, [row](auto c) {
      auto acc = row(0) * c(0);
      for (int j = 1; j < static_cast<int>(row.size()); ++j) acc = acc + row(j) * c(j);
      return acc;
    }));
  }
  return out;
}

inline Invariant simplex_sum() {
  return {"sum", true, [](const VectorXd& x) { return x.sum(); }, [](ad::Var x) { return ad::colsum(x); }};
}

inline Invariant cone_residual() {
  return {"cone_residual", false, [](const VectorXd& z) { return z(0) - z.tail(z.size() - 1).norm(); },
          [](ad::Var z) { return ad::sub(ad::rows(z, 0, 1), ad::norm_cols(ad::rows(z, 1, z.rows() - 1))); }};
}


// --- individual systems ----------------------------------------------------

inline CatalogSystem sir() {
  const double beta = 0.4, gamma = 0.1;
  CatalogSystem s;
  s.id = "sir";
  s.state_names = {"S", "I", "R"};
  s.rhs = [=](const VectorXd& x, double) {
    VectorXd d(3);
    d(0) = -beta * x(0) * x(1);
    d(1) = beta * x(0) * x(1) - gamma * x(1);
    d(2) = gamma * x(1);
    return d;
  };
  s.sample_ic = [](Rng& rng) {
    VectorXd x(3);
    x(1) = uniform(rng, 0.01, 0.2);
    x(2) = uniform(rng, 0.0, 0.2);
    x(0) = 1.0 - x(1) - x(2);
    return x;
  };
  s.invariants = {simplex_sum()};
  s.t_end = 10;
  s.points = 200;
  s.constraint = ConstraintKind::simplex;
  s.parameters = {{"beta", beta}, {"gamma", gamma}, {"ic", "I~U[0.01,0.2], R~U[0,0.2], S=1-I-R"}};
  return s;
}

inline CatalogSystem chemical() {
  const double kf = 1.0, kr = 0.5;
  CatalogSystem s;
  s.id = "chemical";
  s.state_names = {"CO", "H2O", "CO2", "H2", "O2", "CH4"};
  MatrixXd m(3, 6);
  m << 1, 0, 1, 0, 0, 1,  //
      0, 2, 0, 2, 0, 4,   //
      1, 1, 2, 0, 2, 0;
  s.molecular = m;
  // Reaction vectors: water-gas shift, CO combustion, methane reforming.
  MatrixXd nu(6, 3);
  nu.col(0) << -1, -1, 1, 1, 0, 0;
  nu.col(1) << -2, 0, 2, 0, -1, 0;
  nu.col(2) << 1, -1, 0, 3, 0, -1;
  s.rhs = [=](const VectorXd& c, double) {
    VectorXd r(3);
    r(0) = kf * c(0) * c(1) - kr * c(2) * c(3);
    r(1) = kf * c(0) * c(0) * c(4) - kr * c(2) * c(2);
    r(2) = 0.0;  // reforming channel is inactive
    return VectorXd(nu * r);
  };
  s.sample_ic = [](Rng& rng) {
    VectorXd c(6);
    for (Index i = 0; i < 6; ++i) c(i) = uniform(rng, 0.1, 1.0);
    return c;
  };
  s.invariants = element_totals(m, {"C", "H", "O"});
  s.constraint = ConstraintKind::stoichiometric;
  s.parameters = {{"k_forward", kf}, {"k_reverse", kr}, {"k_reforming", 0.0}, {"ic", "c_i~U[0.1,1]"}};
  return s;
}

inline CatalogSystem nox() {
  const double k1 = 1, k2 = 1, k3 = 1, alpha = 1, K2 = 1, back = 0.5;
  CatalogSystem s;
  s.id = "nox";
  s.state_names = {"NO", "O2", "NO2", "N2O4", "N2O3"};
  MatrixXd m(2, 5);
  m << 1, 0, 1, 2, 2,  //
      1, 2, 2, 4, 3;
  s.molecular = m;
  MatrixXd nu(5, 3);
  nu.col(0) << -2, -1, 2, 0, 0;
  nu.col(1) << 0, 0, -2, 1, 0;
  nu.col(2) << -1, 0, -1, 0, 1;
  s.rhs = [=](const VectorXd& c, double) {
    const double no = c(0), o2 = c(1), no2 = c(2), n2o4 = c(3), n2o3 = c(4);
    VectorXd r(3);
    r(0) = k1 * no * no * o2 / std::pow(1 + alpha * no2, 2) - back * no2 * no2 * std::exp(-no2);
    r(1) = k2 * no2 * no2 / (1 + (no2 / K2) * (no2 / K2)) - back * n2o4;
    r(2) = k3 * no * no2 - back * std::pow(std::max(n2o3, 0.0), 0.8);
    return VectorXd(nu * r);
  };
  s.sample_ic = [](Rng& rng) {
    VectorXd c(5);
    for (Index i = 0; i < 5; ++i) c(i) = uniform(rng, 0.1, 1.0);
    return c;
  };
  s.invariants = element_totals(m, {"N", "O"});
  s.constraint = ConstraintKind::stoichiometric;
  s.parameters = {{"k1", k1}, {"k2", k2}, {"k3", k3}, {"alpha", alpha}, {"K2", K2},
                  {"back_reaction", back}, {"ic", "c_i~U[0.1,1]"}};
  return s;
}

inline CatalogSystem lorentz_spiral() {
  const double alpha = 0.08, omega = 0.4;
  CatalogSystem s;
  s.id = "lorentz_spiral";
  s.state_names = {"t", "x1", "x2"};
  s.rhs = [=](const VectorXd& z, double) {
    VectorXd d(3);
    d(0) = alpha * z(0);
    d(1) = alpha * z(1) - omega * z(2);
    d(2) = alpha * z(2) + omega * z(1);
    return d;
  };
  s.sample_ic = [](Rng& rng) {
    const double t0 = uniform(rng, 0.5, 1.5);
    const double th = uniform(rng, 0.0, 2 * std::numbers::pi);
    VectorXd z(3);
    z << t0, t0 * std::cos(th), t0 * std::sin(th);
    // On the boundary; make t >= |x| hold in floating point too.
    z(0) = std::max(t0, z.tail(2).norm());
    return z;
  };
  s.invariants = {cone_residual()};
  s.constraint = ConstraintKind::cone;
  s.cone_order = {0, 1, 2};
  s.parameters = {{"alpha", alpha}, {"omega", omega}, {"ic", "boundary: t~U[0.5,1.5], angle~U[0,2pi)"}};
  return s;
}

inline CatalogSystem radial_angular() {
  const double alpha = 1.0, K = 5.0, beta = 0.8, omega = 1.0, gamma = 0.5;
  const int mode = 2;
  CatalogSystem s;
  s.id = "radial_angular";
  s.state_names = {"t", "x1", "x2"};
  // r = |x|, theta = atan2(x2, x1); t is carried as a fixed multiple of r.
  s.rhs = [=](const VectorXd& z, double) {
    const double r = std::hypot(z(1), z(2));
    if (!(r > 0)) throw DomainError("radial_angular: r = 0 is outside the domain");
    const double th = std::atan2(z(2), z(1));
    const double growth = alpha * (1 - r / K) + beta * std::cos(mode * th);
    const double thdot = omega + gamma / (r * r);
    VectorXd d(3);
    d(0) = growth * z(0);
    d(1) = growth * z(1) - thdot * z(2);
    d(2) = growth * z(2) + thdot * z(1);
    return d;
  };
  s.sample_ic = [](Rng& rng) {
    const double r = uniform(rng, 0.5, 2.0);
    const double th = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double lam = uniform(rng, 1.0, 1.5);
    VectorXd z(3);
    z << lam * r, r * std::cos(th), r * std::sin(th);
    return z;
  };
  s.invariants = {cone_residual()};
  s.t_end = 10;
  s.points = 500;
  s.constraint = ConstraintKind::cone;
  s.cone_order = {0, 1, 2};
  s.parameters = {{"alpha", alpha}, {"K", K},         {"beta", beta},
                  {"omega", omega}, {"gamma", gamma}, {"angular_mode", mode},
                  {"ic", "r~U[0.5,2], angle~U[0,2pi), t=lambda*r with lambda~U[1,1.5]"}};
  return s;
}

inline CatalogSystem replicator() {
  const int n = 5;
  const double mu = 0.15, speed = 10.0;
  MatrixXd b(n, n);
  const double row[n] = {0, 1, -1, -1, 1};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) b(i, j) = speed * row[(j - i + n) % n];
  MatrixXd q = MatrixXd::Constant(n, n, mu / (n - 1));
  q.diagonal().setConstant(1 - mu);
  CatalogSystem s;
  s.id = "replicator";
  s.state_names = {"x1", "x2", "x3", "x4", "x5"};
  s.rhs = [=](const VectorXd& x, double) {
    const VectorXd fit = b * x;
    const double mean = x.dot(fit);
    return VectorXd(q.transpose() * x.cwiseProduct(fit) - mean * x);
  };
  s.sample_ic = [](Rng& rng) {
    std::gamma_distribution<double> g(1.0, 1.0);
    VectorXd x(5);
    for (Index i = 0; i < 5; ++i) x(i) = g(rng);
    return VectorXd(x / x.sum());
  };
  s.invariants = {simplex_sum()};
  s.t_end = 20;
  s.points = 400;
  s.substeps = 20;
  s.constraint = ConstraintKind::simplex;
  s.parameters = {{"N", n},
                  {"mu", mu},
                  {"speed", speed},
                  {"payoff_first_row", {0, 1, -1, -1, 1}},
                  {"ic", "Dirichlet(1,1,1,1,1)"}};
  return s;
}

inline CatalogSystem lotka_volterra() {
  const double a = 1.0, b = 0.5, d = 0.5, g = 0.5;
  CatalogSystem s;
  s.id = "lotka_volterra";
  s.state_names = {"x", "y"};
  s.rhs = [=](const VectorXd& z, double) {
    VectorXd out(2);
    out(0) = a * z(0) - b * z(0) * z(1);
    out(1) = d * z(0) * z(1) - g * z(1);
    return out;
  };
  s.sample_ic = [](Rng& rng) {
    VectorXd z(2);
    z << uniform(rng, 1.5, 3.0), uniform(rng, 0.5, 1.5);
    return z;
  };
  s.invariants = {make_invariant("H", true, [=](auto c) {
    using std::log;
    return d * c(0) - g * log(c(0)) + b * c(1) - a * log(c(1));
  })};
  s.t_end = 30;
  s.points = 1000;
  s.n_train = 1;
  s.parameters = {{"alpha", a}, {"beta", b}, {"delta", d}, {"gamma", g}, {"ic", "x~U[1.5,3], y~U[0.5,1.5]"}};
  return s;
}

inline CatalogSystem damped_oscillator() {
  const double gamma = 0.15, omega = 1.0;
  CatalogSystem s;
  s.id = "damped_oscillator";
  s.state_names = {"q", "p"};
  s.rhs = [=](const VectorXd& z, double) {
    VectorXd out(2);
    out(0) = z(1);
    out(1) = -omega * omega * z(0) - gamma * z(1);
    return out;
  };
  s.sample_ic = [](Rng& rng) {
    VectorXd z(2);
    z << uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5);
    return z;
  };
  s.invariants = {
      make_invariant("E", false, [=](auto c) { return 0.5 * (c(1) * c(1)) + (0.5 * omega * omega) * (c(0) * c(0)); })};
  s.t_end = 30;
  s.points = 1000;
  s.n_train = 1;
  s.parameters = {{"gamma", gamma}, {"omega", omega}, {"ic", "q,p~U[-1.5,1.5]"}};
  return s;
}

inline CatalogSystem thermomechanical() {
  const double gamma = 0.15, omega = 1.0, cv = 1.0;
  CatalogSystem s;
  s.id = "thermomechanical";
  s.state_names = {"q", "p", "theta"};
  s.rhs = [=](const VectorXd& z, double) {
    VectorXd out(3);
    out(0) = z(1);
    out(1) = -omega * omega * z(0) - gamma * z(1);
    out(2) = gamma * z(1) * z(1) / cv;
    return out;
  };
  s.sample_ic = [](Rng& rng) {
    VectorXd z(3);
    z << uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5), uniform(rng, 0.0, 0.5);
    return z;
  };
  s.invariants = {make_invariant("E", true,
                                 [=](auto c) {
                                   return 0.5 * (c(1) * c(1)) + (0.5 * omega * omega) * (c(0) * c(0)) + cv * c(2);
                                 }),
                  make_invariant("S", false, [=](auto c) {
                    using std::log;
                    return cv * log(1.0 + c(2));
                  })};
  s.t_end = 30;
  s.points = 1000;
  s.n_train = 1;
  s.parameters = {{"gamma", gamma}, {"omega", omega}, {"Cv", cv}, {"entropy", "Cv*log(1+theta)"},
                  {"ic", "q,p~U[-1.5,1.5], theta~U[0,0.5]"}};
  return s;
}

inline CatalogSystem extended_pendulum() {
  CatalogSystem s;
  s.id = "extended_pendulum";
  s.state_names = {"u", "v", "r"};
  auto grad_k = [](const VectorXd& z) {
    const double u = z(0), v = z(1), r = z(2);
    VectorXd g(3);
    g(0) = u + r - 3 * u * u - v * v;
    g(1) = std::sin(v) - 2 * u * v;
    g(2) = u;
    return g;
  };
  s.rhs = [=](const VectorXd& z, double) {
    const double u = z(0), v = z(1);
    MatrixXd b(3, 3);
    b << 0, -1, -2 * v,  //
        1, 0, 2 * u,     //
        2 * v, -2 * u, 0;
    return VectorXd(b * grad_k(z));
  };
  s.sample_ic = [](Rng& rng) {
    const double p = uniform(rng, -0.5, 0.5), q = uniform(rng, -0.5, 0.5), c = uniform(rng, -0.2, 0.2);
    VectorXd z(3);
    z << p, q, p * p + q * q + c;
    return z;
  };
  s.invariants = {make_invariant("K", true,
                                 [](auto c) {
                                   using std::cos;
                                   return 0.5 * (c(0) * c(0)) - cos(c(1)) + c(0) * c(2) - c(0) * c(0) * c(0) -
                                          c(0) * c(1) * c(1);
                                 }),
                  make_invariant("casimir", true, [](auto c) { return c(2) - c(0) * c(0) - c(1) * c(1); })};
  s.t_end = 30;
  s.points = 1000;
  s.n_train = 1;
  s.parameters = {{"ic", "p,q~U[-0.5,0.5], c~U[-0.2,0.2], (u,v,r)=(p,q,p^2+q^2+c)"}};
  return s;
}

inline CatalogSystem two_body() {
  const double g = 1.0;
  CatalogSystem s;
  s.id = "two_body";
  s.state_names = {"x1", "x2", "y1", "y2", "vx1", "vx2", "vy1", "vy2"};
  s.rhs = [=](const VectorXd& z, double) {
    const double dx = z(1) - z(0), dy = z(3) - z(2);
    const double r2 = dx * dx + dy * dy;
    if (!(r2 > 0)) throw DomainError("two_body: collision");
    const double inv = g / (r2 * std::sqrt(r2));
    VectorXd out(8);
    out.head(4) = z.tail(4);
    out(4) = dx * inv;
    out(5) = -dx * inv;
    out(6) = dy * inv;
    out(7) = -dy * inv;
    return out;
  };
  s.sample_ic = [=](Rng& rng) {
    const double rho = uniform(rng, 0.8, 1.2);
    const double phi = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double speed = 0.5 * std::sqrt(2 * g / rho) * uniform(rng, 0.9, 1.1);
    const double c = std::cos(phi), sn = std::sin(phi);
    VectorXd z(8);
    // Body 1 at -rho/2, body 2 at +rho/2 along the angle; velocities opposite.
    z << -0.5 * rho * c, 0.5 * rho * c, -0.5 * rho * sn, 0.5 * rho * sn,  //
        speed * sn, -speed * sn, -speed * c, speed * c;
    return z;
  };
  s.invariants = {make_invariant("H", true,
                                 [=](auto c) {
                                   using std::pow;
                                   const auto dx = c(1) - c(0);
                                   const auto dy = c(3) - c(2);
                                   const auto kinetic = 0.5 * (c(4) * c(4) + c(5) * c(5) + c(6) * c(6) + c(7) * c(7));
                                   return kinetic - g * pow(dx * dx + dy * dy, -0.5);
                                 }),
                  make_invariant("px", true, [](auto c) { return c(4) + c(5); }),
                  make_invariant("py", true, [](auto c) { return c(6) + c(7); }),
                  make_invariant("L", true, [](auto c) { return c(0) * c(6) + c(1) * c(7) - c(2) * c(4) - c(3) * c(5); })};
  s.t_end = 10;
  s.points = 500;
  s.substeps = 20;
  s.parameters = {{"G", g}, {"m1", 1.0}, {"m2", 1.0},
                  {"ic", "separation~U[0.8,1.2], angle~U[0,2pi), circular speed x U[0.9,1.1]"}};
  return s;
}

}  // namespace detail

inline const std::vector<std::string>& catalog_ids() {
  static const std::vector<std::string> ids = {
      "sir",           "chemical",          "nox",              "lorentz_spiral",   "radial_angular", "replicator",
      "lotka_volterra", "damped_oscillator", "thermomechanical", "extended_pendulum", "two_body"};
  return ids;
}

inline CatalogSystem get_system(const std::string& id) {
  using namespace detail;
  static const std::map<std::string, CatalogSystem (*)()> table = {
      {"sir", sir},
      {"chemical", chemical},
      {"nox", nox},
      {"lorentz_spiral", lorentz_spiral},
      {"radial_angular", radial_angular},
      {"replicator", replicator},
      {"lotka_volterra", lotka_volterra},
      {"damped_oscillator", damped_oscillator},
      {"thermomechanical", thermomechanical},
      {"extended_pendulum", extended_pendulum},
      {"two_body", two_body},
  };
  auto it = table.find(id);
  if (it == table.end()) throw ConfigError("unknown catalog system '" + id + "'");
  return it->second();
}

inline VectorXd eval_true_rhs(const CatalogSystem& sys, const VectorXd& x, double t = 0.0) {
  if (x.size() != sys.dim()) throw DimensionError("eval_true_rhs: state dimension mismatch");
  return sys.rhs(x, t);
}

inline double analytic_invariant(const CatalogSystem& sys, const std::string& name, const VectorXd& x) {
  return sys.invariant(name).value(x);
}

inline VectorXd sample_ic(const CatalogSystem& sys, Rng& rng) { return sys.sample_ic(rng); }

/// Seed for trajectory i of a dataset.
inline std::uint64_t trajectory_seed(std::uint64_t seed, long i) {
  return nets::derive_seed(seed, "trajectory" + std::to_string(i));
}

/// Batched right-hand side over columns.
inline integrator::Rhs batched_rhs(const CatalogSystem& sys) {
  return [&sys](const MatrixXd& x, const Eigen::RowVectorXd& t) {
    MatrixXd out(x.rows(), x.cols());
    for (Index c = 0; c < x.cols(); ++c) out.col(c) = sys.rhs(x.col(c), t(c));
    return out;
  };
}

/// Fine-step reference solution sampled on the uniform data grid.
inline integrator::Trajectory simulate_truth(const CatalogSystem& sys, const VectorXd& x0, double t_end, long points) {
  if (points < 2) throw ContractError("simulate_truth: need at least two grid points");
  const double h = t_end / static_cast<double>(points - 1);
  auto tr = integrator::rollout(batched_rhs(sys), x0, h, points - 1, nullptr, 0.0, sys.substeps);
  tr.state_names = sys.state_names;
  return tr;
}

inline std::vector<integrator::Trajectory> generate_dataset(const CatalogSystem& sys, long n_traj, double t_end,
                                                            long points, std::uint64_t seed) {
  if (n_traj < 1) throw ContractError("generate_dataset: need at least one trajectory");
  std::vector<integrator::Trajectory> out(n_traj);
  parallel_for(n_traj, [&](long i) {
    Rng rng(trajectory_seed(seed, i));
    out[i] = simulate_truth(sys, sys.sample_ic(rng), t_end, points);
  });
  return out;
}

/// Largest drift of any conserved invariant over a dataset.
inline double max_invariant_drift(const CatalogSystem& sys, const std::vector<integrator::Trajectory>& data) {
  double worst = 0;
  for (const auto& tr : data)
    for (const auto& q : sys.invariants) {
      if (!q.conserved) continue;
      const double q0 = q.value(tr.states.row(0).transpose());
      for (Index i = 0; i < tr.points(); ++i)
        worst = std::max(worst, std::abs(q.value(tr.states.row(i).transpose()) - q0));
    }
  return worst;
}

inline void write_dataset(const std::filesystem::path& dir, const CatalogSystem& sys,
                          const std::vector<integrator::Trajectory>& data, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["system"] = sys.id;
  m["seed"] = seed;
  m["trajectories"] = data.size();
  m["t_end"] = data.empty() ? 0.0 : data.front().times(data.front().points() - 1);
  m["points"] = data.empty() ? 0 : data.front().points();
  m["substeps"] = sys.substeps;
  m["state"] = sys.state_names;
  m["parameters"] = sys.parameters;
  std::ofstream(dir / "manifest.json") << m.dump(2) << "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "traj_%04zu.csv", i);
    integrator::write_csv((dir / name).string(), data[i]);
  }
}

}  // namespace invarc::systems
