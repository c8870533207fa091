#pragma once

// Fields for the geometric/algebraic invariants: simplex, Lorentz cone, PSD
// cone, centre of mass and stoichiometric conservation.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "invarc/errors.hpp"
#include "invarc/field.hpp"
#include "invarc/linalg.hpp"
#include "invarc/nets.hpp"

namespace invarc::fields {

// ---------------------------------------------------------------------------
// Simplex

inline constexpr double kEmbedEps = 1e-12;

/// Square-root map from the probability simplex onto the unit sphere.
inline Eigen::VectorXd simplex_embed(const Eigen::VectorXd& x) {
  if (x.size() == 0) throw DimensionError("simplex_embed: empty state");
  const double total = x.sum();
  if (!std::isfinite(total) || std::abs(total - 1.0) > 1e-3)
    throw ContractError("simplex_embed: components sum to " + std::to_string(total) + ", expected 1");
  if (x.minCoeff() < -1e-9) throw ContractError("simplex_embed: negative component");
  Eigen::VectorXd u(x.size());
  for (Index i = 0; i < x.size(); ++i) u(i) = std::sqrt(std::max(x(i), kEmbedEps));
  return u / u.norm();
}

inline Eigen::VectorXd simplex_decode(const Eigen::VectorXd& u) { return u.cwiseProduct(u); }

/// u' = A(u) u with A the skew part of an n x n network output.
class SimplexField final : public Field {
 public:
  SimplexField(nets::ParamSchema& schema, const std::string& prefix, Index n, nets::MlpConfig cfg) : n_(n) {
    if (n < 2) throw ConfigError("simplex: need at least two components");
    cfg.in_dim = n;
    cfg.out_dim = n * n;
    net_ = nets::Mlp(schema, prefix, cfg);
  }

  Index dim() const override { return n_; }
  const nets::Mlp& net() const { return net_; }

  Var eval(BoundParams& p, Var u, const Time&) const override {
    Var a = ad::skew_flat(net_.forward(p, u), n_);
    return ad::bmv(a, u, n_, n_);
  }

 private:
  Index n_;
  nets::Mlp net_;
};

// ---------------------------------------------------------------------------
// Lorentz cone  K = { (t, x) : t >= ||x|| }

/// Orthogonal projection of v = (a, b) onto the tangent cone of K at z = (t, x).
inline Eigen::VectorXd lorentz_project(const Eigen::VectorXd& z, const Eigen::VectorXd& v, double tol = 1e-9) {
  if (z.size() < 2 || v.size() != z.size()) throw DimensionError("lorentz_project: dimension mismatch");
  const Index n = z.size() - 1;
  const double t = z(0);
  const auto x = z.tail(n);
  const double scale = tol * (1.0 + z.norm());
  const double phi = t - x.norm();
  if (phi < -scale) throw ViabilityError("lorentz_project: state lies outside the cone");
  if (phi > scale) return v;

  const double a = v(0);
  const auto b = v.tail(n);
  Eigen::VectorXd out(v.size());
  if (z.norm() <= tol) {
    const double beta = b.norm();
    if (beta <= a) return v;
    if (beta <= -a) return Eigen::VectorXd::Zero(v.size());
    out(0) = 0.5 * (a + beta);
    out.tail(n) = (0.5 * (a + beta) / beta) * b;
    return out;
  }
  const Eigen::VectorXd u = x / x.norm();
  const double s = a - u.dot(b);
  if (s >= 0) return v;
  out(0) = a - 0.5 * s;
  out.tail(n) = b + 0.5 * s * u;
  return out;
}

struct LorentzOptions {
  double boundary_tol = 1e-9;
  // Look-ahead time: states within exit_horizon * (outward speed) of the
  // boundary, or within exit_horizon * |v| of the apex, are already treated as
  // boundary/apex points. Must be at least the integration step.
  double exit_horizon = 0.05;
  // Stage points may sit slightly outside K; beyond this relative distance
  // the field reports a viability error.
  double exit_tol = 1e-3;
};

namespace detail {

enum class ConeMode : int { pass, boundary, apex };

/// Batched projection with per-column case selection. Case selection uses
/// values only; the result is differentiated within the selected case.
inline Var lorentz_tangent(Var z, Var v, const LorentzOptions& opt) {
  const Mat& zv = z.value();
  const Mat& vv = v.value();
  const Index dim = zv.rows(), n = dim - 1, batch = zv.cols();
  if (vv.rows() != dim || vv.cols() != batch) throw DimensionError("lorentz field: dimension mismatch");
  std::vector<int> mode(batch);
  Mat out = vv;
  for (Index c = 0; c < batch; ++c) {
    const double t = zv(0, c);
    const Eigen::VectorXd x = zv.col(c).tail(n);
    const double zn = zv.col(c).norm();
    const double xn = x.norm();
    const double phi = t - xn;
    const double s = opt.boundary_tol * (1.0 + zn);
    if (!std::isfinite(phi)) throw DivergenceError("lorentz field: non-finite state");
    if (phi < -opt.exit_tol * (1.0 + zn)) throw ViabilityError("lorentz field: state left the cone");
    const double a = vv(0, c);
    const Eigen::VectorXd b = vv.col(c).tail(n);
    ConeMode m = ConeMode::pass;
    const bool near_apex = zn <= std::max(s, opt.exit_horizon * vv.col(c).norm());
    if (near_apex) {
      m = ConeMode::apex;
    } else if (xn <= s) {
      // On the axis away from the apex: interior unless t itself is tiny.
      m = phi > s ? ConeMode::pass : ConeMode::apex;
    } else {
      const Eigen::VectorXd u = x / xn;
      const double outward = u.dot(b) - a;
      if (phi <= std::max(s, opt.exit_horizon * outward) && outward > 0) m = ConeMode::boundary;
    }
    if (m == ConeMode::apex) {
      const double beta = b.norm();
      if (beta <= a) {
        m = ConeMode::pass;
      } else if (beta <= -a) {
        out.col(c).setZero();
      } else {
        out(0, c) = 0.5 * (a + beta);
        out.col(c).tail(n) = (0.5 * (a + beta) / beta) * b;
      }
    } else if (m == ConeMode::boundary) {
      const Eigen::VectorXd u = x / xn;
      const double sdiff = a - u.dot(b);
      out(0, c) = a - 0.5 * sdiff;
      out.col(c).tail(n) = b + 0.5 * sdiff * u;
    }
    mode[c] = static_cast<int>(m);
  }
  const int iz = z.id(), iv = v.id();
  return z.tape().record(std::move(out), {z, v}, [iz, iv, mode, n](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    const Mat& zv = tp.value(iz);
    const Mat& vv = tp.value(iv);
    Mat gz = Mat::Zero(zv.rows(), zv.cols());
    Mat gv = Mat::Zero(vv.rows(), vv.cols());
    for (Index c = 0; c < g.cols(); ++c) {
      const double ga = g(0, c);
      const Eigen::VectorXd gb = g.col(c).tail(n);
      const double a = vv(0, c);
      const Eigen::VectorXd b = vv.col(c).tail(n);
      switch (static_cast<ConeMode>(mode[c])) {
        case ConeMode::pass: gv.col(c) = g.col(c); break;
        case ConeMode::boundary: {
          const Eigen::VectorXd x = zv.col(c).tail(n);
          const double rho = x.norm();
          const Eigen::VectorXd u = x / rho;
          const double ugb = u.dot(gb);
          gv(0, c) = 0.5 * ga + 0.5 * ugb;
          gv.col(c).tail(n) = 0.5 * ga * u + gb - 0.5 * ugb * u;
          const Eigen::VectorXd gu = 0.5 * ga * b + 0.5 * ((a - u.dot(b)) * gb - ugb * b);
          gz.col(c).tail(n) = (gu - u * u.dot(gu)) / rho;
          break;
        }
        case ConeMode::apex: {
          const double beta = b.norm();
          if (beta <= -a || beta == 0.0) break;
          const Eigen::VectorXd bh = b / beta;
          const double bgb = bh.dot(gb);
          gv(0, c) = 0.5 * ga + 0.5 * bgb;
          gv.col(c).tail(n) = 0.5 * ga * bh + 0.5 * gb + (a / (2 * beta)) * (gb - bh * bgb);
          break;
        }
      }
    }
    tp.accumulate(iz, gz);
    tp.accumulate(iv, gv);
  });
}

}  // namespace detail

/// Projected field on K. The state is ordered (t, x).
class LorentzField final : public Field {
 public:
  LorentzField(nets::ParamSchema& schema, const std::string& prefix, Index n_space, nets::MlpConfig cfg,
               LorentzOptions opt = {})
      : dim_(n_space + 1), opt_(opt) {
    if (n_space < 1) throw ConfigError("lorentz_cone: need at least one space coordinate");
    cfg.in_dim = dim_;
    cfg.out_dim = dim_;
    net_ = nets::Mlp(schema, prefix, cfg);
  }

  Index dim() const override { return dim_; }
  const LorentzOptions& options() const { return opt_; }
  const nets::Mlp& net() const { return net_; }

  Var eval(BoundParams& p, Var z, const Time&) const override {
    return detail::lorentz_tangent(z, net_.forward(p, z), opt_);
  }

 private:
  Index dim_;
  LorentzOptions opt_;
  nets::Mlp net_;
};

inline double cone_violation(const Eigen::VectorXd& z) {
  return std::max(0.0, z.tail(z.size() - 1).norm() - z(0));
}

// ---------------------------------------------------------------------------
// PSD cone via Cholesky-style factors

inline Eigen::MatrixXd psd_reconstruct(const Eigen::MatrixXd& l) {
  linalg::require_square(l, "psd_reconstruct");
  Eigen::MatrixXd p = l * l.transpose();
  // Symmetrize exactly: both triangles share the same computed entry.
  for (Index i = 0; i < p.rows(); ++i)
    for (Index j = 0; j < i; ++j) p(j, i) = p(i, j);
  return p;
}

inline Eigen::MatrixXd psd_from_coords(const Eigen::VectorXd& coords, Index n) {
  return psd_reconstruct(nets::tril_from_coords(coords, n));
}

/// Unconstrained flow on the lower-triangle coordinates of L.
class PsdField final : public Field {
 public:
  PsdField(nets::ParamSchema& schema, const std::string& prefix, Index n, nets::MlpConfig cfg) : n_(n) {
    if (n < 1) throw ConfigError("psd: dimension must be positive");
    cfg.in_dim = nets::tri_size(n);
    cfg.out_dim = nets::tri_size(n);
    net_ = nets::Mlp(schema, prefix, cfg);
  }

  Index dim() const override { return nets::tri_size(n_); }
  Index matrix_dim() const { return n_; }

  Var eval(BoundParams& p, Var l, const Time&) const override { return net_.forward(p, l); }

 private:
  Index n_;
  nets::Mlp net_;
};

// ---------------------------------------------------------------------------
// Centre of mass. State: positions of every body (body-major, d coords each)
// followed by velocities in the same layout.

/// Removes the mass-weighted mean from each coordinate block.
inline Eigen::MatrixXd com_projector(const Eigen::VectorXd& masses, Index d) {
  if (masses.size() == 0 || d < 1) throw ConfigError("center_of_mass: need bodies and a positive dimension");
  for (Index i = 0; i < masses.size(); ++i)
    if (!(masses(i) > 0)) throw ConfigError("center_of_mass: masses must be positive");
  const Index nb = masses.size();
  const double total = masses.sum();
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(nb * d, nb * d);
  for (Index i = 0; i < nb; ++i)
    for (Index j = 0; j < nb; ++j)
      for (Index k = 0; k < d; ++k) p(i * d + k, j * d + k) -= masses(j) / total;
  return p;
}

class ComField final : public Field {
 public:
  ComField(nets::ParamSchema& schema, const std::string& prefix, Eigen::VectorXd masses, Index d, nets::MlpConfig cfg)
      : masses_(std::move(masses)), d_(d), proj_(com_projector(masses_, d)) {
    half_ = masses_.size() * d;
    cfg.in_dim = 2 * half_;
    cfg.out_dim = half_;
    net_ = nets::Mlp(schema, prefix, cfg);
  }

  Index dim() const override { return 2 * half_; }
  const Eigen::VectorXd& masses() const { return masses_; }
  Index space_dim() const { return d_; }

  Var eval(BoundParams& p, Var s, const Time&) const override {
    Var pm = p.tape().constant(proj_);
    Var accel = net_.forward(p, s);
    Var rdot = ad::matmul(pm, ad::rows(s, half_, half_));
    Var vdot = ad::matmul(pm, accel);
    return ad::vcat({rdot, vdot});
  }

 private:
  Eigen::VectorXd masses_;
  Index d_;
  Index half_ = 0;
  Eigen::MatrixXd proj_;
  nets::Mlp net_;
};

/// Mass-weighted sums of positions and velocities per coordinate.
inline Eigen::VectorXd com_sums(const Eigen::VectorXd& state, const Eigen::VectorXd& masses, Index d) {
  const Index nb = masses.size();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(2 * d);
  for (Index i = 0; i < nb; ++i)
    for (Index k = 0; k < d; ++k) {
      out(k) += masses(i) * state(i * d + k);
      out(d + k) += masses(i) * state(nb * d + i * d + k);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Stoichiometric conservation: c' = B r(c, t) with M B = 0.

class StoichField final : public Field {
 public:
  StoichField(nets::ParamSchema& schema, const std::string& prefix, Eigen::MatrixXd m, nets::MlpConfig cfg)
      : m_(std::move(m)) {
    b_ = linalg::nullspace_basis(m_);
    if (b_.cols() == 0) throw ConfigError("stoichiometric: no admissible dynamics (null space is trivial)");
    cfg.in_dim = m_.cols() + 1;
    cfg.out_dim = b_.cols();
    net_ = nets::Mlp(schema, prefix, cfg);
  }

  Index dim() const override { return m_.cols(); }
  const Eigen::MatrixXd& molecular() const { return m_; }
  const Eigen::MatrixXd& basis() const { return b_; }

  Var rates(BoundParams& p, Var c, const Time& t) const {
    Var tt = p.tape().constant(t);
    return net_.forward(p, ad::vcat({c, tt}));
  }

  Var eval(BoundParams& p, Var c, const Time& t) const override {
    return ad::matmul(p.tape().constant(b_), rates(p, c, t));
  }

 private:
  Eigen::MatrixXd m_;
  Eigen::MatrixXd b_;
  nets::Mlp net_;
};

}  // namespace invarc::fields
