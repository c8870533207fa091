#pragma once

// Fields for the energetic family: latent Poisson, port-Hamiltonian and
// GENERIC dynamics, plus tangent-space projection onto first integrals.

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "invarc/errors.hpp"
#include "invarc/field.hpp"
#include "invarc/linalg.hpp"
#include "invarc/nets.hpp"

namespace invarc::fields {

/// Latent split z = (q, p, c) with q, p in R^d and c in R^k.
struct Split {
  Index d = 1;
  Index k = 0;
  Index dim() const { return 2 * d + k; }
};

namespace detail {

/// J0 g = (dK/dp, -dK/dq, 0). The Casimir block is never computed.
inline Var canonical_apply(Var g, const Split& s) {
  Var dq = ad::rows(g, s.d, s.d);
  Var dp = ad::scale(ad::rows(g, 0, s.d), -1.0);
  if (s.k == 0) return ad::vcat({dq, dp});
  return ad::vcat({dq, dp, ad::zeros(g.tape(), s.k, g.cols())});
}

inline void check_split(const Split& s) {
  if (s.d < 1 || s.k < 0) throw ConfigError("split: need d >= 1 and k >= 0");
}

}  // namespace detail

/// z' = J0 grad K(z).
class PoissonField : public Field {
 public:
  PoissonField(nets::ParamSchema& schema, const std::string& prefix, Split split, nets::MlpConfig cfg)
      : split_(split) {
    detail::check_split(split);
    cfg.in_dim = split.dim();
    cfg.out_dim = 1;
    k_net_ = nets::Mlp(schema, prefix + ".K", cfg);
  }

  Index dim() const override { return split_.dim(); }
  const Split& split() const { return split_; }
  const nets::Mlp& k_net() const { return k_net_; }

  std::pair<Var, Var> energy(BoundParams& p, Var z) const { return k_net_.value_and_input_grad(p, z); }

  Var eval(BoundParams& p, Var z, const Time&) const override {
    return detail::canonical_apply(energy(p, z).second, split_);
  }

 protected:
  Split split_;
  nets::Mlp k_net_;
};

/// z' = [J0 - L L^T] grad K(z).
class PortHamiltonianField final : public PoissonField {
 public:
  PortHamiltonianField(nets::ParamSchema& schema, const std::string& prefix, Split split, nets::MlpConfig cfg)
      : PoissonField(schema, prefix, split, cfg), dissipation_(schema, prefix + ".R", split.dim(), cfg) {}

  const nets::TrilNet& dissipation() const { return dissipation_; }

  Var eval(BoundParams& p, Var z, const Time&) const override {
    const Index n = split_.dim();
    Var g = energy(p, z).second;
    Var l = dissipation_.forward(p, z);
    Var damp = ad::bmv(l, ad::bmtv(l, g, n, n), n, n);
    return ad::sub(detail::canonical_apply(g, split_), damp);
  }

 private:
  nets::TrilNet dissipation_;
};

/// z' = J0 grad K + P_K Mhat P_K grad S with S depending on the Casimirs only.
class GenericField final : public PoissonField {
 public:
  GenericField(nets::ParamSchema& schema, const std::string& prefix, Split split, nets::MlpConfig cfg,
               double eps_pk = 1e-8)
      : PoissonField(schema, prefix, split, cfg), eps_(eps_pk) {
    if (split.k < 1) throw ConfigError("generic: entropy needs at least one Casimir coordinate (k >= 1)");
    if (!(eps_pk > 0)) throw ConfigError("generic: eps_pk must be positive");
    nets::MlpConfig sc = cfg;
    sc.in_dim = split.k;
    sc.out_dim = 1;
    s_net_ = nets::Mlp(schema, prefix + ".S", sc);
    friction_ = nets::TrilNet(schema, prefix + ".M", split.dim(), cfg);
  }

  double eps_pk() const { return eps_; }
  const nets::Mlp& s_net() const { return s_net_; }
  const nets::TrilNet& friction_net() const { return friction_; }

  /// (S, grad_z S) with grad_z S = (0, 0, grad_c S~).
  std::pair<Var, Var> entropy(BoundParams& p, Var z) const {
    Var c = ad::rows(z, 2 * split_.d, split_.k);
    auto [s, gc] = s_net_.value_and_input_grad(p, c);
    Var grad = ad::vcat({ad::zeros(p.tape(), 2 * split_.d, z.cols()), gc});
    return {s, grad};
  }

  /// y - g (g^T y) / (|g|^2 + eps), columnwise.
  Var project_energy(Var g, Var y) const {
    Var denom = ad::add_scalar(ad::dot_cols(g, g), eps_);
    return ad::sub(y, ad::hadamard(g, ad::divide(ad::dot_cols(g, y), denom)));
  }

  Var friction(BoundParams& p, Var z, Var g, Var gs) const {
    const Index n = split_.dim();
    Var l = friction_.forward(p, z);
    Var w = project_energy(g, gs);
    Var mw = ad::bmv(l, ad::bmtv(l, w, n, n), n, n);
    return project_energy(g, mw);
  }

  Var eval(BoundParams& p, Var z, const Time&) const override {
    Var g = energy(p, z).second;
    Var gs = entropy(p, z).second;
    return ad::add(detail::canonical_apply(g, split_), friction(p, z, g, gs));
  }

 private:
  double eps_;
  nets::Mlp s_net_;
  nets::TrilNet friction_;
};

// ---------------------------------------------------------------------------
// First-integral projection

/// Number of constraint rows found to vanish identically (vacuous constraints).
inline std::atomic<long>& vacuous_row_count() {
  static std::atomic<long> count{0};
  return count;
}

namespace detail {

/// y = (I - J^T (J J^T)^+ J) f per column. J is stored as a row-major (m x n)
/// flattened batch. Backward assumes the rank of J is locally constant.
inline Var integral_project(Var jflat, Var f, Index m, Index n, double tol) {
  if (jflat.rows() != m * n || f.rows() != n || jflat.cols() != f.cols())
    throw DimensionError("first_integral: dimension mismatch");
  const Index batch = f.cols();
  Mat y(n, batch);
  std::vector<Mat> gplus(batch);
  for (Index c = 0; c < batch; ++c) {
    const Mat j = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        jflat.value().col(c).data(), m, n);
    for (Index i = 0; i < m; ++i)
      if (j.row(i).norm() == 0.0) ++vacuous_row_count();
    Mat g = j * j.transpose();
    g = 0.5 * (g + g.transpose());
    gplus[c] = linalg::pinv_gram(g, tol);
    const Eigen::VectorXd fc = f.value().col(c);
    y.col(c) = fc - j.transpose() * (gplus[c] * (j * fc));
  }
  const int ij = jflat.id(), iff = f.id();
  return f.tape().record(std::move(y), {jflat, f}, [ij, iff, m, n, gplus](Tape& tp, int self) {
    const Mat& up = tp.grad(self);
    const Mat& jv = tp.value(ij);
    const Mat& fv = tp.value(iff);
    const Mat& yv = tp.value(self);
    Mat gj = Mat::Zero(m * n, up.cols());
    Mat gf(n, up.cols());
    for (Index c = 0; c < up.cols(); ++c) {
      const Mat j = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          jv.col(c).data(), m, n);
      const Eigen::VectorXd g = up.col(c);
      const Eigen::VectorXd r = g - j.transpose() * (gplus[c] * (j * g));
      const Eigen::VectorXd a = gplus[c] * (j * g);
      const Eigen::VectorXd lam = gplus[c] * (j * fv.col(c));
      const Mat dj = -(a * yv.col(c).transpose() + lam * r.transpose());
      for (Index i = 0; i < m; ++i)
        for (Index k = 0; k < n; ++k) gj(i * n + k, c) = dj(i, k);
      gf.col(c) = r;
    }
    tp.accumulate(ij, gj);
    tp.accumulate(iff, gf);
  });
}

}  // namespace detail

/// An analytically known conserved quantity with its gradient.
struct KnownIntegral {
  std::string id;
  Index dim = 0;  // required state dimension, 0 for any
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Var(Tape&, Var)> gradient;  // (n x B) -> (n x B)
};

/// Registry of known integrals. Two-body integrals use the ordering
/// (x1, x2, y1, y2, vx1, vx2, vy1, vy2) with unit masses.
inline KnownIntegral known_integral(const std::string& id) {
  auto constant_row = [](Eigen::VectorXd row) {
    return [row](Tape& t, Var u) { return t.constant(row.replicate(1, u.cols())); };
  };
  if (id == "px" || id == "py") {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(8);
    const Index off = id == "px" ? 4 : 6;
    row(off) = row(off + 1) = 1;
    return {id, 8, [off](const Eigen::VectorXd& s) { return s(off) + s(off + 1); }, constant_row(row)};
  }
  if (id == "angmom") {
    return {id, 8,
            [](const Eigen::VectorXd& s) { return s(0) * s(6) + s(1) * s(7) - s(2) * s(4) - s(3) * s(5); },
            [](Tape& t, Var u) {
              // dL/d(x1,x2,y1,y2,vx1,vx2,vy1,vy2) = (vy1, vy2, -vx1, -vx2, -y1, -y2, x1, x2)
              Mat perm = Mat::Zero(8, 8);
              perm(0, 6) = perm(1, 7) = 1;
              perm(2, 4) = perm(3, 5) = -1;
              perm(4, 2) = perm(5, 3) = -1;
              perm(6, 0) = perm(7, 1) = 1;
              return ad::matmul(t.constant(perm), u);
            }};
  }
  if (id == "sum") {
    return {id, 0, [](const Eigen::VectorXd& s) { return s.sum(); },
            [](Tape& t, Var u) { return t.constant(Mat::Ones(u.rows(), u.cols())); }};
  }
  throw ConfigError("unknown known-integral id '" + id + "' (expected px, py, angmom or sum)");
}

/// u' = (I - P(u)) f(u), P the orthogonal projector onto span of the
/// constraint gradients (known rows first, then learned).
class FirstIntegralField final : public Field {
 public:
  FirstIntegralField(nets::ParamSchema& schema, const std::string& prefix, Index n, int learned,
                     const std::vector<std::string>& known, nets::MlpConfig cfg, double pinv_tol = 1e-10)
      : n_(n), pinv_tol_(pinv_tol) {
    if (n < 1) throw ConfigError("first_integral: state dimension must be positive");
    if (learned < 0) throw ConfigError("first_integral: negative learned count");
    for (const auto& id : known) {
      auto k = known_integral(id);
      if (k.dim != 0 && k.dim != n)
        throw ConfigError("first_integral: known integral '" + id + "' needs state dimension " + std::to_string(k.dim));
      known_.push_back(std::move(k));
    }
    if (learned + static_cast<Index>(known_.size()) == 0) throw ConfigError("first_integral: no constraints");
    nets::MlpConfig base = cfg;
    base.in_dim = n;
    base.out_dim = n;
    base_ = nets::Mlp(schema, prefix + ".base", base);
    nets::MlpConfig vc = cfg;
    vc.in_dim = n;
    vc.out_dim = 1;
    for (int i = 0; i < learned; ++i) learned_.emplace_back(schema, prefix + ".V" + std::to_string(i), vc);
  }

  Index dim() const override { return n_; }
  Index constraint_count() const { return static_cast<Index>(known_.size() + learned_.size()); }
  const std::vector<KnownIntegral>& known() const { return known_; }
  const std::vector<nets::Mlp>& learned() const { return learned_; }

  /// Stacked constraint gradients, row-major flattened (m*n x B).
  Var constraint_jacobian(BoundParams& p, Var u) const {
    std::vector<Var> rows;
    for (const auto& k : known_) rows.push_back(k.gradient(p.tape(), u));
    for (const auto& v : learned_) rows.push_back(v.value_and_input_grad(p, u).second);
    return ad::vcat(rows);
  }

  /// Values of the learned integrals (learned x B).
  Var learned_values(BoundParams& p, Var u) const {
    std::vector<Var> vals;
    for (const auto& v : learned_) vals.push_back(v.forward(p, u));
    return ad::vcat(vals);
  }

  Var eval(BoundParams& p, Var u, const Time&) const override {
    Var f = base_.forward(p, u);
    return detail::integral_project(constraint_jacobian(p, u), f, constraint_count(), n_, pinv_tol_);
  }

 private:
  Index n_;
  double pinv_tol_;
  std::vector<KnownIntegral> known_;
  std::vector<nets::Mlp> learned_;
  nets::Mlp base_;
};

/// Plain MLP field x' = f(x), the unconstrained baseline.
class FreeField final : public Field {
 public:
  FreeField(nets::ParamSchema& schema, const std::string& prefix, Index n, nets::MlpConfig cfg) : n_(n) {
    cfg.in_dim = n;
    cfg.out_dim = n;
    net_ = nets::Mlp(schema, prefix, cfg);
  }
  Index dim() const override { return n_; }
  Var eval(BoundParams& p, Var x, const Time&) const override { return net_.forward(p, x); }

 private:
  Index n_;
  nets::Mlp net_;
};

// ---------------------------------------------------------------------------
// Physical-coordinate view of a latent Poisson model

/// du/dt = (dg/du)^{-1} J0 grad K(g(u)) at a single point.
inline Eigen::VectorXd poisson_physical_field(const nets::Inn& inn, const PoissonField& field,
                                              const ParamStore& store, const Eigen::VectorXd& u) {
  const Mat jac = ad::jacobian(
      [&](Tape& t, Var x) {
        BoundParams p(store, t, false);
        return inn.forward(p, x);
      },
      u);
  Eigen::JacobiSVD<Mat> svd(jac);
  const auto& sv = svd.singularValues();
  if (sv(sv.size() - 1) <= 0 || sv(0) / sv(sv.size() - 1) > 1e8)
    throw ConditioningError("poisson_physical_field: coordinate map Jacobian is ill-conditioned");
  Tape tape;
  BoundParams p(store, tape, false);
  Var z = inn.forward(p, tape.constant(u));
  const Eigen::VectorXd zdot = field.eval(p, z, Time::Zero(1)).value().col(0);
  return jac.partialPivLu().solve(zdot);
}

/// Induced structure matrix J(u) = (dg/du)^{-1} J0 (dg/du)^{-T}.
inline Mat induced_poisson_tensor(const nets::Inn& inn, const Split& split, const ParamStore& store,
                                  const Eigen::VectorXd& u) {
  const Mat jac = ad::jacobian(
      [&](Tape& t, Var x) {
        BoundParams p(store, t, false);
        return inn.forward(p, x);
      },
      u);
  const Index n = split.dim();
  Mat j0 = Mat::Zero(n, n);
  for (Index i = 0; i < split.d; ++i) {
    j0(i, split.d + i) = 1;
    j0(split.d + i, i) = -1;
  }
  const Mat inv = jac.inverse();
  return inv * j0 * inv.transpose();
}

}  // namespace invarc::fields
