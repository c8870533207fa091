#include <gtest/gtest.h>

#include <random>

#include "checks.hpp"
#include "invarc/constructions_algebraic.hpp"
#include "invarc/integrator.hpp"

using namespace invarc;
using fields::Mat;
using Eigen::VectorXd;

namespace {

nets::MlpConfig small_net() {
  nets::MlpConfig c;
  c.hidden_dim = 16;
  return c;
}

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(v.size());
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

/// Random store: default initialization plus Gaussian noise.
nets::ParamStore random_store(const nets::ParamSchema& schema, std::uint64_t seed, double noise = 0.3) {
  nets::ParamStore store(schema);
  store.initialize(seed);
  std::mt19937_64 rng(seed);
  store.values() += checks::normal(rng, store.size(), 1, noise);
  return store;
}

}  // namespace

// ---------------------------------------------------------------------------
// Simplex

TEST(Simplex, EmbeddingExamples) {
  // Zero components are floored at 1e-12 before the square root.
  EXPECT_NEAR((fields::simplex_embed(vec({1, 0, 0})) - vec({1, 0, 0})).norm(), 0.0, 2e-6);
  const VectorXd u = fields::simplex_embed(vec({0.25, 0.25, 0.5}));
  EXPECT_NEAR((u - vec({0.5, 0.5, std::sqrt(0.5)})).norm(), 0.0, 1e-15);
  EXPECT_NEAR(u.norm(), 1.0, 1e-15);
  const VectorXd w = fields::simplex_embed(VectorXd::Constant(3, 1.0 / 3));
  EXPECT_NEAR(w.norm(), 1.0, 1e-15);
  EXPECT_NEAR(w.maxCoeff() - w.minCoeff(), 0.0, 1e-15);
  EXPECT_NEAR((fields::simplex_decode(u) - vec({0.25, 0.25, 0.5})).norm(), 0.0, 1e-15);
}

TEST(Simplex, EmbeddingRejectsInfeasibleStates) {
  EXPECT_THROW(fields::simplex_embed(vec({0.5, 0.6, 0.1})), ContractError);
  EXPECT_THROW(fields::simplex_embed(vec({1.2, -0.2})), ContractError);
}

TEST(Simplex, SymmetricNetOutputGivesZeroField) {
  // Zero weights and a symmetric bias matrix: skew part vanishes.
  nets::ParamSchema schema;
  fields::SimplexField f(schema, "F", 3, small_net());
  nets::ParamStore store(schema);
  const Mat r = Mat::Random(3, 3);
  const Mat sym = r + r.transpose();
  store.view(f.net().bias_slices().back()) = Eigen::Map<const VectorXd>(sym.data(), 9);
  const Mat u = fields::simplex_embed(vec({0.2, 0.3, 0.5}));
  EXPECT_EQ(fields::evaluate(f, store, u), Mat::Zero(3, 1));
}

TEST(Simplex, FieldIsTangentToSphere) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    nets::ParamSchema schema;
    const Eigen::Index n = 2 + trial % 5;
    fields::SimplexField f(schema, "F", n, small_net());
    const auto store = random_store(schema, trial);
    Mat u = checks::normal(rng, n, 16);
    u.colwise().normalize();
    const Mat du = fields::evaluate(f, store, u);
    for (Eigen::Index c = 0; c < u.cols(); ++c) {
      EXPECT_LE(std::abs(u.col(c).dot(du.col(c))), 1e-12 * std::max(1.0, du.col(c).norm()));
      // Recovered x' = 2 u o u' sums to zero.
      EXPECT_LE(std::abs((2 * u.col(c).cwiseProduct(du.col(c))).sum()), 1e-12 * std::max(1.0, du.col(c).norm()));
    }
  }
}

TEST(Simplex, TrajectoryStaysOnSimplex) {
  nets::ParamSchema schema;
  fields::SimplexField f(schema, "F", 4, small_net());
  const auto store = random_store(schema, 5, 0.1);
  const VectorXd u0 = fields::simplex_embed(vec({0.1, 0.2, 0.3, 0.4}));
  const auto rhs = [&](const Mat& z, const integrator::Time& t) { return fields::evaluate(f, store, z, t); };
  const auto zs = integrator::rollout_batch(rhs, u0, 0.0, 0.01, 1000);
  for (const auto& z : zs) {
    const VectorXd x = fields::simplex_decode(z.col(0));
    EXPECT_LE(std::abs(z.col(0).norm() - 1.0), 1e-9);
    EXPECT_LE(std::abs(x.sum() - 1.0), 1e-9);
    EXPECT_GE(x.minCoeff(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Lorentz cone

TEST(Lorentz, InteriorPassesThrough) {
  const VectorXd v = vec({-3, 1, 7});
  EXPECT_EQ(fields::lorentz_project(vec({2, 0.5, 0}), v), v);
}

TEST(Lorentz, BoundaryExample) {
  const VectorXd p = fields::lorentz_project(vec({1, 1, 0}), vec({0, 1, 0}));
  EXPECT_NEAR((p - vec({0.5, 0.5, 0})).norm(), 0.0, 1e-15);
  // a' = u^T b' on the boundary face.
  EXPECT_NEAR(p(0), p(1), 1e-15);
  // Inward directions are left alone.
  EXPECT_EQ(fields::lorentz_project(vec({1, 1, 0}), vec({1, 0.5, 0})), vec({1, 0.5, 0}));
}

TEST(Lorentz, ApexBranches) {
  const VectorXd z = VectorXd::Zero(3);
  EXPECT_EQ(fields::lorentz_project(z, vec({-2, 1, 0})), VectorXd::Zero(3));
  EXPECT_EQ(fields::lorentz_project(z, vec({2, 1, 0})), vec({2, 1, 0}));
  const VectorXd p = fields::lorentz_project(z, vec({0, 2, 0}));
  EXPECT_NEAR((p - vec({1, 1, 0})).norm(), 0.0, 1e-15);
}

TEST(Lorentz, OutsideStateIsAViabilityError) {
  EXPECT_THROW(fields::lorentz_project(vec({0.5, 1, 0}), vec({1, 0, 0})), ViabilityError);
  EXPECT_THROW(fields::lorentz_project(vec({1, 0}), vec({1, 0, 0})), DimensionError);
}

TEST(Lorentz, ProjectionPostconditionsOnRandomPairs) {
  const auto rep = checks::lorentz_postconditions(17, 10000);
  EXPECT_GT(rep.interior, 0);
  EXPECT_GT(rep.boundary, 0);
  EXPECT_GT(rep.apex_inside, 0);
  EXPECT_GT(rep.apex_polar, 0);
  EXPECT_GT(rep.apex_partial, 0);
  EXPECT_LE(rep.worst, 1e-12);
  EXPECT_LE(rep.batch_mismatch, 1e-15);
}

TEST(Lorentz, LookAheadProjectsNearBoundaryStates) {
  // Just inside the boundary with a strongly outward field: treated as boundary.
  fields::LorentzOptions opt;
  ad::Tape tape;
  const VectorXd z = vec({1 + 1e-4, 1, 0});
  const VectorXd v = vec({0, 1, 0});
  const Mat out = fields::detail::lorentz_tangent(tape.constant(z), tape.constant(v), opt).value();
  EXPECT_NEAR((out.col(0) - vec({0.5, 0.5, 0})).norm(), 0.0, 1e-15);
  // Far inside: untouched.
  const Mat far = fields::detail::lorentz_tangent(tape.constant(vec({2, 1, 0})), tape.constant(v), opt).value();
  EXPECT_EQ(far.col(0), v);
  // Clearly outside: viability error.
  EXPECT_THROW(fields::detail::lorentz_tangent(tape.constant(vec({0.9, 1, 0})), tape.constant(v), opt),
               ViabilityError);
}

TEST(Lorentz, TrajectoriesStayInCone) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    nets::ParamSchema schema;
    fields::LorentzField f(schema, "f", 2, small_net());
    // Init scale. Much larger weights can slide a boundary trajectory into the
    // apex, where RK4 curvature error exceeds the tolerance.
    const auto store = random_store(schema, 100 + trial, 0.0);
    Mat z0(3, 3);
    // Apex, boundary and interior starts.
    z0.col(0).setZero();
    const VectorXd x = checks::normal(rng, 2, 1);
    z0.col(1) << x.norm(), x;
    z0.col(2) << x.norm() + 0.5, x;
    const auto rhs = [&](const Mat& z, const integrator::Time& t) { return fields::evaluate(f, store, z, t); };
    const auto zs = integrator::rollout_batch(rhs, z0, 0.0, 0.02, 1000);
    for (const auto& z : zs)
      for (Eigen::Index c = 0; c < z.cols(); ++c) EXPECT_LE(fields::cone_violation(z.col(c)), 1e-7);
  }
}

// ---------------------------------------------------------------------------
// PSD cone

TEST(Psd, HandFactor) {
  Mat l(2, 2);
  l << 1, 0, 2, 3;
  Mat p(2, 2);
  p << 1, 2, 2, 13;
  EXPECT_EQ(fields::psd_reconstruct(l), p);
  EXPECT_EQ(fields::psd_from_coords(vec({1, 2, 3}), 2), p);
}

TEST(Psd, ZeroFlowKeepsMatrixConstant) {
  nets::ParamSchema schema;
  fields::PsdField f(schema, "f", 2, small_net());
  nets::ParamStore store(schema);
  const VectorXd l0 = vec({1, 2, 3});
  const auto rhs = [&](const Mat& z, const integrator::Time& t) { return fields::evaluate(f, store, z, t); };
  const auto zs = integrator::rollout_batch(rhs, l0, 0.0, 0.1, 10);
  EXPECT_EQ(zs.back().col(0), l0);
}

TEST(Psd, RandomFlowStaysPsdAndSymmetric) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    nets::ParamSchema schema;
    fields::PsdField f(schema, "f", 3, small_net());
    const auto store = random_store(schema, trial);
    const auto rhs = [&](const Mat& z, const integrator::Time& t) { return fields::evaluate(f, store, z, t); };
    const auto zs = integrator::rollout_batch(rhs, checks::normal(rng, 6, 2), 0.0, 0.01, 100);
    for (const auto& z : zs)
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        const Mat p = fields::psd_from_coords(z.col(c), 3);
        EXPECT_EQ(p, p.transpose());
        Eigen::SelfAdjointEigenSolver<Mat> eig(p);
        EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
      }
  }
}

// ---------------------------------------------------------------------------
// Centre of mass

TEST(CenterOfMass, MeanSubtractionByHand) {
  // 2 bodies in 2D, unit masses, zero weights: the net outputs its bias as acceleration.
  nets::ParamSchema schema;
  fields::ComField f(schema, "a", vec({1, 1}), 2, small_net());
  nets::ParamStore store(schema);
  store.view(schema.find("a.layer2.bias")) = vec({1, 0, 0, 0});
  VectorXd s = VectorXd::Zero(8);
  s.tail(4) = vec({3, -1, 3, -1});  // identical velocities
  const VectorXd d = fields::evaluate(f, store, s).col(0);
  EXPECT_EQ(d.head(4), VectorXd::Zero(4));
  EXPECT_EQ(d.tail(4), vec({0.5, 0, -0.5, 0}));
}

TEST(CenterOfMass, WeightedSumsVanish) {
  std::mt19937_64 rng(7);
  const VectorXd m = vec({1, 2, 0.5});
  nets::ParamSchema schema;
  fields::ComField f(schema, "a", m, 3, small_net());
  const auto store = random_store(schema, 7);
  const Mat s = checks::normal(rng, 18, 32);
  const Mat d = fields::evaluate(f, store, s);
  for (Eigen::Index c = 0; c < d.cols(); ++c)
    EXPECT_LE(fields::com_sums(d.col(c), m, 3).cwiseAbs().maxCoeff(), 1e-13 * std::max(1.0, d.col(c).norm()));
}

TEST(CenterOfMass, RejectsBadMasses) {
  EXPECT_THROW(fields::com_projector(vec({1, 0}), 2), ConfigError);
  EXPECT_THROW(fields::com_projector(VectorXd(), 2), ConfigError);
}

// ---------------------------------------------------------------------------
// Stoichiometric

TEST(Stoich, WaterSystemRateDirection) {
  Mat m(2, 3);
  m << 2, 0, 2, 0, 2, 1;
  nets::ParamSchema schema;
  fields::StoichField f(schema, "r", m, small_net());
  nets::ParamStore store(schema);
  for (double r : {0.0, 1.0, -0.7}) {
    store.view(schema.find("r.layer2.bias")) = vec({r});
    const VectorXd cdot = fields::evaluate(f, store, vec({1, 1, 0})).col(0);
    EXPECT_EQ(cdot, r * vec({-2, -1, 2}));
  }
}

TEST(Stoich, NoxFieldConservesElements) {
  const auto nox = systems::get_system("nox");
  const Mat& m = nox.molecular;
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    nets::ParamSchema schema;
    fields::StoichField f(schema, "r", m, small_net());
    const auto store = random_store(schema, trial);
    const Mat c = checks::uniform(rng, 5, 4, 0, 2);
    const Mat cdot = fields::evaluate(f, store, c, 0.3);
    // Recompute M B independently of the field.
    EXPECT_EQ(m * f.basis(), Mat::Zero(2, f.basis().cols()));
    EXPECT_LE((m * cdot).cwiseAbs().maxCoeff(), 1e-13 * std::max(1.0, cdot.cwiseAbs().maxCoeff()));
  }
}

TEST(Stoich, TrivialNullSpaceIsRejected) {
  nets::ParamSchema schema;
  EXPECT_THROW(fields::StoichField(schema, "r", Mat::Identity(3, 3), small_net()), ConfigError);
}
