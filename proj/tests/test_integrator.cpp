#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "checks.hpp"
#include "invarc/integrator.hpp"
#include "invarc/systems.hpp"

using namespace invarc;
using integrator::Mat;
using integrator::Time;
using Eigen::VectorXd;

namespace {

Mat col(std::initializer_list<double> v) {
  Mat out(v.size(), 1);
  Eigen::Index i = 0;
  for (double x : v) out(i++, 0) = x;
  return out;
}

const integrator::Rhs kGrowth = [](const Mat& x, const Time&) { return x; };
const integrator::Rhs kOscillator = [](const Mat& x, const Time&) {
  Mat d(2, x.cols());
  d.row(0) = x.row(1);
  d.row(1) = -x.row(0);
  return d;
};

/// Endpoint sup-norm error of a rollout with step h against a fine reference.
double endpoint_error(const systems::CatalogSystem& sys, const VectorXd& x0, double t_end, double h) {
  const auto rhs = systems::batched_rhs(sys);
  const long n = std::lround(t_end / h);
  const Mat coarse = integrator::rollout_batch(rhs, x0, 0.0, h, n).back();
  const Mat fine = integrator::rollout_batch(rhs, x0, 0.0, h / 64, n * 64).back();
  return (coarse - fine).cwiseAbs().maxCoeff();
}

}  // namespace

TEST(Rk4, ZeroFieldIsIdentity) {
  const Mat x = col({1.5, -2, 3});
  const auto zero = [](const Mat& s, const Time&) { return Mat(Mat::Zero(s.rows(), s.cols())); };
  EXPECT_EQ(integrator::rk4_step(zero, x, 0.0, 0.1), x);
}

TEST(Rk4, ExponentialMatchesTaylorMap) {
  for (double h : {0.01, 0.1, 0.5}) {
    const Mat x = col({2.0, -1.0});
    const double g = 1 + h + h * h / 2 + h * h * h / 6 + h * h * h * h / 24;
    EXPECT_LE((integrator::rk4_step(kGrowth, x, 0.0, h) - g * x).cwiseAbs().maxCoeff(), 1e-15 * g * 2);
  }
}

TEST(Rk4, OscillatorLocalErrorIsFifthOrder) {
  // One step from (1, 0); exact solution (cos h, -sin h). Energy change scales as h^5 or better.
  double prev_err = 0, prev_energy = 0;
  for (double h : {0.04, 0.02, 0.01}) {
    const Mat x = integrator::rk4_step(kOscillator, col({1, 0}), 0.0, h);
    const double err = std::hypot(x(0, 0) - std::cos(h), x(1, 0) + std::sin(h));
    const double energy = std::abs(0.5 * x.squaredNorm() - 0.5);
    if (prev_err > 0) {
      EXPECT_NEAR(prev_err / err, 32.0, 2.0);
      EXPECT_GE(prev_energy / energy, 30.0);
    }
    EXPECT_LE(err, std::pow(h, 5));
    prev_err = err;
    prev_energy = energy;
  }
}

TEST(Rk4, NonFiniteStageIsADivergenceError) {
  const auto bad = [](const Mat& s, const Time& t) {
    Mat d = Mat::Ones(s.rows(), s.cols());
    if (t(0) > 0.04) d(0, 0) = std::nan("");
    return d;
  };
  try {
    integrator::rollout_batch(bad, col({0.0}), 0.0, 0.1, 5);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 0);
    EXPECT_EQ(e.stage(), 2);
  }
  EXPECT_THROW(integrator::rk4_step(kGrowth, col({1}), 0.0, 0.0), ContractError);
  EXPECT_THROW(integrator::rollout_batch(kGrowth, col({1}), 0.0, 0.1, 0), ContractError);
}

TEST(Rollout, SingleStepEqualsRk4Step) {
  const Mat x0 = col({0.3, 0.7});
  const auto tr = integrator::rollout(kOscillator, x0, 0.05, 1);
  ASSERT_EQ(tr.points(), 2);
  EXPECT_EQ(tr.states.row(0).transpose(), x0.col(0));
  EXPECT_EQ(tr.states.row(1).transpose(), integrator::rk4_step(kOscillator, x0, 0.0, 0.05).col(0));
  EXPECT_EQ(tr.times, (VectorXd(2) << 0.0, 0.05).finished());
}

TEST(Rollout, GridIsUniformAndIncreasing) {
  const auto tr = integrator::rollout(kGrowth, col({1}), 10.0 / 199, 199);
  for (Eigen::Index i = 1; i < tr.points(); ++i) {
    EXPECT_GT(tr.times(i), tr.times(i - 1));
    EXPECT_DOUBLE_EQ(tr.times(i), i * (10.0 / 199));
  }
}

TEST(Rollout, BatchColumnsAreIndependent) {
  const Mat x0 = (Mat(2, 3) << 1, 0, 0.5, 0, 1, -0.5).finished();
  const auto zs = integrator::rollout_batch(kOscillator, x0, 0.0, 0.1, 50);
  for (Eigen::Index c = 0; c < 3; ++c) {
    const auto single = integrator::rollout_batch(kOscillator, Mat(x0.col(c)), 0.0, 0.1, 50);
    EXPECT_EQ(zs.back().col(c), single.back().col(0));
  }
}

TEST(Rollout, DiagnosticsAtEveryPoint) {
  const auto tr = integrator::rollout(kOscillator, col({1, 0}), 0.01, 100,
                                      [](const VectorXd& x) { return VectorXd::Constant(1, 0.5 * x.squaredNorm() - 0.5); });
  ASSERT_EQ(tr.diagnostics.rows(), 101);
  EXPECT_EQ(tr.diagnostics(0, 0), 0.0);
  EXPECT_LE(tr.diagnostics.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Rollout, SimplexModelKeepsUnitSum) {
  const auto model = compiler::build_model(checks::catalog_ir("sir"), 1);
  const auto store = model->init_params(1);
  const auto xs = model->simulate(store, col({0.9, 0.1, 0.0}), 0.0, 0.01, 1000);
  ASSERT_EQ(xs.size(), 1001u);
  for (const auto& x : xs) {
    EXPECT_LE(std::abs(x.sum() - 1.0), 1e-9);
    EXPECT_GE(x.minCoeff(), 0.0);
  }
}

TEST(Rollout, SirTruthAgainstFineGrid) {
  const auto sir = systems::get_system("sir");
  const auto rhs = systems::batched_rhs(sir);
  const Mat x0 = col({0.9, 0.1, 0.0});
  const Mat coarse = integrator::rollout_batch(rhs, x0, 0.0, 0.05, 200).back();
  const Mat fine = integrator::rollout_batch(rhs, x0, 0.0, 1e-4, 100000).back();
  EXPECT_LE((coarse - fine).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Rollout, FourthOrderConvergence) {
  EXPECT_GE(checks::rk4_order_ratio(0.1), 12.0);
  EXPECT_LE(checks::rk4_order_ratio(0.1), 20.0);
  for (const std::string id : {"sir", "lotka_volterra"}) {
    const auto sys = systems::get_system(id);
    const VectorXd x0 = id == "sir" ? VectorXd(col({0.9, 0.1, 0.0})) : VectorXd(col({1.0, 1.5}));
    const double ratio = endpoint_error(sys, x0, 10.0, 0.2) / endpoint_error(sys, x0, 10.0, 0.1);
    EXPECT_GE(ratio, 12.0) << id;
    EXPECT_LE(ratio, 20.0) << id;
  }
}

TEST(Csv, RoundTripIsExact) {
  auto tr = integrator::rollout(kOscillator, col({1.0 / 3, std::exp(1.0)}), 0.1, 20,
                                [](const VectorXd& x) { return VectorXd::Constant(1, x.sum()); });
  tr.state_names = {"q", "p"};
  tr.diagnostic_names = {"sum"};
  const auto path = (std::filesystem::temp_directory_path() / "invarc_csv_roundtrip.csv").string();
  integrator::write_csv(path, tr);
  const auto back = integrator::read_csv(path, 2);
  EXPECT_EQ(back.times, tr.times);
  EXPECT_EQ(back.states, tr.states);
  EXPECT_EQ(back.diagnostics, tr.diagnostics);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "t,q,p,sum");
  std::filesystem::remove(path);
}
