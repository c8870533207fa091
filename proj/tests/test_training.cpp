#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "checks.hpp"
#include "invarc/training.hpp"

using namespace invarc;
using ad::Tape;
using ad::Var;
using training::Mat;
using Eigen::VectorXd;

namespace {

const std::string kSmallSir = R"(system sir {
  state S, I, R;
  reference sir;
}
invariant simplex on (S, I, R)
net hidden 16 layers 2 activation silu
)";

std::vector<Var> constants(Tape& tape, const std::vector<Mat>& ms) {
  std::vector<Var> out;
  for (const auto& m : ms) out.push_back(tape.constant(m));
  return out;
}

std::vector<integrator::Trajectory> small_sir_data(long n_traj, long points = 20) {
  const auto sys = systems::get_system("sir");
  return systems::generate_dataset(sys, n_traj, sys.t_end * (points - 1) / (sys.points - 1), points, 5);
}

training::TrainConfig quick_config(long epochs, training::Baseline b = training::Baseline::none) {
  training::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = 3;
  cfg.baseline = b;
  cfg.batch = 16;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

TEST(Loss, HarmonicWeightsHandExample) {
  // n = 4, every step off by a unit vector: (1/4)(1 + 1/2 + 1/3 + 1/4) = 25/48.
  Tape tape;
  std::vector<Mat> targets(5, Mat::Zero(2, 1));
  std::vector<Mat> preds(4, (Mat(2, 1) << 1, 0).finished());
  const double l = training::rollout_loss(constants(tape, preds), targets).value()(0, 0);
  EXPECT_NEAR(l, 25.0 / 48.0, 1e-15);
}

TEST(Loss, StepWeightRatioIsOneOverK) {
  for (int k = 1; k <= 4; ++k) {
    Tape tape;
    std::vector<Mat> targets(5, Mat::Zero(1, 1));
    std::vector<Mat> preds(4, Mat::Zero(1, 1));
    preds[k - 1](0, 0) = 1;
    const double l = training::rollout_loss(constants(tape, preds), targets).value()(0, 0);
    EXPECT_DOUBLE_EQ(l * 4.0, 1.0 / k);
  }
}

TEST(Loss, OneStepIsPlainMse) {
  std::mt19937_64 rng(1);
  Tape tape;
  const Mat target = checks::normal(rng, 3, 8);
  const Mat pred = checks::normal(rng, 3, 8);
  const double l = training::rollout_loss({tape.constant(pred)}, {Mat::Zero(3, 8), target}).value()(0, 0);
  EXPECT_NEAR(l, (pred - target).colwise().squaredNorm().mean(), 1e-14);
}

TEST(Loss, PerfectPredictionsGiveZero) {
  const auto ir = checks::compile(kSmallSir);
  const auto model = compiler::build_model(ir, 2);
  const auto store = model->init_params(2);
  const Mat x0 = (Mat(3, 2) << 0.9, 0.5, 0.1, 0.3, 0.0, 0.2).finished();
  const auto xs = model->simulate(store, x0, 0.0, 0.05, 4);
  Tape tape;
  nets::BoundParams p(store, tape, false);
  const double l = training::multistep_loss(*model, p, xs, 0.05, 4, integrator::Time::Zero(2)).value()(0, 0);
  EXPECT_LE(l, 1e-28);
}

TEST(Loss, WindowTooShortIsRejected) {
  const auto model = compiler::build_model(checks::compile(kSmallSir), 2);
  const auto store = model->init_params(2);
  Tape tape;
  nets::BoundParams p(store, tape, false);
  std::vector<Mat> w(3, (Mat(3, 1) << 0.9, 0.1, 0.0).finished());
  EXPECT_THROW(training::multistep_loss(*model, p, w, 0.05, 4, integrator::Time::Zero(1)), ContractError);
}

TEST(Penalty, LambdaZeroAndSyntheticViolation) {
  const auto sir = systems::get_system("sir");
  const auto viol = training::violation_fn(sir);
  Tape tape;
  // Sum 1.1 with non-negative entries: violation 0.1 at every step.
  std::vector<Mat> preds(4, (Mat(3, 2) << 0.6, 0.2, 0.3, 0.5, 0.2, 0.4).finished());
  const auto pv = constants(tape, preds);
  const double mv = training::mean_violation(pv, preds[0], viol).value()(0, 0);
  EXPECT_NEAR(10.0 * mv, 1.0, 1e-14);
  EXPECT_EQ(0.0 * mv, 0.0);
  // Feasible predictions: no penalty.
  std::vector<Mat> ok(4, (Mat(3, 1) << 0.5, 0.3, 0.2).finished());
  EXPECT_NEAR(training::mean_violation(constants(tape, ok), ok[0], viol).value()(0, 0), 0.0, 1e-16);
}

TEST(Penalty, LambdaZeroMatchesMultistepLoss) {
  const auto model = compiler::build_unconstrained({"S", "I", "R"}, nets::MlpConfig{3, 3, 16, 2}, 4);
  const auto store = model->init_params(4);
  const auto data = small_sir_data(1, 6);
  std::vector<Mat> w;
  for (Eigen::Index k = 0; k < 5; ++k) w.push_back(data[0].states.row(k).transpose());
  Tape tape;
  nets::BoundParams p(store, tape, false);
  const auto t0 = integrator::Time::Zero(1);
  const double base = training::multistep_loss(*model, p, w, 0.05, 4, t0).value()(0, 0);
  const double pen = training::penalty_loss(*model, p, w, 0.05, 4, t0, 0.0,
                                            training::violation_fn(systems::get_system("sir")))
                         .value()(0, 0);
  EXPECT_EQ(base, pen);
}

TEST(Pinns, ConstantOffsetContributesDeltaSquared) {
  const auto sir = systems::get_system("sir");
  const double delta = 0.03;
  std::vector<Mat> window(5, (Mat(3, 1) << 0.7, 0.2, 0.1).finished());
  std::vector<Mat> preds(4, window[0].array() + delta / 3);
  Tape tape;
  const double pen = training::invariant_penalty(constants(tape, preds), window, sir.invariants).value()(0, 0);
  EXPECT_NEAR(pen, delta * delta, 1e-16);
  // Conserved predictions add nothing.
  std::vector<Mat> exact(4, window[0]);
  EXPECT_EQ(training::invariant_penalty(constants(tape, exact), window, sir.invariants).value()(0, 0), 0.0);
}

TEST(Pinns, TwoBodySumsFourTerms) {
  const auto tb = systems::get_system("two_body");
  ASSERT_EQ(tb.invariants.size(), 4u);
  systems::Rng rng(2);
  std::vector<Mat> window(3, systems::sample_ic(tb, rng));
  std::vector<Mat> preds(2, window[0].array() + 0.01);
  Tape tape;
  const auto pv = constants(tape, preds);
  double parts = 0;
  for (const auto& q : tb.invariants) parts += training::invariant_penalty(pv, window, {q}).value()(0, 0);
  EXPECT_NEAR(training::invariant_penalty(pv, window, tb.invariants).value()(0, 0), parts, 1e-15);
  EXPECT_GT(parts, 0.0);
}

// ---------------------------------------------------------------------------
// Optimizer pieces

TEST(Optimizer, ClipPreservesDirection) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    VectorXd g = checks::normal(rng, 50, 1, 3.0);
    const VectorXd orig = g;
    const double before = training::clip_gradient(g, 1.0);
    EXPECT_EQ(before, orig.norm());
    EXPECT_NEAR(g.norm(), 1.0, 1e-14);
    EXPECT_NEAR(g.dot(orig) / (g.norm() * orig.norm()), 1.0, 1e-12);
  }
  VectorXd small = VectorXd::Constant(4, 0.1);
  const VectorXd copy = small;
  training::clip_gradient(small, 1.0);
  EXPECT_EQ(small, copy);
}

TEST(Optimizer, CosineSchedule) {
  EXPECT_DOUBLE_EQ(training::cosine_lr(1e-3, 0, 300), 1e-3);
  EXPECT_NEAR(training::cosine_lr(1e-3, 150, 300), 5e-4, 1e-18);
  EXPECT_NEAR(training::cosine_lr(1e-3, 300, 300), 0.0, 1e-18);
  for (long e = 1; e < 300; ++e) EXPECT_LT(training::cosine_lr(1e-3, e, 300), training::cosine_lr(1e-3, e - 1, 300));
}

TEST(Optimizer, AdamWFirstStepByHand) {
  // After one step the bias-corrected ratio is g / (|g| + eps).
  training::AdamW opt;
  opt.weight_decay = 0.1;
  VectorXd theta = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
  const VectorXd g = (VectorXd(3) << 0.5, -1e-3, 0.0).finished();
  const VectorXd before = theta;
  opt.step(theta, g, 0.01);
  for (int i = 0; i < 3; ++i) {
    const double expected = before(i) * (1 - 0.01 * 0.1) - 0.01 * g(i) / (std::abs(g(i)) + 1e-8);
    EXPECT_NEAR(theta(i), expected, 1e-15);
  }
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, WindowCountAndGathering) {
  const auto data = small_sir_data(3, 10);
  const auto refs = training::make_windows(data, 4);
  EXPECT_EQ(refs.size(), 3u * 6u);
  integrator::Time t0;
  const auto w = training::gather(data, refs, 7, 2, 4, &t0);
  ASSERT_EQ(w.size(), 5u);
  EXPECT_EQ(w[0].cols(), 2);
  EXPECT_EQ(w[2].col(0), data[refs[7].traj].states.row(refs[7].start + 2).transpose());
  EXPECT_EQ(t0(1), data[refs[8].traj].times(refs[8].start));
  EXPECT_THROW(training::make_windows(small_sir_data(1, 4), 4), ConfigError);
}

TEST(Train, DeterministicAndLossDecreases) {
  const auto model = compiler::build_model(checks::compile(kSmallSir), 3);
  const auto data = small_sir_data(4);
  const auto sys = systems::get_system("sir");
  auto cfg = quick_config(8);
  cfg.lr = 3e-3;
  const auto a = training::train(*model, data, sys, cfg, model->init_params(3));
  const auto b = training::train(*model, data, sys, cfg, model->init_params(3));
  EXPECT_EQ(a.params.values(), b.params.values());
  ASSERT_EQ(a.log.size(), 8u);
  EXPECT_LT(a.log.back().loss, a.log.front().loss);
}

TEST(Train, ResumeContinuesBitForBit) {
  const auto model = compiler::build_model(checks::compile(kSmallSir), 3);
  const auto data = small_sir_data(3);
  const auto sys = systems::get_system("sir");
  const auto cfg = quick_config(4);
  const auto straight = training::train(*model, data, sys, cfg, model->init_params(3));

  const auto dir = std::filesystem::temp_directory_path() / "invarc_resume_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  training::TrainOptions opts;
  opts.checkpoint_dir = dir;
  opts.stop_after_epoch = 1;
  training::train(*model, data, sys, cfg, model->init_params(3), opts);
  auto st = training::load_state(dir, *model);
  EXPECT_EQ(st.next_epoch, 2);
  const auto resumed = training::train(*model, data, sys, cfg, model->init_params(3), {}, std::move(st));
  EXPECT_EQ(resumed.params.values(), straight.params.values());
  EXPECT_EQ(resumed.log.size(), 4u);
  std::filesystem::remove_all(dir);
}

TEST(Train, CompiledViolationIndependentOfEpoch) {
  const auto model = compiler::build_model(checks::compile(kSmallSir), 5);
  const auto data = small_sir_data(4);
  auto cfg = quick_config(5);
  cfg.lr = 1e-2;
  const auto st = training::train(*model, data, systems::get_system("sir"), cfg, model->init_params(5));
  EXPECT_LE(st.log.front().violation, 1e-12);
  EXPECT_LE(st.log.back().violation, 1e-12);
}

TEST(Train, LogLinesAreJson) {
  const auto model = compiler::build_unconstrained({"S", "I", "R"}, nets::MlpConfig{3, 3, 16, 2}, 1);
  const auto data = small_sir_data(2);
  std::stringstream log;
  training::TrainOptions opts;
  opts.log_stream = &log;
  training::train(*model, data, systems::get_system("sir"), quick_config(2, training::Baseline::penalty),
                  model->init_params(1), opts);
  std::string line;
  long n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "lr", "loss", "violation", "skipped", "wall_time"}) EXPECT_TRUE(j.contains(key));
    EXPECT_EQ(j["epoch"], n++);
  }
  EXPECT_EQ(n, 2);
}

TEST(Train, BaselineModelMismatchIsRejected) {
  const auto compiled = compiler::build_model(checks::compile(kSmallSir), 1);
  const auto free = compiler::build_unconstrained({"S", "I", "R"}, nets::MlpConfig{3, 3, 16, 2}, 1);
  const auto data = small_sir_data(1);
  const auto sir = systems::get_system("sir");
  EXPECT_THROW(training::train(*compiled, data, sir, quick_config(1, training::Baseline::penalty),
                               compiled->init_params(1)),
               ConfigError);
  EXPECT_THROW(training::train(*free, data, sir, quick_config(1), free->init_params(1)), ConfigError);
  EXPECT_THROW(training::violation_fn(systems::get_system("lotka_volterra")), ConfigError);
  auto bad = quick_config(1);
  bad.lr = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
