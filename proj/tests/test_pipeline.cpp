#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "invarc/cli.hpp"

using namespace invarc;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "invarc");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  if (code != 0) ADD_FAILURE() << e.str();
  return code;
}

nlohmann::json load(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

// Small end-to-end run: train a compiled model and a baseline, evaluate both,
// then aggregate.
TEST(Pipeline, TrainEvalReport) {
  const auto root = fs::temp_directory_path() / "invarc_pipeline";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto spec = root / "sir_small.inv";
  std::ofstream(spec) << "system sir {\n  state S, I, R;\n  reference sir;\n}\n"
                         "invariant simplex on (S, I, R)\nnet hidden 16 layers 2\n";

  for (const std::string b : {"none", "unconstrained"}) {
    const auto dir = root / b;
    ASSERT_EQ(run({"train", "--spec", spec.string(), "--seed", "3", "--epochs", "3", "--trajectories", "3",
                   "--baseline", b, "--out", dir.string()}),
              0);
    EXPECT_TRUE(fs::exists(dir / "run.json"));
    EXPECT_TRUE(fs::exists(dir / "data" / "manifest.json"));
    std::ifstream log(dir / "train_log.jsonl");
    long lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    EXPECT_EQ(lines, 3);
    ASSERT_EQ(run({"eval", "--run", dir.string(), "--horizon-mult", "1,2", "--n-test", "3"}), 0);
    const auto ev = load(dir / "eval.json");
    EXPECT_EQ(ev["horizons"].size(), 2u);
    EXPECT_EQ(ev["horizons"]["2x"]["n_test"], 3);
  }

  const auto ours = load(root / "none" / "eval.json");
  const auto base = load(root / "unconstrained" / "eval.json");
  EXPECT_LE(ours["horizons"]["2x"]["violation"].get<double>(), 1e-8);
  EXPECT_GT(base["horizons"]["2x"]["violation"].get<double>(),
            ours["horizons"]["2x"]["violation"].get<double>());

  std::string csv;
  ASSERT_EQ(run({"report", (root / "none").string(), (root / "unconstrained").string()}, &csv), 0);
  std::istringstream in(csv);
  long rows = 0;
  for (std::string l; std::getline(in, l);) ++rows;
  EXPECT_EQ(rows, 1 + 2 * 2);
  EXPECT_NE(csv.find("sir,2x,none,"), std::string::npos);

  // Resuming a finished run trains nothing more and leaves the parameters unchanged.
  std::string msg;
  ASSERT_EQ(run({"train", "--spec", spec.string(), "--seed", "3", "--epochs", "3", "--trajectories", "3", "--out",
                 (root / "none").string(), "--resume"},
                &msg),
            0);
  EXPECT_NE(msg.find("for 3 epochs"), std::string::npos) << msg;
  fs::remove_all(root);
}
