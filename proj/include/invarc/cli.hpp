#pragma once

// Command-line driver: compile, simulate, dataset, train, eval, report.
// Exit codes: 0 ok, 1 usage or configuration error, 2 spec error,
// 3 numerical failure (divergence, viability, conditioning).

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "invarc/catalog_specs.hpp"
#include "invarc/compiler.hpp"
#include "invarc/errors.hpp"
#include "invarc/integrator.hpp"
#include "invarc/metrics.hpp"
#include "invarc/nets.hpp"
#include "invarc/systems.hpp"
#include "invarc/training.hpp"

namespace invarc::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

enum ExitCode : int { kOk = 0, kUsage = 1, kSpec = 2, kNumerical = 3 };

/// Usage problems detected after argument parsing (missing files and the like).
class UsageError : public Error {
 public:
  using Error::Error;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  out << text;
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

/// Spec text from --spec, or the built-in catalog spec of --system.
inline std::string resolve_spec(const std::string& spec_path, const std::string& system) {
  if (!spec_path.empty()) return read_file(spec_path);
  if (system.empty()) throw UsageError("need --spec or --system");
  const auto& specs = catalog_specs();
  auto it = specs.find(system);
  if (it == specs.end()) throw UsageError("no built-in spec for system '" + system + "'");
  return it->second;
}

inline compiler::GeometricIR compile_text(const std::string& text) {
  return compiler::lower(compiler::parse_spec(text));
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("malformed number '" + item + "' in list '" + s + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct CompileOptions {
  std::string spec;
  std::string out;  // empty: stdout
};

inline int cmd_compile(const CompileOptions& o, std::ostream& out) {
  const auto ir = compile_text(read_file(o.spec));
  const auto dump = compiler::dump_ir(ir);
  if (o.out.empty())
    out << dump;
  else
    write_file(o.out, dump);
  return kOk;
}

struct SimulateOptions {
  std::string spec;
  std::string system;
  std::uint64_t seed = 0;
  std::string ic;   // comma-separated physical state
  double h = 0.0;   // 0: the reference system's grid step, else 0.01
  long steps = 1000;
  std::string out;  // CSV path; empty: stdout
};

inline int cmd_simulate(const SimulateOptions& o, std::ostream& out) {
  const auto ir = compile_text(resolve_spec(o.spec, o.system));
  const auto model = compiler::build_model(ir, o.seed);
  const auto params = model->init_params(o.seed);
  std::optional<systems::CatalogSystem> ref;
  if (ir.reference != "none") ref = systems::get_system(ir.reference);

  Eigen::VectorXd x0;
  if (!o.ic.empty()) {
    const auto v = parse_list(o.ic);
    if (static_cast<Index>(v.size()) != model->state_dim())
      throw UsageError("--ic has " + std::to_string(v.size()) + " values, the state has " +
                       std::to_string(model->state_dim()));
    x0 = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
  } else if (ref) {
    systems::Rng rng(nets::derive_seed(o.seed, "ic"));
    x0 = ref->sample_ic(rng);
  } else {
    throw UsageError("spec has no reference system; pass --ic");
  }
  if (o.steps < 1) throw UsageError("--steps must be positive");
  const double h = o.h > 0 ? o.h : (ref ? ref->grid_step() : 0.01);

  std::vector<Mat> latent;
  const auto xs = model->simulate(params, x0, 0.0, h, o.steps, &latent);
  integrator::Trajectory tr;
  tr.times = integrator::uniform_grid(0.0, h, o.steps);
  tr.states.resize(o.steps + 1, model->state_dim());
  tr.diagnostics.resize(o.steps + 1, static_cast<Index>(model->diagnostic_names().size()));
  for (long k = 0; k <= o.steps; ++k) {
    tr.states.row(k) = xs[k].col(0).transpose();
    tr.diagnostics.row(k) = model->diagnostics(params, xs[k].col(0), latent[k].col(0)).transpose();
  }
  tr.state_names = ir.state;
  tr.diagnostic_names = model->diagnostic_names();
  if (o.out.empty()) {
    integrator::write_csv(out, tr);
  } else {
    if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
    integrator::write_csv(o.out, tr);
  }
  return kOk;
}

struct DatasetOptions {
  std::string system;
  std::uint64_t seed = 0;
  long trajectories = 0;  // 0: system default
  std::string out;
};

inline int cmd_dataset(const DatasetOptions& o) {
  const auto sys = systems::get_system(o.system);
  const long n = o.trajectories > 0 ? o.trajectories : sys.n_train;
  const auto data = systems::generate_dataset(sys, n, sys.t_end, sys.points, nets::derive_seed(o.seed, "data"));
  systems::write_dataset(o.out, sys, data, o.seed);
  return kOk;
}

struct TrainOptions {
  std::string spec;
  std::string system;
  std::uint64_t seed = 0;
  long epochs = 300;
  std::string baseline = "none";
  long trajectories = 0;  // 0: system default
  std::string out;
  bool resume = false;
};

/// Model for a run: the compiled field, or the free MLP for baselines.
inline std::unique_ptr<compiler::CompiledModel> run_model(const compiler::GeometricIR& ir, training::Baseline b,
                                                          std::uint64_t seed) {
  if (b == training::Baseline::none) return compiler::build_model(ir, seed);
  return compiler::build_unconstrained(ir.state, ir.net, seed);
}

inline int cmd_train(const TrainOptions& o, std::ostream& out) {
  if (o.out.empty()) throw UsageError("--out is required");
  const fs::path dir = o.out;
  const auto spec_text = resolve_spec(o.spec, o.system);
  const auto ir = compile_text(spec_text);
  std::string sys_id = o.system.empty() ? ir.reference : o.system;
  if (sys_id == "none") throw UsageError("spec has no reference system; pass --system");
  const auto sys = systems::get_system(sys_id);
  if (static_cast<Index>(ir.state.size()) != sys.dim())
    throw UsageError("spec state has " + std::to_string(ir.state.size()) + " variables, system '" + sys_id +
                     "' has " + std::to_string(sys.dim()));

  training::TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.baseline = training::parse_baseline(o.baseline);
  cfg.validate();
  const long n_traj = o.trajectories > 0 ? o.trajectories : sys.n_train;

  json run;
  run["system"] = sys_id;
  run["seed"] = o.seed;
  run["baseline"] = o.baseline;
  run["trajectories"] = n_traj;
  run["t_end"] = sys.t_end;
  run["points"] = sys.points;
  run["train"] = cfg.to_json();
  run["spec"] = spec_text;

  const fs::path ckpt = dir / "checkpoint";
  std::optional<training::TrainState> resume;
  const auto model = run_model(ir, cfg.baseline, o.seed);
  if (o.resume) {
    if (read_json(dir / "run.json").dump() != run.dump()) throw UsageError("--resume: run configuration differs from " + (dir / "run.json").string());
    resume = training::load_state(ckpt, *model);
  }
  fs::create_directories(dir);
  write_file(dir / "run.json", run.dump(2) + "\n");

  const auto data = systems::generate_dataset(sys, n_traj, sys.t_end, sys.points, nets::derive_seed(o.seed, "data"));
  if (!o.resume) systems::write_dataset(dir / "data", sys, data, nets::derive_seed(o.seed, "data"));

  std::ofstream log(dir / "train_log.jsonl");
  if (resume)
    for (const auto& e : resume->log) log << e.to_json().dump() << "\n";
  training::TrainOptions topt;
  topt.checkpoint_dir = ckpt;
  topt.log_stream = &log;
  const auto st = training::train(*model, data, sys, cfg, model->init_params(o.seed), topt, std::move(resume));
  out << "trained " << sys_id << " (" << o.baseline << ") for " << st.next_epoch << " epochs, final loss "
      << (st.log.empty() ? 0.0 : st.log.back().loss) << "\n";
  return kOk;
}

struct EvalOptions {
  std::string run;
  std::string horizons = "2,5,10";
  long n_test = 20;
  std::string out;  // default: <run>/eval.json
};

inline int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const fs::path dir = o.run;
  const auto run = read_json(dir / "run.json");
  const auto ir = compile_text(run["spec"].get<std::string>());
  const auto sys = systems::get_system(run["system"].get<std::string>());
  const auto baseline = training::parse_baseline(run["baseline"].get<std::string>());
  const auto seed = run["seed"].get<std::uint64_t>();
  const auto model = run_model(ir, baseline, seed);
  nets::ParamStore params(model->schema());
  nets::load_checkpoint(dir / "checkpoint", params);

  json rep;
  rep["run"] = fs::absolute(dir).lexically_normal().string();
  rep["system"] = sys.id;
  rep["baseline"] = run["baseline"];
  rep["seed"] = seed;
  auto& sections = rep["horizons"] = json::object();
  for (double m : parse_list(o.horizons)) {
    if (!(m > 0)) throw UsageError("horizon multipliers must be positive");
    metrics::EvalOptions eo;
    eo.n_test = o.n_test;
    eo.seed = seed;
    eo.horizon_mult = m;
    eo.t_train_end = run["t_end"].get<double>();
    std::ostringstream key;
    key << m << "x";
    sections[key.str()] = metrics::evaluate(*model, params, sys, eo);
  }
  const fs::path target = o.out.empty() ? dir / "eval.json" : fs::path(o.out);
  write_file(target, rep.dump(2) + "\n");
  out << "wrote " << target.string() << "\n";
  return kOk;
}

struct ReportOptions {
  std::vector<std::string> evals;  // run directories or eval.json files
  std::string out;                 // CSV; empty: stdout
};

/// Comparison table, one row per (horizon, run). Columns:
/// system, horizon, model, mse_train, mse_extrap, mse_total, mse_total_std,
/// violation, deviation_<q>..., if_mse_total, if_violation, if_deviation_<q>...
/// Improvement factors are filled on the compiled run's rows only.
inline std::string report_csv(const std::vector<json>& evals) {
  if (evals.empty()) throw UsageError("report needs at least one evaluation");
  const json* ours = nullptr;
  for (const auto& e : evals) {
    if (e["system"] != evals.front()["system"]) throw UsageError("report mixes systems");
    if (e["baseline"] == "none") {
      if (ours) throw UsageError("report has more than one compiled run");
      ours = &e;
    }
  }
  std::vector<std::string> qnames;
  const auto& first_section = evals.front()["horizons"].begin().value();
  for (const auto& [q, _] : first_section["deviation"].items()) qnames.push_back(q);

  std::ostringstream csv;
  csv << "system,horizon,model,mse_train,mse_extrap,mse_total,mse_total_std,violation";
  for (const auto& q : qnames) csv << ",deviation_" << q;
  csv << ",if_mse_total,if_violation";
  for (const auto& q : qnames) csv << ",if_deviation_" << q;
  csv << "\n";
  auto num = [](const json& j) {
    return j.is_string() ? j.get<std::string>() : integrator::format_double(j.get<double>());
  };
  for (const auto& [horizon, _] : evals.front()["horizons"].items()) {
    for (const auto& e : evals) {
      if (!e["horizons"].contains(horizon))
        throw UsageError("run '" + e["run"].get<std::string>() + "' has no " + horizon + " section");
      const auto& s = e["horizons"][horizon];
      csv << e["system"].get<std::string>() << "," << horizon << "," << e["baseline"].get<std::string>() << ","
          << num(s["mse_train"]) << "," << num(s["mse_extrap"]) << "," << num(s["mse_total"]) << ","
          << num(s["mse_total_std"]) << "," << num(s["violation"]);
      for (const auto& q : qnames) csv << "," << num(s["deviation"][q]);
      if (&e == ours) {
        std::vector<std::pair<std::string, json>> base;
        for (const auto& b : evals)
          if (&b != ours) base.emplace_back(b["baseline"].get<std::string>(), b["horizons"][horizon]);
        const auto table = base.empty() ? json() : metrics::improvement_table(s, base);
        auto cell = [&](const std::string& key) { return table.is_null() ? std::string() : table[key].get<std::string>(); };
        csv << "," << cell("mse_total") << "," << cell("violation");
        for (const auto& q : qnames) csv << "," << cell("deviation_" + q);
      } else {
        csv << ",,";
        for (std::size_t i = 0; i < qnames.size(); ++i) csv << ",";
      }
      csv << "\n";
    }
  }
  return csv.str();
}

inline int cmd_report(const ReportOptions& o, std::ostream& out) {
  std::vector<json> evals;
  for (const auto& p : o.evals) {
    fs::path path = p;
    if (fs::is_directory(path)) path /= "eval.json";
    if (!fs::exists(path)) throw UsageError("missing evaluation '" + path.string() + "' (run eval first)");
    evals.push_back(read_json(path));
  }
  const auto csv = report_csv(evals);
  if (o.out.empty())
    out << csv;
  else
    write_file(o.out, csv);
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv and dispatches. Errors are reported on `err` with the exit code
/// of their category.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Invariant compiler and structure-preserving neural ODE runtime", "invarc"};
  app.require_subcommand(1);

  CompileOptions co;
  auto* compile = app.add_subcommand("compile", "parse and lower a spec, print the IR");
  compile->add_option("--spec", co.spec, "spec file")->required();
  compile->add_option("--out", co.out, "output file (default stdout)");

  SimulateOptions so;
  auto* simulate = app.add_subcommand("simulate", "roll out a randomly initialized compiled model");
  simulate->add_option("--spec", so.spec, "spec file");
  simulate->add_option("--system", so.system, "catalog system (uses its built-in spec)");
  simulate->add_option("--seed", so.seed, "seed")->required();
  simulate->add_option("--ic", so.ic, "initial state, comma separated");
  simulate->add_option("--dt", so.h, "RK4 step size h");
  simulate->add_option("--steps", so.steps, "number of RK4 steps");
  simulate->add_option("--out", so.out, "CSV output (default stdout)");

  DatasetOptions dso;
  auto* dataset = app.add_subcommand("dataset", "generate ground-truth trajectories");
  dataset->add_option("--system", dso.system, "catalog system")->required();
  dataset->add_option("--seed", dso.seed, "seed")->required();
  dataset->add_option("--trajectories", dso.trajectories, "trajectory count");
  dataset->add_option("--out", dso.out, "output directory")->required();

  TrainOptions to;
  auto* train = app.add_subcommand("train", "train a compiled model or a baseline");
  train->add_option("--spec", to.spec, "spec file");
  train->add_option("--system", to.system, "catalog system");
  train->add_option("--seed", to.seed, "seed")->required();
  train->add_option("--epochs", to.epochs, "epochs");
  train->add_option("--baseline", to.baseline, "none, unconstrained, penalty or pinns")
      ->check(CLI::IsMember({"none", "unconstrained", "penalty", "pinns"}));
  train->add_option("--trajectories", to.trajectories, "training trajectory count");
  train->add_option("--out", to.out, "run directory")->required();
  train->add_flag("--resume", to.resume, "continue from the run directory's checkpoint");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "evaluate a trained run on held-out initial conditions");
  eval->add_option("--run", eo.run, "run directory")->required();
  eval->add_option("--horizon-mult", eo.horizons, "comma-separated horizon multipliers");
  eval->add_option("--n-test", eo.n_test, "held-out trajectories");
  eval->add_option("--out", eo.out, "report path (default <run>/eval.json)");

  ReportOptions ro;
  auto* report = app.add_subcommand("report", "aggregate evaluations into a comparison table");
  report->add_option("evals", ro.evals, "run directories or eval.json files")->required();
  report->add_option("--out", ro.out, "CSV output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*compile) return cmd_compile(co, out);
    if (*simulate) return cmd_simulate(so, out);
    if (*dataset) return cmd_dataset(dso);
    if (*train) return cmd_train(to, out);
    if (*eval) return cmd_eval(eo, out);
    if (*report) return cmd_report(ro, out);
  } catch (const SpecError& e) {
    std::string where = co.spec.empty() ? (so.spec.empty() ? to.spec : so.spec) : co.spec;
    if (where.empty()) where = "<spec>";
    for (const auto& d : e.diagnostics()) err << where << ":" << d.str() << "\n";
    return kSpec;
  } catch (const DivergenceError& e) {
    err << "numerical divergence: " << e.what() << "\n";
    return kNumerical;
  } catch (const ViabilityError& e) {
    err << "viability failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ConditioningError& e) {
    err << "ill-conditioned: " << e.what() << "\n";
    return kNumerical;
  } catch (const DomainError& e) {
    err << "out of domain: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace invarc::cli
