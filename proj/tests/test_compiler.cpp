#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "checks.hpp"
#include "invarc/cli.hpp"
#include "invarc/compiler.hpp"

using namespace invarc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> files(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// First diagnostic of a spec that must fail.
std::string first_diagnostic(const std::string& text) {
  try {
    compiler::lower(compiler::parse_spec(text));
  } catch (const SpecError& e) {
    return e.diagnostics().empty() ? "" : e.diagnostics().front().str();
  }
  return "<accepted>";
}

const char* kSir = R"(system sir {
  state S, I, R;
  reference sir;
}
invariant simplex on (S, I, R)
)";

}  // namespace

TEST(Parse, SimplexSpec) {
  const auto spec = compiler::parse_spec(kSir);
  EXPECT_EQ(spec.name, "sir");
  EXPECT_EQ(spec.state, (std::vector<std::string>{"S", "I", "R"}));
  EXPECT_EQ(spec.reference, "sir");
  ASSERT_EQ(spec.invariants.size(), 1u);
  EXPECT_EQ(spec.invariants[0].kind, compiler::InvariantKind::simplex);
  EXPECT_EQ(spec.invariants[0].vars.size(), 3u);
}

TEST(Parse, NoxMatrixPayload) {
  const auto spec = compiler::parse_spec(catalog_specs().at("nox"));
  const auto& m = spec.invariants.at(0).matrix;
  ASSERT_EQ(m.rows(), 2);
  ASSERT_EQ(m.cols(), 5);
  EXPECT_EQ(m.row(0), (Eigen::RowVectorXd(5) << 1, 0, 1, 2, 2).finished());
  EXPECT_EQ(m.row(1), (Eigen::RowVectorXd(5) << 1, 2, 2, 4, 3).finished());
}

TEST(Parse, MatrixShapeMismatch) {
  const std::string text = R"(system nox {
  state NO, O2, NO2, N2O4, N2O3;
  reference nox;
}
invariant stoichiometric matrix [[1, 0, 1, 2], [1, 2, 2, 4]]
)";
  EXPECT_EQ(first_diagnostic(text), "5:1: stoichiometric matrix has 4 columns but the state has 5 variables");
}

TEST(Parse, CommentsAndNetOverride) {
  const auto spec = compiler::parse_spec(R"(# leading comment
system sir {   # trailing comment
  state S, I, R;
  reference none;
}
invariant simplex on (S, I, R)
net hidden 16 layers 2 activation softplus
)");
  EXPECT_EQ(*spec.net.hidden, 16);
  EXPECT_EQ(*spec.net.layers, 2);
  EXPECT_EQ(*spec.net.activation, nets::Activation::softplus);
  const auto ir = compiler::lower(spec);
  EXPECT_EQ(ir.net.hidden_dim, 16);
  EXPECT_EQ(ir.net.n_layers, 2);
}

TEST(Lower, SimplexIr) {
  const auto ir = compiler::lower(compiler::parse_spec(kSir));
  EXPECT_NE(ir.manifold.find("sphere"), std::string::npos);
  EXPECT_NE(ir.rule.find("skew"), std::string::npos);
  const auto model = compiler::build_model(ir, 1);
  ASSERT_EQ(model->schema().slices().size(), 6u);
  // Output layer of the single net is n x n.
  EXPECT_EQ(model->schema().slices().back().rows, 9);
}

TEST(Lower, StoichiometricSlotDimension) {
  for (const std::string id : {"nox", "chemical"}) {
    const auto ir = checks::catalog_ir(id);
    const auto& m = ir.invariant.matrix;
    const auto model = compiler::build_model(ir, 1);
    const auto* f = model->as<fields::StoichField>();
    ASSERT_NE(f, nullptr);
    EXPECT_EQ(f->basis().cols(), m.cols() - linalg::rank(m)) << id;
  }
}

TEST(Lower, FirstIntegralHasFourConstraintRows) {
  const auto model = compiler::build_model(checks::catalog_ir("two_body"), 1);
  const auto* f = model->as<fields::FirstIntegralField>();
  ASSERT_NE(f, nullptr);
  EXPECT_EQ(f->constraint_count(), 4);
  EXPECT_EQ(f->known().size(), 2u);
}

TEST(Lower, IsPureAndTotalOverKinds) {
  for (const auto& s : checks::kind_setups()) {
    const auto a = compiler::dump_ir(checks::compile(s.spec));
    const auto b = compiler::dump_ir(checks::compile(s.spec));
    EXPECT_EQ(a, b);
    EXPECT_EQ(checks::compile(s.spec).invariant.kind, s.kind);
  }
}

TEST(Build, SameSeedSameParameters) {
  for (const auto& [id, text] : catalog_specs()) {
    const auto ir = checks::compile(text);
    const auto m1 = compiler::build_model(ir, 7);
    const auto m2 = compiler::build_model(ir, 7);
    EXPECT_EQ(m1->init_params(7).values(), m2->init_params(7).values()) << id;
    EXPECT_NE(m1->init_params(7).values(), m1->init_params(8).values()) << id;
  }
}

TEST(Build, DumpListsEverySlot) {
  for (const auto& [id, text] : catalog_specs()) {
    const auto ir = checks::compile(text);
    const auto dump = compiler::dump_ir(ir);
    const auto model = compiler::build_model(ir, 1);
    const auto store = model->init_params(1);
    EXPECT_NE(dump.find("params_total " + std::to_string(store.size()) + "\n"), std::string::npos) << id;
    // Every parameter slice belongs to a slot named in the dump.
    for (const auto& sl : model->schema().slices()) {
      const auto slot = sl.name.substr(0, sl.name.find(".layer"));
      EXPECT_NE(dump.find("slot " + slot + " "), std::string::npos) << id << " " << sl.name;
    }
  }
}

TEST(Golden, CatalogDumpsAreByteStable) {
  const fs::path golden = fs::path(INVARC_TEST_DIR) / "golden";
  const auto specs = files(fs::path(INVARC_SOURCE_DIR) / "specs", ".inv");
  ASSERT_EQ(specs.size(), 11u);
  for (const auto& p : specs) {
    const auto dump = compiler::dump_ir(cli::compile_text(slurp(p)));
    EXPECT_EQ(dump, slurp(golden / (p.stem().string() + ".ir"))) << p.stem();
    // The embedded copy matches the file on disk.
    EXPECT_EQ(catalog_specs().at(p.stem().string()), slurp(p));
  }
}

TEST(Golden, InvalidSpecsReportAnchoredDiagnostics) {
  const auto bad = files(fs::path(INVARC_TEST_DIR) / "invalid", ".inv");
  ASSERT_GE(bad.size(), 10u);
  for (const auto& p : bad) {
    const auto text = slurp(p);
    const std::string tag = "# expect: ";
    ASSERT_EQ(text.rfind(tag, 0), 0u) << p;
    const auto expected = text.substr(tag.size(), text.find('\n') - tag.size());
    EXPECT_EQ(first_diagnostic(text), expected) << p.filename();
  }
}

TEST(Golden, ReportsSeveralProblemsAtOnce) {
  try {
    compiler::lower(compiler::parse_spec(R"(system s {
  state a, a, b;
  reference none;
}
invariant simplex on (a, c)
)"));
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_GE(e.diagnostics().size(), 2u);
  }
}
