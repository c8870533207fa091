#pragma once

// Front end: parse invariant specs, check them, lower them to a geometric IR
// and instantiate the matching field.

#include <Eigen/Dense>

#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "invarc/constructions_algebraic.hpp"
#include "invarc/constructions_energetic.hpp"
#include "invarc/errors.hpp"
#include "invarc/field.hpp"
#include "invarc/integrator.hpp"
#include "invarc/linalg.hpp"
#include "invarc/nets.hpp"
#include "invarc/systems.hpp"

namespace invarc::compiler {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using fields::Split;
using Index = Eigen::Index;

enum class InvariantKind {
  simplex,
  lorentz_cone,
  psd,
  center_of_mass,
  stoichiometric,
  hamiltonian,
  port_hamiltonian,
  generic,
  first_integral,
};

inline const std::vector<std::pair<std::string, InvariantKind>>& kind_table() {
  static const std::vector<std::pair<std::string, InvariantKind>> t = {
      {"simplex", InvariantKind::simplex},
      {"lorentz_cone", InvariantKind::lorentz_cone},
      {"psd", InvariantKind::psd},
      {"center_of_mass", InvariantKind::center_of_mass},
      {"stoichiometric", InvariantKind::stoichiometric},
      {"hamiltonian", InvariantKind::hamiltonian},
      {"port_hamiltonian", InvariantKind::port_hamiltonian},
      {"generic", InvariantKind::generic},
      {"first_integral", InvariantKind::first_integral},
  };
  return t;
}

inline std::string kind_name(InvariantKind k) {
  for (const auto& [name, kind] : kind_table())
    if (kind == k) return name;
  return "?";
}

inline bool uses_inn(InvariantKind k) {
  return k == InvariantKind::hamiltonian || k == InvariantKind::port_hamiltonian || k == InvariantKind::generic;
}

struct Located {
  int line = 0;
  int column = 0;
};

struct InvariantSpec {
  InvariantKind kind = InvariantKind::simplex;
  Located at;
  std::vector<std::string> vars;        // simplex
  std::string time_var;                 // lorentz_cone
  std::vector<std::string> space_vars;  // lorentz_cone
  MatrixXd matrix;                      // stoichiometric
  Index psd_dim = 0;                    // psd
  VectorXd masses;                      // center_of_mass
  Index bodies = 0, space_dim = 0;      // center_of_mass
  Split split;                          // hamiltonian family
  int learned = 0;                      // first_integral
  std::vector<std::string> known;       // first_integral
  std::vector<Located> names_at;        // one per listed name (vars, time + space, or known)
};

struct NetSpec {
  std::optional<Index> hidden;
  std::optional<int> layers;
  std::optional<nets::Activation> activation;
  Located at;
};

struct SystemSpec {
  std::string name;
  std::vector<std::string> state;
  std::vector<Located> state_at;
  std::string reference = "none";
  std::vector<InvariantSpec> invariants;
  NetSpec net;
  Located at;
};

// ---------------------------------------------------------------------------
// Tokenizer

struct Token {
  enum Type { ident, number, punct, end } type = end;
  std::string text;
  int line = 1;
  int column = 1;
};

inline std::vector<Token> tokenize(const std::string& src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  std::size_t i = 0;
  auto advance = [&](std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
      ++i;
    }
  };
  while (i < src.size()) {
    const char c = src[i];
    if (c == '#') {
      while (i < src.size() && src[i] != '\n') advance(1);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    Token t;
    t.line = line;
    t.column = col;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      t.type = Token::ident;
      t.text = src.substr(i, j - i);
      advance(j - i);
    } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' ||
               ((c == '-' || c == '+') && i + 1 < src.size() &&
                (std::isdigit(static_cast<unsigned char>(src[i + 1])) || src[i + 1] == '.'))) {
      std::size_t j = i + 1;
      while (j < src.size()) {
        const char d = src[j];
        if (std::isdigit(static_cast<unsigned char>(d)) || d == '.') {
          ++j;
        } else if ((d == 'e' || d == 'E') && j + 1 < src.size()) {
          ++j;
          if (src[j] == '+' || src[j] == '-') ++j;
        } else {
          break;
        }
      }
      t.type = Token::number;
      t.text = src.substr(i, j - i);
      advance(j - i);
    } else if (std::string("{}()[],;=").find(c) != std::string::npos) {
      t.type = Token::punct;
      t.text = std::string(1, c);
      advance(1);
    } else {
      throw SpecError({{line, col, std::string("unexpected character '") + c + "'"}});
    }
    out.push_back(t);
  }
  Token e;
  e.type = Token::end;
  e.line = line;
  e.column = col;
  out.push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// Parser

namespace detail {

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : toks_(std::move(toks)) {}

  SystemSpec parse() {
    SystemSpec spec;
    bool have_system = false;
    while (peek().type != Token::end) {
      const Token& t = peek();
      if (t.type != Token::ident) fail(t, "expected 'system', 'invariant' or 'net', found '" + t.text + "'");
      if (t.text == "system") {
        if (have_system) fail(t, "duplicate system block");
        parse_system(spec);
        have_system = true;
      } else if (t.text == "invariant") {
        if (!have_system) fail(t, "invariant declared before the system block");
        spec.invariants.push_back(parse_invariant());
      } else if (t.text == "net") {
        if (spec.net.hidden || spec.net.layers || spec.net.activation) fail(t, "duplicate net declaration");
        parse_net(spec.net);
      } else {
        fail(t, "expected 'system', 'invariant' or 'net', found '" + t.text + "'");
      }
    }
    if (!have_system) fail(peek(), "missing system block");
    return spec;
  }

 private:
  [[noreturn]] void fail(const Token& t, const std::string& msg) const {
    throw SpecError({{t.line, t.column, msg}});
  }

  const Token& peek() const { return toks_[pos_]; }
  const Token& next() { return toks_[pos_ < toks_.size() - 1 ? pos_++ : pos_]; }

  bool accept(const std::string& text) {
    if (peek().type != Token::end && peek().text == text) {
      ++pos_;
      return true;
    }
    return false;
  }

  const Token& expect(const std::string& text) {
    if (peek().text != text || peek().type == Token::end)
      fail(peek(), "expected '" + text + "', found " + describe(peek()));
    return next();
  }

  static std::string describe(const Token& t) {
    return t.type == Token::end ? std::string("end of input") : "'" + t.text + "'";
  }

  const Token& ident(const std::string& what) {
    if (peek().type != Token::ident) fail(peek(), "expected " + what + ", found " + describe(peek()));
    return next();
  }

  double number(const std::string& what) {
    const Token& t = peek();
    if (t.type != Token::number) fail(t, "expected " + what + ", found " + describe(t));
    next();
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(t.text, &used);
    } catch (...) {
      fail(t, "malformed number '" + t.text + "'");
    }
    if (used != t.text.size()) fail(t, "malformed number '" + t.text + "'");
    return v;
  }

  long integer(const std::string& what) {
    const Token& t = peek();
    const double v = number(what);
    if (v != std::floor(v) || std::abs(v) > 1e9) fail(t, what + " must be an integer");
    return static_cast<long>(v);
  }

  std::vector<std::string> ident_list(std::vector<Located>& at) {
    std::vector<std::string> out;
    expect("(");
    if (accept(")")) return out;
    do {
      const Token& t = ident("a name");
      out.push_back(t.text);
      at.push_back({t.line, t.column});
    } while (accept(","));
    expect(")");
    return out;
  }

  void parse_system(SystemSpec& spec) {
    const Token& kw = next();
    spec.at = {kw.line, kw.column};
    spec.name = ident("system name").text;
    expect("{");
    bool have_state = false, have_ref = false;
    while (!accept("}")) {
      const Token& t = ident("'state' or 'reference'");
      if (t.text == "state") {
        if (have_state) fail(t, "duplicate state declaration");
        do {
          const Token& v = ident("state variable");
          spec.state.push_back(v.text);
          spec.state_at.push_back({v.line, v.column});
        } while (accept(","));
        have_state = true;
      } else if (t.text == "reference") {
        if (have_ref) fail(t, "duplicate reference declaration");
        const Token& r = ident("catalog id or 'none'");
        spec.reference = r.text;
        if (r.text != "none") {
          bool known = false;
          for (const auto& id : systems::catalog_ids()) known = known || id == r.text;
          if (!known) fail(r, "unknown reference system '" + r.text + "'");
        }
        have_ref = true;
      } else {
        fail(t, "expected 'state' or 'reference', found '" + t.text + "'");
      }
      expect(";");
    }
    if (!have_state) fail(kw, "system block declares no state");
  }

  Split parse_split() {
    expect("split");
    expect("(");
    Split s;
    bool seen_d = false, seen_k = false;
    do {
      const Token& key = ident("'d' or 'k'");
      expect("=");
      const long v = integer("split size");
      if (key.text == "d" && !seen_d) {
        s.d = v;
        seen_d = true;
      } else if (key.text == "k" && !seen_k) {
        s.k = v;
        seen_k = true;
      } else {
        fail(key, "unexpected split key '" + key.text + "'");
      }
    } while (accept(","));
    expect(")");
    if (!seen_d || !seen_k) fail(peek(), "split needs both d and k");
    return s;
  }

  MatrixXd parse_matrix() {
    const Token& open = expect("[");
    std::vector<std::vector<double>> rows;
    do {
      expect("[");
      std::vector<double> row;
      do {
        row.push_back(number("matrix entry"));
      } while (accept(","));
      expect("]");
      rows.push_back(std::move(row));
    } while (accept(","));
    expect("]");
    for (const auto& r : rows)
      if (r.size() != rows.front().size()) fail(open, "matrix rows have different lengths");
    MatrixXd m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
    return m;
  }

  VectorXd parse_vector() {
    expect("[");
    std::vector<double> v;
    do {
      v.push_back(number("value"));
    } while (accept(","));
    expect("]");
    return Eigen::Map<VectorXd>(v.data(), static_cast<Index>(v.size()));
  }

  InvariantSpec parse_invariant() {
    const Token& kw = next();
    InvariantSpec inv;
    inv.at = {kw.line, kw.column};
    const Token& kt = ident("invariant kind");
    bool found = false;
    for (const auto& [name, kind] : kind_table())
      if (name == kt.text) {
        inv.kind = kind;
        found = true;
      }
    if (!found) fail(kt, "unknown invariant kind '" + kt.text + "'");
    switch (inv.kind) {
      case InvariantKind::simplex:
        expect("on");
        inv.vars = ident_list(inv.names_at);
        break;
      case InvariantKind::lorentz_cone: {
        expect("time");
        const Token& tv = ident("time variable");
        inv.time_var = tv.text;
        inv.names_at.push_back({tv.line, tv.column});
        expect("space");
        inv.space_vars = ident_list(inv.names_at);
        break;
      }
      case InvariantKind::stoichiometric:
        expect("matrix");
        inv.matrix = parse_matrix();
        break;
      case InvariantKind::psd:
        expect("dim");
        inv.psd_dim = integer("psd dimension");
        break;
      case InvariantKind::center_of_mass:
        expect("masses");
        inv.masses = parse_vector();
        expect("bodies");
        inv.bodies = integer("body count");
        expect("dim");
        inv.space_dim = integer("space dimension");
        break;
      case InvariantKind::hamiltonian:
      case InvariantKind::port_hamiltonian:
      case InvariantKind::generic:
        inv.split = parse_split();
        break;
      case InvariantKind::first_integral:
        expect("learned");
        inv.learned = static_cast<int>(integer("learned integral count"));
        expect("known");
        if (!accept("none")) inv.known = ident_list(inv.names_at);
        break;
    }
    return inv;
  }

  void parse_net(NetSpec& net) {
    const Token& kw = next();
    net.at = {kw.line, kw.column};
    bool any = false;
    while (peek().type == Token::ident && (peek().text == "hidden" || peek().text == "layers" || peek().text == "activation")) {
      const Token& key = next();
      any = true;
      if (key.text == "hidden") {
        if (net.hidden) fail(key, "duplicate 'hidden'");
        net.hidden = integer("hidden width");
      } else if (key.text == "layers") {
        if (net.layers) fail(key, "duplicate 'layers'");
        net.layers = static_cast<int>(integer("layer count"));
      } else {
        if (net.activation) fail(key, "duplicate 'activation'");
        const Token& a = ident("activation");
        if (a.text != "silu" && a.text != "softplus") fail(a, "activation must be silu or softplus");
        net.activation = nets::parse_activation(a.text);
      }
    }
    if (!any) fail(peek(), "net declaration needs hidden, layers or activation");
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
};

inline Diagnostic diag(const Located& at, const std::string& msg) { return {at.line, at.column, msg}; }

/// Semantic checks; returns all problems found.
inline std::vector<Diagnostic> check(const SystemSpec& spec) {
  std::vector<Diagnostic> out;
  const Index n = static_cast<Index>(spec.state.size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < spec.state.size(); ++i)
    if (!names.insert(spec.state[i]).second)
      out.push_back(diag(i < spec.state_at.size() ? spec.state_at[i] : spec.at,
                         "duplicate state variable '" + spec.state[i] + "'"));
  if (spec.invariants.empty()) out.push_back(diag(spec.at, "no invariant declared"));
  if (spec.net.hidden && *spec.net.hidden < 1) out.push_back(diag(spec.net.at, "hidden width must be positive"));
  if (spec.net.layers && *spec.net.layers < 1) out.push_back(diag(spec.net.at, "layer count must be positive"));

  // Location of the i-th listed name, falling back to the invariant keyword.
  auto name_at = [](const InvariantSpec& inv, std::size_t i) {
    return i < inv.names_at.size() ? inv.names_at[i] : inv.at;
  };
  auto covers_state = [&](const std::vector<std::string>& vars, const InvariantSpec& inv) {
    const Located& at = inv.at;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto& v = vars[i];
      if (!names.count(v)) out.push_back(diag(name_at(inv, i), "unknown state variable '" + v + "'"));
      if (!seen.insert(v).second) out.push_back(diag(name_at(inv, i), "variable '" + v + "' listed twice"));
    }
    if (static_cast<Index>(vars.size()) != n || seen.size() != names.size())
      out.push_back(diag(at, "invariant must cover all " + std::to_string(n) + " state variables"));
  };

  for (const auto& inv : spec.invariants) {
    switch (inv.kind) {
      case InvariantKind::simplex:
        covers_state(inv.vars, inv);
        if (n < 2) out.push_back(diag(inv.at, "simplex needs at least two variables"));
        break;
      case InvariantKind::lorentz_cone: {
        auto all = inv.space_vars;
        all.insert(all.begin(), inv.time_var);
        covers_state(all, inv);
        if (inv.space_vars.empty()) out.push_back(diag(inv.at, "cone needs at least one space variable"));
        break;
      }
      case InvariantKind::stoichiometric:
        if (inv.matrix.cols() != n)
          out.push_back(diag(inv.at, "stoichiometric matrix has " + std::to_string(inv.matrix.cols()) +
                                         " columns but the state has " + std::to_string(n) + " variables"));
        else if (linalg::nullspace_basis(inv.matrix).cols() == 0)
          out.push_back(diag(inv.at, "no admissible dynamics: the matrix has a trivial null space"));
        break;
      case InvariantKind::psd:
        if (inv.psd_dim < 1)
          out.push_back(diag(inv.at, "psd dimension must be positive"));
        else if (nets::tri_size(inv.psd_dim) != n)
          out.push_back(diag(inv.at, "psd dim " + std::to_string(inv.psd_dim) + " needs " +
                                         std::to_string(nets::tri_size(inv.psd_dim)) + " state variables, found " +
                                         std::to_string(n)));
        break;
      case InvariantKind::center_of_mass:
        if (inv.bodies < 1 || inv.space_dim < 1)
          out.push_back(diag(inv.at, "bodies and dim must be positive"));
        else if (2 * inv.bodies * inv.space_dim != n)
          out.push_back(diag(inv.at, "center_of_mass with " + std::to_string(inv.bodies) + " bodies in dim " +
                                         std::to_string(inv.space_dim) + " needs " +
                                         std::to_string(2 * inv.bodies * inv.space_dim) + " state variables"));
        if (inv.masses.size() != inv.bodies) out.push_back(diag(inv.at, "expected one mass per body"));
        for (Index i = 0; i < inv.masses.size(); ++i)
          if (!(inv.masses(i) > 0)) out.push_back(diag(inv.at, "masses must be positive"));
        break;
      case InvariantKind::hamiltonian:
      case InvariantKind::port_hamiltonian:
      case InvariantKind::generic:
        if (inv.split.d < 1 || inv.split.k < 0)
          out.push_back(diag(inv.at, "split needs d >= 1 and k >= 0"));
        else if (inv.split.dim() != n)
          out.push_back(diag(inv.at, "split 2d+k = " + std::to_string(inv.split.dim()) + " does not match " +
                                         std::to_string(n) + " state variables"));
        if (inv.kind == InvariantKind::generic && inv.split.k < 1)
          out.push_back(diag(inv.at, "generic needs at least one Casimir coordinate (k >= 1)"));
        break;
      case InvariantKind::first_integral: {
        if (inv.learned < 0) out.push_back(diag(inv.at, "learned count must be non-negative"));
        if (inv.learned + inv.known.size() == 0) out.push_back(diag(inv.at, "first_integral needs at least one constraint"));
        std::set<std::string> seen;
        for (std::size_t i = 0; i < inv.known.size(); ++i) {
          const auto& k = inv.known[i];
          const Located at = name_at(inv, i);
          if (!seen.insert(k).second) out.push_back(diag(at, "known integral '" + k + "' listed twice"));
          try {
            const auto ki = fields::known_integral(k);
            if (ki.dim != 0 && ki.dim != n)
              out.push_back(diag(at, "known integral '" + k + "' needs " + std::to_string(ki.dim) +
                                         " state variables"));
          } catch (const ConfigError& e) {
            out.push_back(diag(at, e.what()));
          }
        }
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Parses and checks a spec; throws SpecError with every diagnostic found.
inline SystemSpec parse_spec(const std::string& text) {
  SystemSpec spec = detail::Parser(tokenize(text)).parse();
  auto diags = detail::check(spec);
  if (!diags.empty()) throw SpecError(std::move(diags));
  return spec;
}

// ---------------------------------------------------------------------------
// IR

struct GeometricIR {
  std::string system;
  std::vector<std::string> state;
  std::string reference;
  InvariantSpec invariant;
  std::string manifold;
  std::string rule;
  std::string encode;
  std::string decode;
  nets::MlpConfig net;
  std::vector<int> order;  // integration coordinate i reads state variable order[i]
  Index latent_dim = 0;
  std::vector<std::string> diagnostics;
};

/// Lowers a checked spec. Cross-kind composition is rejected.
inline GeometricIR lower(const SystemSpec& spec) {
  if (spec.invariants.size() != 1) {
    const auto& second = spec.invariants.size() > 1 ? spec.invariants[1].at : spec.at;
    throw SpecError({{second.line, second.column,
                      "exactly one invariant per system is supported (first_integral composes several constraints)"}});
  }
  GeometricIR ir;
  ir.system = spec.name;
  ir.state = spec.state;
  ir.reference = spec.reference;
  ir.invariant = spec.invariants.front();
  const auto& inv = ir.invariant;
  const Index n = static_cast<Index>(spec.state.size());

  ir.net.hidden_dim = spec.net.hidden.value_or(64);
  ir.net.n_layers = spec.net.layers.value_or(3);
  ir.net.activation = spec.net.activation.value_or(inv.kind == InvariantKind::stoichiometric ? nets::Activation::softplus
                                                                                              : nets::Activation::silu);
  auto index_of = [&](const std::string& v) {
    for (Index i = 0; i < n; ++i)
      if (spec.state[i] == v) return static_cast<int>(i);
    return -1;
  };
  for (Index i = 0; i < n; ++i) ir.order.push_back(static_cast<int>(i));
  ir.latent_dim = n;
  ir.encode = "identity";
  ir.decode = "identity";

  switch (inv.kind) {
    case InvariantKind::simplex:
      ir.order.clear();
      for (const auto& v : inv.vars) ir.order.push_back(index_of(v));
      ir.manifold = "sphere S^" + std::to_string(n - 1) + " (image of the simplex under u = sqrt(x))";
      ir.rule = "skew_generator: u' = skew(F(u)) u";
      ir.encode = "u = sqrt(max(x, 1e-12)) / norm";
      ir.decode = "x = u * u";
      ir.diagnostics = {"sum_residual", "min_component", "norm_residual"};
      break;
    case InvariantKind::lorentz_cone:
      ir.order.clear();
      ir.order.push_back(index_of(inv.time_var));
      for (const auto& v : inv.space_vars) ir.order.push_back(index_of(v));
      ir.manifold = "lorentz_cone L^" + std::to_string(n) + " = {(t, x) : t >= |x|}";
      ir.rule = "tangent_cone_projection: z' = proj_T(z) f(z)";
      ir.encode = "permute to (time, space)";
      ir.decode = "inverse permutation";
      ir.diagnostics = {"cone_violation"};
      break;
    case InvariantKind::psd:
      ir.manifold = "cholesky_manifold: P = L L^T, n = " + std::to_string(inv.psd_dim);
      ir.rule = "factor_flow: L' = f(L)";
      ir.diagnostics = {"min_eigenvalue", "symmetry_residual"};
      break;
    case InvariantKind::center_of_mass:
      ir.manifold = "centre_of_mass_frame: sum m_i r_i and sum m_i v_i fixed";
      ir.rule = "mean_removal: r_i' = v_i - vbar, v_i' = a_i - abar";
      for (Index k = 0; k < inv.space_dim; ++k) ir.diagnostics.push_back("com_position_" + std::to_string(k));
      for (Index k = 0; k < inv.space_dim; ++k) ir.diagnostics.push_back("com_momentum_" + std::to_string(k));
      break;
    case InvariantKind::stoichiometric: {
      const Index k = inv.matrix.cols() - linalg::rank(inv.matrix);
      ir.manifold = "null_space: c in c0 + span(B), rank " + std::to_string(k);
      ir.rule = "null_space_rates: c' = B r(c, t)";
      for (Index e = 0; e < inv.matrix.rows(); ++e) ir.diagnostics.push_back("element_" + std::to_string(e));
      break;
    }
    case InvariantKind::hamiltonian:
      ir.manifold = "symplectic_poisson latent z = (q, p, c), d = " + std::to_string(inv.split.d) +
                    ", k = " + std::to_string(inv.split.k);
      ir.rule = "latent_canonical: z' = J0 grad K(z)";
      ir.encode = "z = g(u) (invertible coupling network)";
      ir.decode = "u = g^-1(z)";
      ir.diagnostics = {"K"};
      for (Index i = 0; i < inv.split.k; ++i) ir.diagnostics.push_back("casimir_" + std::to_string(i));
      break;
    case InvariantKind::port_hamiltonian:
      ir.manifold = "symplectic_poisson latent z = (q, p, c), d = " + std::to_string(inv.split.d) +
                    ", k = " + std::to_string(inv.split.k);
      ir.rule = "latent_dissipative: z' = (J0 - L L^T) grad K(z)";
      ir.encode = "z = g(u) (invertible coupling network)";
      ir.decode = "u = g^-1(z)";
      ir.diagnostics = {"K", "power"};
      break;
    case InvariantKind::generic:
      ir.manifold = "symplectic_poisson latent z = (q, p, c), d = " + std::to_string(inv.split.d) +
                    ", k = " + std::to_string(inv.split.k);
      ir.rule = "latent_generic: z' = J0 grad K + P_K Mhat P_K grad S(c), eps = 1e-8";
      ir.encode = "z = g(u) (invertible coupling network)";
      ir.decode = "u = g^-1(z)";
      ir.diagnostics = {"K", "S", "degeneracy_J", "degeneracy_M"};
      break;
    case InvariantKind::first_integral: {
      const int m = inv.learned + static_cast<int>(inv.known.size());
      ir.manifold = "learned_manifold: " + std::to_string(m) + " constraint rows (" +
                    std::to_string(inv.known.size()) + " known, " + std::to_string(inv.learned) + " learned)";
      ir.rule = "tangent_projection: u' = (I - P(u)) f(u), P from pinv(J J^T)";
      for (const auto& k : inv.known) ir.diagnostics.push_back("known_" + k);
      for (int i = 0; i < inv.learned; ++i) ir.diagnostics.push_back("V" + std::to_string(i));
      break;
    }
  }
  return ir;
}

// ---------------------------------------------------------------------------
// Compiled models

inline const std::string kUnconstrained = "unconstrained";

class CompiledModel {
 public:
  CompiledModel() = default;
  CompiledModel(const CompiledModel&) = delete;
  CompiledModel& operator=(const CompiledModel&) = delete;

  const GeometricIR& ir() const { return ir_; }
  const nets::ParamSchema& schema() const { return schema_; }
  const fields::Field& field() const { return *field_; }
  const std::optional<nets::Inn>& inn() const { return inn_; }
  bool unconstrained() const { return unconstrained_; }
  Index state_dim() const { return static_cast<Index>(ir_.state.size()); }
  Index latent_dim() const { return field_->dim(); }
  std::uint64_t seed() const { return seed_; }

  template <class T>
  const T* as() const {
    return dynamic_cast<const T*>(field_.get());
  }

  /// Physical states (state_dim x B) -> integration coordinates.
  ad::Var encode(nets::BoundParams& p, ad::Var x) const {
    if (unconstrained_) return x;
    switch (ir_.invariant.kind) {
      case InvariantKind::simplex: {
        const Mat xv = permute(x.value());
        Mat u(xv.rows(), xv.cols());
        for (Index c = 0; c < xv.cols(); ++c) u.col(c) = fields::simplex_embed(xv.col(c));
        return p.tape().constant(std::move(u));
      }
      case InvariantKind::lorentz_cone: return ad::matmul(p.tape().constant(perm_), x);
      case InvariantKind::hamiltonian:
      case InvariantKind::port_hamiltonian:
      case InvariantKind::generic: return inn_->forward(p, x);
      default: return x;
    }
  }

  /// Integration coordinates -> physical states.
  ad::Var decode(nets::BoundParams& p, ad::Var z) const {
    if (unconstrained_) return z;
    switch (ir_.invariant.kind) {
      case InvariantKind::simplex: return ad::matmul(p.tape().constant(perm_.transpose()), ad::square(z));
      case InvariantKind::lorentz_cone: return ad::matmul(p.tape().constant(perm_.transpose()), z);
      case InvariantKind::hamiltonian:
      case InvariantKind::port_hamiltonian:
      case InvariantKind::generic: return inn_->inverse(p, z);
      default: return z;
    }
  }

  Mat encode_values(const nets::ParamStore& store, const Mat& x) const {
    ad::Tape tape;
    nets::BoundParams p(store, tape, false);
    return encode(p, tape.constant(x)).value();
  }

  Mat decode_values(const nets::ParamStore& store, const Mat& z) const {
    ad::Tape tape;
    nets::BoundParams p(store, tape, false);
    return decode(p, tape.constant(z)).value();
  }

  /// Field in integration coordinates, evaluated without gradients.
  integrator::Rhs rhs(const nets::ParamStore& store) const {
    return [this, &store](const Mat& z, const Eigen::RowVectorXd& t) { return fields::evaluate(*field_, store, z, t); };
  }

  nets::ParamStore init_params(std::uint64_t seed) const {
    nets::ParamStore store(schema_);
    store.initialize(nets::derive_seed(seed, "init"));
    return store;
  }

  /// Rolls a batch of physical initial states forward; returns physical
  /// states per grid point and (optionally) the integration-coordinate states.
  std::vector<Mat> simulate(const nets::ParamStore& store, const Mat& x0, double t0, double h, long n_steps,
                            std::vector<Mat>* latent = nullptr) const {
    const Mat z0 = encode_values(store, x0);
    auto zs = integrator::rollout_batch(rhs(store), z0, t0, h, n_steps);
    std::vector<Mat> xs;
    xs.reserve(zs.size());
    for (const auto& z : zs) xs.push_back(decode_values(store, z));
    if (latent) *latent = std::move(zs);
    return xs;
  }

  const std::vector<std::string>& diagnostic_names() const { return ir_.diagnostics; }

  /// Invariant diagnostics for one physical state x with integration state z.
  Eigen::VectorXd diagnostics(const nets::ParamStore& store, const Eigen::VectorXd& x, const Eigen::VectorXd& z) const {
    const auto& inv = ir_.invariant;
    Eigen::VectorXd d(ir_.diagnostics.size());
    switch (inv.kind) {
      case InvariantKind::simplex:
        d << std::abs(x.sum() - 1.0), x.minCoeff(), std::abs(z.norm() - 1.0);
        break;
      case InvariantKind::lorentz_cone: d << fields::cone_violation(z); break;
      case InvariantKind::psd: {
        const Mat pm = fields::psd_from_coords(z, inv.psd_dim);
        Eigen::SelfAdjointEigenSolver<Mat> eig(pm);
        d << eig.eigenvalues().minCoeff(), (pm - pm.transpose()).cwiseAbs().maxCoeff();
        break;
      }
      case InvariantKind::center_of_mass: d = fields::com_sums(z, inv.masses, inv.space_dim); break;
      case InvariantKind::stoichiometric: d = inv.matrix * x; break;
      case InvariantKind::hamiltonian:
      case InvariantKind::port_hamiltonian:
      case InvariantKind::generic: d = latent_diagnostics(store, z); break;
      case InvariantKind::first_integral: {
        const auto* f = as<fields::FirstIntegralField>();
        Index i = 0;
        for (const auto& k : f->known()) d(i++) = k.value(z);
        if (!f->learned().empty()) {
          ad::Tape tape;
          nets::BoundParams p(store, tape, false);
          const Mat v = f->learned_values(p, tape.constant(z)).value();
          for (Index j = 0; j < v.rows(); ++j) d(i++) = v(j, 0);
        }
        break;
      }
    }
    return d;
  }

  /// Penalty-baseline style violation of a physical state (0 when feasible).
  double violation(const Eigen::VectorXd& x) const {
    const auto& inv = ir_.invariant;
    switch (inv.kind) {
      case InvariantKind::simplex: return std::abs(x.sum() - 1.0) + (-x.array()).max(0.0).sum();
      case InvariantKind::lorentz_cone: return fields::cone_violation(permute(x));
      default: return 0.0;
    }
  }

 private:
  friend std::unique_ptr<CompiledModel> build_model(const GeometricIR&, std::uint64_t);
  friend std::unique_ptr<CompiledModel> build_unconstrained(const std::vector<std::string>&, const nets::MlpConfig&,
                                                           std::uint64_t);

  Mat permute(const Mat& x) const { return perm_ * x; }

  Eigen::VectorXd latent_diagnostics(const nets::ParamStore& store, const Eigen::VectorXd& z) const {
    ad::Tape tape;
    nets::BoundParams p(store, tape, false);
    ad::Var zv = tape.constant(z);
    const auto& split = ir_.invariant.split;
    Eigen::VectorXd d(ir_.diagnostics.size());
    if (const auto* g = as<fields::GenericField>()) {
      auto [k, gk] = g->energy(p, zv);
      auto [s, gs] = g->entropy(p, zv);
      // J0 grad S is structurally zero; report its computed norm anyway.
      const double dj = fields::detail::canonical_apply(gs, split).value().norm();
      const double dm = g->friction(p, zv, gk, gk).value().norm();
      d << k.value()(0, 0), s.value()(0, 0), dj, dm;
      return d;
    }
    const auto* pf = as<fields::PoissonField>();
    auto [k, gk] = pf->energy(p, zv);
    d(0) = k.value()(0, 0);
    if (ir_.invariant.kind == InvariantKind::port_hamiltonian) {
      const Mat zdot = field_->eval(p, zv, fields::Time::Zero(1)).value();
      d(1) = gk.value().col(0).dot(zdot.col(0));
    } else {
      for (Index i = 0; i < split.k; ++i) d(1 + i) = z(2 * split.d + i);
    }
    return d;
  }

  GeometricIR ir_;
  nets::ParamSchema schema_;
  std::unique_ptr<fields::Field> field_;
  std::optional<nets::Inn> inn_;
  Mat perm_;
  bool unconstrained_ = false;
  std::uint64_t seed_ = 0;
};

/// Instantiates the construction named by the IR. Deterministic in (ir, seed):
/// the seed fixes the coupling-network mixing matrices; parameters come from
/// init_params(seed).
inline std::unique_ptr<CompiledModel> build_model(const GeometricIR& ir, std::uint64_t seed) {
  auto model = std::make_unique<CompiledModel>();
  model->ir_ = ir;
  model->seed_ = seed;
  const auto& inv = ir.invariant;
  const Index n = static_cast<Index>(ir.state.size());
  auto& schema = model->schema_;
  model->perm_ = Mat::Zero(n, n);
  for (Index i = 0; i < n; ++i) model->perm_(i, ir.order[i]) = 1.0;
  try {
    switch (inv.kind) {
      case InvariantKind::simplex:
        model->field_ = std::make_unique<fields::SimplexField>(schema, "simplex.F", n, ir.net);
        break;
      case InvariantKind::lorentz_cone:
        model->field_ = std::make_unique<fields::LorentzField>(schema, "cone.f", n - 1, ir.net);
        break;
      case InvariantKind::psd:
        model->field_ = std::make_unique<fields::PsdField>(schema, "psd.f", inv.psd_dim, ir.net);
        break;
      case InvariantKind::center_of_mass:
        model->field_ = std::make_unique<fields::ComField>(schema, "com.accel", inv.masses, inv.space_dim, ir.net);
        break;
      case InvariantKind::stoichiometric:
        model->field_ = std::make_unique<fields::StoichField>(schema, "stoich.rate", inv.matrix, ir.net);
        break;
      case InvariantKind::hamiltonian:
      case InvariantKind::port_hamiltonian:
      case InvariantKind::generic: {
        nets::InnConfig ic;
        ic.dim = n;
        ic.subnet = ir.net;
        ic.mixing_seed = nets::derive_seed(seed, "mixing");
        model->inn_.emplace(schema, "inn", ic);
        if (inv.kind == InvariantKind::hamiltonian)
          model->field_ = std::make_unique<fields::PoissonField>(schema, "latent", inv.split, ir.net);
        else if (inv.kind == InvariantKind::port_hamiltonian)
          model->field_ = std::make_unique<fields::PortHamiltonianField>(schema, "latent", inv.split, ir.net);
        else
          model->field_ = std::make_unique<fields::GenericField>(schema, "latent", inv.split, ir.net);
        break;
      }
      case InvariantKind::first_integral:
        model->field_ =
            std::make_unique<fields::FirstIntegralField>(schema, "integral", n, inv.learned, inv.known, ir.net);
        break;
    }
  } catch (const ConfigError& e) {
    throw SpecError({{inv.at.line, inv.at.column, e.what()}});
  }
  return model;
}

/// Plain MLP vector field on the physical state (the baseline architecture).
inline std::unique_ptr<CompiledModel> build_unconstrained(const std::vector<std::string>& state,
                                                         const nets::MlpConfig& net, std::uint64_t seed) {
  auto model = std::make_unique<CompiledModel>();
  const Index n = static_cast<Index>(state.size());
  model->ir_.system = kUnconstrained;
  model->ir_.state = state;
  model->ir_.manifold = "R^" + std::to_string(n);
  model->ir_.rule = "free: x' = f(x)";
  model->ir_.encode = model->ir_.decode = "identity";
  model->ir_.net = net;
  model->ir_.latent_dim = n;
  for (Index i = 0; i < n; ++i) model->ir_.order.push_back(static_cast<int>(i));
  model->perm_ = Mat::Identity(n, n);
  model->unconstrained_ = true;
  model->seed_ = seed;
  model->field_ = std::make_unique<fields::FreeField>(model->schema_, "free.f", n, net);
  return model;
}

// ---------------------------------------------------------------------------
// IR dump

struct SlotInfo {
  std::string name;
  Index in = 0, out = 0, layers = 0, params = 0;
};

/// Groups parameter slices into network slots ("<slot>.layer<i>.<weight|bias>").
inline std::vector<SlotInfo> slots(const nets::ParamSchema& schema) {
  std::vector<SlotInfo> out;
  for (const auto& s : schema.slices()) {
    const auto pos = s.name.rfind(".layer");
    const std::string slot = s.name.substr(0, pos);
    if (out.empty() || out.back().name != slot) out.push_back({slot});
    auto& info = out.back();
    info.params += s.length;
    if (s.name.size() >= 7 && s.name.compare(s.name.size() - 7, 7, ".weight") == 0) {
      if (info.layers == 0) info.in = s.cols;
      info.out = s.rows;
      ++info.layers;
    }
  }
  return out;
}

inline std::string format_matrix(const MatrixXd& m) {
  std::ostringstream os;
  os << "[";
  for (Index i = 0; i < m.rows(); ++i) {
    os << (i ? ", [" : "[");
    for (Index j = 0; j < m.cols(); ++j) os << (j ? ", " : "") << integrator::format_double(m(i, j));
    os << "]";
  }
  os << "]";
  return os.str();
}

inline std::string dump_ir(const GeometricIR& ir) {
  const auto model = build_model(ir, 0);
  const auto& inv = ir.invariant;
  std::ostringstream os;
  os << "system " << ir.system << "\n";
  os << "state";
  for (std::size_t i = 0; i < ir.state.size(); ++i) os << (i ? ", " : " ") << ir.state[i];
  os << "\n";
  os << "reference " << ir.reference << "\n";
  os << "invariant " << kind_name(inv.kind) << "\n";
  switch (inv.kind) {
    case InvariantKind::simplex: {
      os << "  on";
      for (std::size_t i = 0; i < inv.vars.size(); ++i) os << (i ? ", " : " ") << inv.vars[i];
      os << "\n";
      break;
    }
    case InvariantKind::lorentz_cone: {
      os << "  time " << inv.time_var << "\n  space";
      for (std::size_t i = 0; i < inv.space_vars.size(); ++i) os << (i ? ", " : " ") << inv.space_vars[i];
      os << "\n";
      break;
    }
    case InvariantKind::stoichiometric: {
      const auto* f = model->as<fields::StoichField>();
      os << "  matrix " << format_matrix(inv.matrix) << "\n";
      os << "  rank " << linalg::rank(inv.matrix) << "\n";
      os << "  null_basis " << format_matrix(f->basis().transpose()) << "\n";
      break;
    }
    case InvariantKind::psd: os << "  dim " << inv.psd_dim << "\n"; break;
    case InvariantKind::center_of_mass: {
      os << "  masses " << format_matrix(inv.masses.transpose()) << "\n";
      os << "  bodies " << inv.bodies << " dim " << inv.space_dim << "\n";
      break;
    }
    case InvariantKind::hamiltonian:
    case InvariantKind::port_hamiltonian:
    case InvariantKind::generic: os << "  split d=" << inv.split.d << " k=" << inv.split.k << "\n"; break;
    case InvariantKind::first_integral: {
      os << "  learned " << inv.learned << "\n  known";
      if (inv.known.empty()) os << " none";
      for (std::size_t i = 0; i < inv.known.size(); ++i) os << (i ? ", " : " ") << inv.known[i];
      os << "\n";
      break;
    }
  }
  os << "manifold " << ir.manifold << "\n";
  os << "rule " << ir.rule << "\n";
  os << "encode " << ir.encode << "\n";
  os << "decode " << ir.decode << "\n";
  os << "integration_dim " << model->latent_dim() << "\n";
  os << "net hidden " << ir.net.hidden_dim << " layers " << ir.net.n_layers << " activation "
     << nets::activation_name(ir.net.activation) << "\n";
  const auto sl = slots(model->schema());
  os << "slots " << sl.size() << "\n";
  for (const auto& s : sl)
    os << "  slot " << s.name << " in " << s.in << " out " << s.out << " layers " << s.layers << " params " << s.params
       << "\n";
  os << "params_total " << model->schema().total() << "\n";
  os << "diagnostics";
  for (std::size_t i = 0; i < ir.diagnostics.size(); ++i) os << (i ? ", " : " ") << ir.diagnostics[i];
  os << "\n";
  return os.str();
}

}  // namespace invarc::compiler
