#pragma once

// Learnable function approximators and the flat parameter store they share.

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "invarc/autodiff.hpp"
#include "invarc/errors.hpp"

namespace invarc::nets {

using ad::Activation;
using ad::Mat;
using ad::Tape;
using ad::Var;
using Index = Eigen::Index;

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::softplus: return "softplus";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "softplus") return Activation::softplus;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Derives an independent stream seed from a base seed and a label (FNV-1a
/// followed by a splitmix finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& label) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ull;
  }
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

// ---------------------------------------------------------------------------
// Parameter store

enum class Init { kaiming_uniform, normal_small, zeros };

struct ParamSlice {
  std::string name;
  Index offset = 0;
  Index length = 0;
  Index rows = 0;
  Index cols = 0;
  Init init = Init::zeros;
  Index fan_in = 1;
};

class ParamSchema {
 public:
  /// Adds a (rows x cols) block; returns its slice index.
  int add(const std::string& name, Index rows, Index cols, Init init, Index fan_in) {
    if (rows <= 0 || cols <= 0) throw DimensionError("parameter slice '" + name + "' has an empty shape");
    if (index_.count(name)) throw ConfigError("duplicate parameter slice '" + name + "'");
    ParamSlice s{name, total_, rows * cols, rows, cols, init, fan_in};
    total_ += s.length;
    slices_.push_back(s);
    index_[name] = static_cast<int>(slices_.size()) - 1;
    return static_cast<int>(slices_.size()) - 1;
  }

  const std::vector<ParamSlice>& slices() const { return slices_; }
  const ParamSlice& slice(int i) const { return slices_.at(i); }
  int find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter slice named '" + name + "'");
    return it->second;
  }
  Index total() const { return total_; }

 private:
  std::vector<ParamSlice> slices_;
  std::map<std::string, int> index_;
  Index total_ = 0;
};

class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(ParamSchema schema) : schema_(std::move(schema)), values_(Eigen::VectorXd::Zero(schema_.total())) {}

  /// Fills every slice from a stream derived from (seed, slice name), so
  /// adding a slice never perturbs the others.
  void initialize(std::uint64_t seed) {
    for (const auto& s : schema_.slices()) {
      std::mt19937_64 rng(derive_seed(seed, s.name));
      auto block = values_.segment(s.offset, s.length);
      switch (s.init) {
        case Init::zeros: block.setZero(); break;
        case Init::kaiming_uniform: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
          std::uniform_real_distribution<double> dist(-bound, bound);
          for (Index i = 0; i < s.length; ++i) block(i) = dist(rng);
          break;
        }
        case Init::normal_small: {
          std::normal_distribution<double> dist(0.0, 0.01);
          for (Index i = 0; i < s.length; ++i) block(i) = dist(rng);
          break;
        }
      }
    }
  }

  const ParamSchema& schema() const { return schema_; }
  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }
  Index size() const { return values_.size(); }

  /// Column-major view of one slice as a (rows x cols) matrix.
  Eigen::Map<const Mat> view(int slice) const {
    const auto& s = schema_.slice(slice);
    return Eigen::Map<const Mat>(values_.data() + s.offset, s.rows, s.cols);
  }
  Eigen::Map<Mat> view(int slice) {
    const auto& s = schema_.slice(slice);
    return Eigen::Map<Mat>(values_.data() + s.offset, s.rows, s.cols);
  }

 private:
  ParamSchema schema_;
  Eigen::VectorXd values_;
};

/// Binds a ParamStore to one tape. Leaves are created on first use.
class BoundParams {
 public:
  BoundParams(const ParamStore& store, Tape& tape, bool trainable)
      : store_(store), tape_(tape), trainable_(trainable), leaves_(store.schema().slices().size()) {}

  Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  Var get(int slice) {
    auto& leaf = leaves_.at(slice);
    if (!leaf.valid()) {
      Mat v = store_.view(slice);
      leaf = trainable_ ? tape_.variable(std::move(v)) : tape_.constant(std::move(v));
    }
    return leaf;
  }

  /// Flat gradient after tape.backward(); untouched slices contribute zeros.
  Eigen::VectorXd gradient() const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(store_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i].valid()) continue;
      const auto& s = store_.schema().slice(static_cast<int>(i));
      const Mat& gm = leaves_[i].grad();
      g.segment(s.offset, s.length) = Eigen::Map<const Eigen::VectorXd>(gm.data(), s.length);
    }
    return g;
  }

 private:
  const ParamStore& store_;
  Tape& tape_;
  bool trainable_;
  std::vector<Var> leaves_;
};

// ---------------------------------------------------------------------------
// MLP

struct MlpConfig {
  Index in_dim = 1;
  Index out_dim = 1;
  Index hidden_dim = 64;
  int n_layers = 3;  // number of affine layers
  Activation activation = Activation::silu;
};

class Mlp {
 public:
  Mlp() = default;

  Mlp(ParamSchema& schema, const std::string& prefix, const MlpConfig& cfg, Init weight_init = Init::kaiming_uniform)
      : cfg_(cfg) {
    if (cfg.in_dim <= 0 || cfg.out_dim <= 0 || cfg.hidden_dim <= 0 || cfg.n_layers < 1)
      throw ConfigError("mlp '" + prefix + "': dimensions must be positive");
    const Init bias_init = weight_init == Init::normal_small ? Init::normal_small : Init::kaiming_uniform;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const Index in = l == 0 ? cfg.in_dim : cfg.hidden_dim;
      const Index out = l == cfg.n_layers - 1 ? cfg.out_dim : cfg.hidden_dim;
      const std::string tag = prefix + ".layer" + std::to_string(l);
      weights_.push_back(schema.add(tag + ".weight", out, in, weight_init, in));
      biases_.push_back(schema.add(tag + ".bias", out, 1, bias_init, in));
    }
  }

  const MlpConfig& config() const { return cfg_; }
  const std::vector<int>& weight_slices() const { return weights_; }
  const std::vector<int>& bias_slices() const { return biases_; }

  /// x: (in_dim x B) -> (out_dim x B).
  Var forward(BoundParams& p, Var x) const {
    if (x.rows() != cfg_.in_dim)
      throw DimensionError("mlp: expected input dim " + std::to_string(cfg_.in_dim) + ", got " +
                           std::to_string(x.rows()));
    Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = ad::affine(p.get(weights_[l]), h, p.get(biases_[l]));
      if (l + 1 < weights_.size()) h = ad::activation(h, cfg_.activation, 0);
    }
    return h;
  }

  /// Scalar network value (1 x B) and its input gradient (in_dim x B). The
  /// gradient is assembled from tape primitives so it stays differentiable in
  /// the parameters.
  std::pair<Var, Var> value_and_input_grad(BoundParams& p, Var x) const {
    if (cfg_.out_dim != 1) throw ContractError("value_and_input_grad: network output must be scalar");
    if (x.rows() != cfg_.in_dim) throw DimensionError("mlp: input dimension mismatch");
    std::vector<Var> pre;
    Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Var a = ad::affine(p.get(weights_[l]), h, p.get(biases_[l]));
      if (l + 1 < weights_.size()) {
        pre.push_back(a);
        h = ad::activation(a, cfg_.activation, 0);
      } else {
        h = a;
      }
    }
    Tape& t = p.tape();
    Var g = ad::matmul_tn(p.get(weights_.back()), t.constant(Mat::Ones(1, x.cols())));
    for (int l = static_cast<int>(weights_.size()) - 2; l >= 0; --l) {
      Var delta = ad::hadamard(g, ad::activation(pre[l], cfg_.activation, 1));
      g = ad::matmul_tn(p.get(weights_[l]), delta);
    }
    return {h, g};
  }

 private:
  MlpConfig cfg_;
  std::vector<int> weights_;
  std::vector<int> biases_;
};

// ---------------------------------------------------------------------------
// Lower-triangular factor network

inline Index tri_size(Index n) { return n * (n + 1) / 2; }

/// Row-major lower-triangle ordering: (0,0), (1,0), (1,1), (2,0), ...
inline Mat tril_scatter(Index n) {
  Mat s = Mat::Zero(n * n, tri_size(n));
  Index k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) s(i * n + j, k++) = 1.0;
  return s;
}

/// Flattened row-major lower-triangular matrix from triangle coordinates.
inline Eigen::MatrixXd tril_from_coords(const Eigen::VectorXd& coords, Index n) {
  if (coords.size() != tri_size(n)) throw DimensionError("tril_from_coords: expected n(n+1)/2 entries");
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  Index k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) l(i, j) = coords(k++);
  return l;
}

class TrilNet {
 public:
  TrilNet() = default;
  TrilNet(ParamSchema& schema, const std::string& prefix, Index n, MlpConfig base)
      : n_(n), scatter_(tril_scatter(n)) {
    base.in_dim = n;
    base.out_dim = tri_size(n);
    net_ = Mlp(schema, prefix, base, Init::normal_small);
  }

  Index n() const { return n_; }
  const Mlp& mlp() const { return net_; }

  /// z (n x B) -> flattened row-major L (n*n x B), strictly zero above the diagonal.
  Var forward(BoundParams& p, Var z) const {
    Var coords = net_.forward(p, z);
    return ad::matmul(p.tape().constant(scatter_), coords);
  }

 private:
  Index n_ = 0;
  Mlp net_;
  Mat scatter_;
};

// ---------------------------------------------------------------------------
// Invertible network: affine couplings with fixed orthogonal mixing

struct InnConfig {
  Index dim = 2;
  int n_blocks = 8;
  MlpConfig subnet;  // in/out dims are filled in per block
  std::uint64_t mixing_seed = 0;
  double clamp = 2.0;
};

/// Orthogonal matrix from the QR factorization of a seeded Gaussian matrix,
/// with the sign convention that makes it unique.
inline Mat seeded_orthogonal(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat a(n, n);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
  Eigen::HouseholderQR<Mat> qr(a);
  Mat q = qr.householderQ() * Mat::Identity(n, n);
  const Mat r = qr.matrixQR();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

class Inn {
 public:
  Inn() = default;
  Inn(ParamSchema& schema, const std::string& prefix, const InnConfig& cfg) : cfg_(cfg) {
    if (cfg.dim < 2) throw ConfigError("inn: dim must be at least 2");
    d1_ = cfg.dim / 2;
    d2_ = cfg.dim - d1_;
    for (int b = 0; b < cfg.n_blocks; ++b) {
      MlpConfig sub = cfg.subnet;
      sub.in_dim = d1_;
      sub.out_dim = 2 * d2_;
      subnets_.emplace_back(schema, prefix + ".block" + std::to_string(b), sub);
      mixing_.push_back(seeded_orthogonal(cfg.dim, derive_seed(cfg.mixing_seed, prefix + ".mix" + std::to_string(b))));
    }
  }

  const InnConfig& config() const { return cfg_; }
  const std::vector<Mlp>& subnets() const { return subnets_; }
  const std::vector<Mat>& mixing() const { return mixing_; }

  /// u -> z.
  Var forward(BoundParams& p, Var u) const {
    if (u.rows() != cfg_.dim) throw DimensionError("inn: dimension mismatch");
    Tape& t = p.tape();
    Var x = u;
    for (std::size_t b = 0; b < subnets_.size(); ++b) {
      Var x1 = ad::rows(x, 0, d1_);
      Var x2 = ad::rows(x, d1_, d2_);
      auto [s, sh] = scale_shift(p, b, x1);
      Var y2 = ad::add(ad::hadamard(x2, ad::exp(s)), sh);
      x = ad::matmul(t.constant(mixing_[b]), ad::vcat({x1, y2}));
    }
    return x;
  }

  /// z -> u.
  Var inverse(BoundParams& p, Var z) const {
    if (z.rows() != cfg_.dim) throw DimensionError("inn: dimension mismatch");
    Tape& t = p.tape();
    Var y = z;
    for (int b = static_cast<int>(subnets_.size()) - 1; b >= 0; --b) {
      Var x = ad::matmul(t.constant(mixing_[b].transpose()), y);
      Var x1 = ad::rows(x, 0, d1_);
      Var y2 = ad::rows(x, d1_, d2_);
      auto [s, sh] = scale_shift(p, b, x1);
      Var x2 = ad::hadamard(ad::sub(y2, sh), ad::exp(ad::scale(s, -1.0)));
      y = ad::vcat({x1, x2});
    }
    return y;
  }

 private:
  std::pair<Var, Var> scale_shift(BoundParams& p, std::size_t b, Var x1) const {
    Var raw = subnets_[b].forward(p, x1);
    // s = c * tanh(raw / c) keeps the log-scale inside (-c, c).
    Var s = ad::scale(ad::tanh(ad::scale(ad::rows(raw, 0, d2_), 1.0 / cfg_.clamp)), cfg_.clamp);
    return {s, ad::rows(raw, d2_, d2_)};
  }

  InnConfig cfg_;
  Index d1_ = 1, d2_ = 1;
  std::vector<Mlp> subnets_;
  std::vector<Mat> mixing_;
};

// ---------------------------------------------------------------------------
// Checkpoints: params.bin holds raw little-endian doubles, manifest.json the
// slice table.

inline nlohmann::ordered_json manifest_json(const ParamSchema& schema) {
  nlohmann::ordered_json m;
  m["format"] = "invarc-params-v1";
  m["count"] = schema.total();
  auto& arr = m["slices"] = nlohmann::ordered_json::array();
  for (const auto& s : schema.slices()) {
    arr.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}, {"rows", s.rows}, {"cols", s.cols}});
  }
  return m;
}

inline void write_vector(const std::filesystem::path& path, const Eigen::VectorXd& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline Eigen::VectorXd read_vector(const std::filesystem::path& path, Index expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ConfigError("cannot read " + path.string());
  const auto bytes = static_cast<Index>(in.tellg());
  if (bytes != expected * static_cast<Index>(sizeof(double)))
    throw ConfigError(path.string() + ": expected " + std::to_string(expected) + " values");
  in.seekg(0);
  Eigen::VectorXd v(expected);
  in.read(reinterpret_cast<char*>(v.data()), bytes);
  return v;
}

inline void save_checkpoint(const std::filesystem::path& dir, const ParamStore& store) {
  std::filesystem::create_directories(dir);
  write_vector(dir / "params.bin", store.values());
  std::ofstream(dir / "manifest.json") << manifest_json(store.schema()).dump(2) << "\n";
}

/// Loads values into a store whose schema must match the manifest exactly.
inline void load_checkpoint(const std::filesystem::path& dir, ParamStore& store) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw ConfigError("missing manifest in " + dir.string());
  const auto m = nlohmann::json::parse(mf);
  const auto expected = manifest_json(store.schema());
  if (m["count"].get<Index>() != store.size() || m["slices"].size() != expected["slices"].size())
    throw ConfigError("checkpoint does not match model schema");
  for (std::size_t i = 0; i < m["slices"].size(); ++i) {
    const auto& a = m["slices"][i];
    const auto& b = expected["slices"][i];
    if (a["name"] != b["name"] || a["offset"] != b["offset"] || a["length"] != b["length"])
      throw ConfigError("checkpoint slice '" + a["name"].get<std::string>() + "' does not match model schema");
  }
  store.values() = read_vector(dir / "params.bin", store.size());
}

}  // namespace invarc::nets
