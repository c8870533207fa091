#pragma once

#include <Eigen/Dense>

#include "invarc/autodiff.hpp"
#include "invarc/nets.hpp"

namespace invarc::fields {

using ad::Mat;
using ad::Tape;
using ad::Var;
using nets::BoundParams;
using nets::ParamStore;
using Index = Eigen::Index;
using Time = Eigen::RowVectorXd;

/// A differentiable vector field over a batch of states, one per column.
class Field {
 public:
  virtual ~Field() = default;
  virtual Index dim() const = 0;
  virtual Var eval(BoundParams& p, Var z, const Time& t) const = 0;
};

/// Evaluates a field without recording gradients.
inline Mat evaluate(const Field& f, const ParamStore& store, const Mat& z, const Time& t) {
  Tape tape;
  BoundParams p(store, tape, false);
  return f.eval(p, tape.constant(z), t).value();
}

inline Mat evaluate(const Field& f, const ParamStore& store, const Mat& z, double t = 0.0) {
  return evaluate(f, store, z, Time::Constant(z.cols(), t));
}

}  // namespace invarc::fields
