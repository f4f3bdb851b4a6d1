#pragma once

#include <vector>

#include "ctarnn/params.hpp"

namespace ctarnn {

// Adam with bias correction. Parameters without an accumulated gradient are
// left untouched and keep their moment state.
class Adam {
 public:
  Adam(ParamList params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Throws CheckFailure naming the parameter if any gradient is NaN or Inf;
  // nothing is updated in that case.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> t_param_;
  std::size_t t_ = 0;
};

// Multiplies the rate by `factor` once the best loss seen so far has not
// improved (strictly) for `patience` consecutive observations; the count
// restarts on improvement and after every reduction.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr0, std::size_t patience = 10, double factor = 0.5);

  // Records one validation loss; returns the rate for the next epoch.
  double observe(double loss);
  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t stale_epochs() const { return stale_; }
  std::size_t reductions() const { return reductions_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_;
  std::size_t stale_ = 0;
  std::size_t reductions_ = 0;
};

}  // namespace ctarnn
