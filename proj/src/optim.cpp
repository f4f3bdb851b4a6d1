#include "ctarnn/optim.hpp"

#include <cmath>
#include <limits>

#include "ctarnn/errors.hpp"

namespace ctarnn {

Adam::Adam(ParamList params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
    throw ConfigError("adam: betas must lie in [0, 1) and eps must be positive");
  }
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
  t_param_.assign(params_.size(), 0);
}

namespace {

template <typename T>
void check_finite(const NamedParam& p) {
  for (T g : p.tensor.grad_data<T>()) {
    if (!std::isfinite(g)) throw CheckFailure("non-finite gradient in parameter " + p.name);
  }
}

template <typename T>
void update(Tensor& t, std::vector<double>& m, std::vector<double>& v, double beta1, double beta2,
            double eps, double lr, std::size_t step) {
  auto g = t.grad_data<T>();
  auto w = t.mutable_data<T>();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
    w[i] = static_cast<T>(w[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
  }
}

}  // namespace

void Adam::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    if (p.tensor.dtype() == DType::f64) {
      check_finite<double>(p);
    } else {
      check_finite<float>(p);
    }
  }
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    const std::size_t step = ++t_param_[i];
    if (t.dtype() == DType::f64) {
      update<double>(t, m_[i], v_[i], beta1_, beta2_, eps_, lr, step);
    } else {
      update<float>(t, m_[i], v_[i], beta1_, beta2_, eps_, lr, step);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

PlateauScheduler::PlateauScheduler(double lr0, std::size_t patience, double factor)
    : lr_(lr0), patience_(patience), factor_(factor), best_(std::numeric_limits<double>::infinity()) {
  if (!(lr0 > 0.0) || patience == 0 || !(factor > 0.0 && factor < 1.0)) {
    throw ConfigError("scheduler: need lr0 > 0, patience >= 1 and factor in (0, 1)");
  }
}

double PlateauScheduler::observe(double loss) {
  if (loss < best_) {
    best_ = loss;
    stale_ = 0;
  } else if (++stale_ == patience_) {
    lr_ *= factor_;
    ++reductions_;
    stale_ = 0;
  }
  return lr_;
}

}  // namespace ctarnn
