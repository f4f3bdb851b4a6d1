#include "ctarnn/params.hpp"

#include <cmath>

namespace ctarnn {

Tensor init_uniform(const Shape& shape, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.back()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  Tensor t = Tensor::from_values(shape, v, DType::f32);
  t.set_requires_grad(true);
  return t;
}

Tensor init_zeros(const Shape& shape) {
  Tensor t = Tensor::zeros(shape, DType::f32);
  t.set_requires_grad(true);
  return t;
}

std::size_t count_elements(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

}  // namespace ctarnn
