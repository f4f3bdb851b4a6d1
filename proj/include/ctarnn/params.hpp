#pragma once

#include <string>
#include <vector>

#include "ctarnn/tensor.hpp"

namespace ctarnn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in is the column count.
Tensor init_uniform(const Shape& shape, Rng& rng);
Tensor init_zeros(const Shape& shape);

std::size_t count_elements(const ParamList& params);
std::vector<Tensor> tensors_of(const ParamList& params);

}  // namespace ctarnn
