#pragma once

#include "ctarnn/params.hpp"
#include "ctarnn/tensor.hpp"

namespace ctarnn {

// Block weights of weighted fusion: softmax over free logits.
struct WfParams {
  Tensor logits;  // [N]

  static WfParams init(std::size_t blocks);
  Tensor weights() const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Convex combination of blocks. E: [N x m x d] -> [m x d], or batched
// [B x N x m x d] -> [B x m x d].
Tensor wf_fuse(const Tensor& e, const WfParams& wf);

// Blocks concatenated along the feature axis. E: [N x m x d] -> [m x N*d], or
// batched [B x N x m x d] -> [B x m x N*d]; block k occupies columns
// [k*d, (k+1)*d).
Tensor ef_fuse(const Tensor& e);

}  // namespace ctarnn
