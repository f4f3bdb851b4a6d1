#include "ctarnn/fusion.hpp"

namespace ctarnn {

namespace {

// Lifts an unbatched [N x m x d] stack to [1 x N x m x d].
Tensor as_batched(const Tensor& e, const char* op) {
  if (e.dim() == 3) return reshape(e, {1, e.size(0), e.size(1), e.size(2)});
  if (e.dim() == 4) return e;
  throw DimensionError(std::string(op) + ": expected [N x m x d] or [B x N x m x d], got " +
                       shape_str(e.shape()));
}

}  // namespace

WfParams WfParams::init(std::size_t blocks) {
  if (blocks == 0) throw std::invalid_argument("wf: need at least one block");
  return {init_zeros({blocks})};
}

Tensor WfParams::weights() const { return softmax(logits); }

void WfParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".logits", logits});
}

Tensor wf_fuse(const Tensor& e, const WfParams& wf) {
  const Tensor x = as_batched(e, "wf_fuse");
  const std::size_t batch = x.size(0), n = x.size(1), steps = x.size(2), d = x.size(3);
  if (wf.logits.numel() != n) {
    throw DimensionError("wf_fuse: " + std::to_string(wf.logits.numel()) + " weights for " +
                         std::to_string(n) + " blocks");
  }
  const Tensor w = broadcast_to(reshape(wf.weights(), {1, n, 1, 1}), x.shape());
  const Tensor fused = sum_axis(mul(x, w), 1);
  return e.dim() == 3 ? reshape(fused, {steps, d}) : reshape(fused, {batch, steps, d});
}

Tensor ef_fuse(const Tensor& e) {
  const Tensor x = as_batched(e, "ef_fuse");
  const std::size_t batch = x.size(0), n = x.size(1), steps = x.size(2), d = x.size(3);
  const Tensor joined = reshape(permute(x, {0, 2, 1, 3}), {batch, steps, n * d});
  return e.dim() == 3 ? reshape(joined, {steps, n * d}) : joined;
}

}  // namespace ctarnn
