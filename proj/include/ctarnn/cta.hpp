#pragma once

#include <utility>
#include <vector>

#include "ctarnn/layers.hpp"
#include "ctarnn/params.hpp"
#include "ctarnn/tensor.hpp"

namespace ctarnn {

// Channel/temporal attention over a stack of per-channel sequences
// H: [B x N x m x d] with a shared time mask [B x m].
//
// Naming follows the pooled axis: the time-pooled anchor (one row per
// channel) scores channel attention alpha_t; the channel-pooled anchor (one
// row per step) scores temporal attention alpha_c.

enum class AttentionMode { learned, uniform };

struct CtaHead {
  Tensor w_q_t;  // [1 x head_dim]
  Tensor w_k_t;  // [head_dim x model_dim]
  Tensor w_q_c;  // [1 x head_dim]
  Tensor w_k_c;  // [head_dim x model_dim]
  Tensor w_v;    // [head_dim x model_dim]
};

struct CtaConfig {
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  AttentionMode mode = AttentionMode::learned;
};

class CtaParams {
 public:
  CtaParams() = default;
  // In uniform mode only the value maps exist.
  CtaParams(const CtaConfig& cfg, Rng& rng);

  const CtaConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.heads * cfg_.head_dim; }
  std::vector<CtaHead>& heads() { return heads_; }
  const std::vector<CtaHead>& heads() const { return heads_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  CtaConfig cfg_;
  std::vector<CtaHead> heads_;
};

struct CtaAttentionOutput {
  std::vector<Tensor> alpha_t;  // per head, [B x N]
  std::vector<Tensor> alpha_c;  // per head, [B x m], zero on padding
  std::vector<Tensor> a;        // per head, [B x m x N] = outer(alpha_c, alpha_t)
  Tensor v;                     // [B x heads*head_dim]
};

struct Anchors {
  Tensor channel_pooled;  // [B x m x d], mean over channels
  Tensor time_pooled;     // [B x N x d], masked mean over time
};

Anchors anchors(const Tensor& h, const Mask& mask);

// Per head: alpha_t = softmax over channels (never masked), alpha_c = softmax
// over valid steps, A = outer(alpha_c, alpha_t),
// v_head[k] = sum_{t,c} A[t,c] * (W_V H^T)[k,t,c]; heads are concatenated.
CtaAttentionOutput cta_attend(const Tensor& h, const Mask& mask, const CtaParams& params);

// Reference alternative: one softmax over all N*m (channel, step) rows.
MhsaOutput flat_global_attention(const Tensor& h, const Mask& mask, const MhsaParams& params);

struct AttentionBenchRow {
  std::size_t channels = 0;
  double cta_ms = 0.0;   // best of the repetitions
  double flat_ms = 0.0;
  double ratio() const { return flat_ms / cta_ms; }
};

// Times cta_attend against flat_global_attention (inference, batch 1) on
// random stacks [1 x N x m x d] for every N in `channels`.
std::vector<AttentionBenchRow> bench_attention(const std::vector<std::size_t>& channels,
                                               std::size_t m, std::size_t d, std::size_t heads,
                                               std::size_t head_dim, int repetitions,
                                               std::uint64_t seed);

// Time mask [B x m] repeated for every channel: [B x N*m], channel-major.
Mask tile_mask(const Mask& mask, std::size_t channels);

}  // namespace ctarnn
