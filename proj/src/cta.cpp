#include "ctarnn/cta.hpp"

#include <algorithm>
#include <chrono>
#include <limits>

namespace ctarnn {

namespace {

void check_stack(const Tensor& h, const Mask& mask, const char* op) {
  if (h.dim() != 4) {
    throw DimensionError(std::string(op) + ": expected [B x N x m x d], got " + shape_str(h.shape()));
  }
  if (mask.shape != Shape{h.size(0), h.size(2)}) {
    throw DimensionError(std::string(op) + ": mask shape " + shape_str(mask.shape) +
                         " does not match " + shape_str(h.shape()));
  }
}

Tensor uniform_scores(std::size_t batch, std::size_t n, DType dtype) {
  return Tensor::zeros({batch, n}, dtype);
}

}  // namespace

CtaParams::CtaParams(const CtaConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.model_dim == 0 || cfg.heads == 0 || cfg.head_dim == 0) {
    throw std::invalid_argument("cta: model_dim, heads and head_dim must be positive");
  }
  const bool learned = cfg.mode == AttentionMode::learned;
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    CtaHead head;
    if (learned) {
      head.w_q_t = init_uniform({1, cfg.head_dim}, rng);
      head.w_k_t = init_uniform({cfg.head_dim, cfg.model_dim}, rng);
      head.w_q_c = init_uniform({1, cfg.head_dim}, rng);
      head.w_k_c = init_uniform({cfg.head_dim, cfg.model_dim}, rng);
    }
    head.w_v = init_uniform({cfg.head_dim, cfg.model_dim}, rng);
    heads_.push_back(std::move(head));
  }
}

void CtaParams::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t j = 0; j < heads_.size(); ++j) {
    const std::string p = prefix + ".h" + std::to_string(j);
    const auto& h = heads_[j];
    if (h.w_q_t.defined()) {
      out.push_back({p + ".w_q_t", h.w_q_t});
      out.push_back({p + ".w_k_t", h.w_k_t});
      out.push_back({p + ".w_q_c", h.w_q_c});
      out.push_back({p + ".w_k_c", h.w_k_c});
    }
    out.push_back({p + ".w_v", h.w_v});
  }
}

Mask tile_mask(const Mask& mask, std::size_t channels) {
  const std::size_t batch = mask.shape[0], steps = mask.shape[1];
  Mask out{{batch, channels * steps}, {}};
  out.valid.reserve(batch * channels * steps);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      out.valid.insert(out.valid.end(), mask.valid.begin() + b * steps,
                       mask.valid.begin() + (b + 1) * steps);
    }
  }
  return out;
}

Anchors anchors(const Tensor& h, const Mask& mask) {
  check_stack(h, mask, "anchors");
  const Mask per_channel = tile_mask(mask, h.size(1));
  const Mask time_mask{{h.size(0), h.size(1), h.size(2)}, per_channel.valid};
  return {mean_axis(h, 1), mean_axis(h, 2, &time_mask)};
}

CtaAttentionOutput cta_attend(const Tensor& h, const Mask& mask, const CtaParams& params) {
  check_stack(h, mask, "cta_attend");
  const std::size_t batch = h.size(0), n = h.size(1), steps = h.size(2), d = h.size(3);
  if (d != params.config().model_dim) {
    throw DimensionError("cta_attend: model dim " + std::to_string(d) + ", expected " +
                         std::to_string(params.config().model_dim));
  }
  const bool learned = params.config().mode == AttentionMode::learned;
  Anchors anc = anchors(h, mask);
  const Tensor time_rows = reshape(anc.time_pooled, {batch * n, d});
  const Tensor step_rows = reshape(anc.channel_pooled, {batch * steps, d});
  const Tensor flat = reshape(h, {batch, n * steps, d});

  CtaAttentionOutput out;
  std::vector<Tensor> weights;
  for (const auto& head : params.heads()) {
    const Tensor s_t = learned ? reshape(attention_scores(time_rows, head.w_k_t, head.w_q_t), {batch, n})
                               : uniform_scores(batch, n, h.dtype());
    const Tensor s_c = learned ? reshape(attention_scores(step_rows, head.w_k_c, head.w_q_c), {batch, steps})
                               : uniform_scores(batch, steps, h.dtype());
    const Tensor alpha_t = softmax(s_t);
    const Tensor alpha_c = softmax(s_c, &mask);
    const Tensor a = mul(broadcast_to(reshape(alpha_c, {batch, steps, 1}), {batch, steps, n}),
                         broadcast_to(reshape(alpha_t, {batch, 1, n}), {batch, steps, n}));
    weights.push_back(reshape(permute(a, {0, 2, 1}), {batch, 1, n * steps}));
    out.alpha_t.push_back(alpha_t);
    out.alpha_c.push_back(alpha_c);
    out.a.push_back(a);
  }
  // W_V is linear, so projecting the A-weighted sum of H equals weighting W_V H^T.
  const Tensor pooled = bmm(weights.size() == 1 ? weights[0] : concat(weights, 1), flat);
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < params.heads().size(); ++j) {
    parts.push_back(linear(select(pooled, 1, j), params.heads()[j].w_v));
  }
  out.v = parts.size() == 1 ? parts[0] : concat(parts, 1);
  return out;
}

MhsaOutput flat_global_attention(const Tensor& h, const Mask& mask, const MhsaParams& params) {
  check_stack(h, mask, "flat_global_attention");
  const std::size_t batch = h.size(0), n = h.size(1), steps = h.size(2), d = h.size(3);
  return mhsa_pool(reshape(h, {batch, n * steps, d}), tile_mask(mask, n), params);
}

std::vector<AttentionBenchRow> bench_attention(const std::vector<std::size_t>& channels,
                                               std::size_t m, std::size_t d, std::size_t heads,
                                               std::size_t head_dim, int repetitions,
                                               std::uint64_t seed) {
  if (repetitions < 1 || m == 0 || d == 0) throw std::invalid_argument("bench: bad arguments");
  NoGradGuard no_grad;
  Rng rng(seed);
  CtaParams cta({d, heads, head_dim, AttentionMode::learned}, rng);
  MhsaParams flat({d, heads, head_dim}, rng);
  std::normal_distribution<double> noise;
  std::vector<AttentionBenchRow> rows;
  for (std::size_t n : channels) {
    if (n == 0) throw std::invalid_argument("bench: channel count must be positive");
    std::vector<double> values(n * m * d);
    for (auto& v : values) v = noise(rng);
    const Tensor h = Tensor::from_values({1, n, m, d}, values);
    const Mask mask = Mask::all_valid({1, m});
    auto best_of = [&](auto&& fn) {
      double best = std::numeric_limits<double>::infinity();
      for (int r = 0; r < repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      return best;
    };
    AttentionBenchRow row;
    row.channels = n;
    row.cta_ms = best_of([&] { (void)cta_attend(h, mask, cta); });
    row.flat_ms = best_of([&] { (void)flat_global_attention(h, mask, flat); });
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ctarnn
