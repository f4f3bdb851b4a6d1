#include "ctarnn/layers.hpp"

#include <cmath>

namespace ctarnn {

namespace {

Tensor gru_step(const Tensor& xz, const Tensor& xr, const Tensor& xh, const Tensor& h,
                const GruParams& p) {
  const Tensor z = sigmoid(add(xz, linear(h, p.u_z)));
  const Tensor r = sigmoid(add(xr, linear(h, p.u_r)));
  const Tensor c = tanh(add(xh, linear(mul(r, h), p.u_h)));
  return add(mul(one_minus(z), h), mul(z, c));
}

// Input projection for every (b, t) at once: [B x m x in] -> [B x m x hidden].
Tensor project(const Tensor& x2, const Tensor& w, const Tensor& b, std::size_t batch,
               std::size_t steps) {
  return reshape(linear(x2, w, b), {batch, steps, w.size(0)});
}

Tensor run_direction(const Tensor& x, const Mask& mask, const GruParams& p, bool reverse) {
  const std::size_t batch = x.size(0), steps = x.size(1);
  const Tensor x2 = reshape(x, {batch * steps, x.size(2)});
  return gru_scan(project(x2, p.w_z, p.b_z, batch, steps), project(x2, p.w_r, p.b_r, batch, steps),
                  project(x2, p.w_h, p.b_h, batch, steps), p.u_z, p.u_r, p.u_h, mask.valid, reverse);
}

void check_sequence_mask(const Tensor& x, const Mask& mask) {
  if (x.dim() != 3) throw DimensionError("bigru: expected [B x m x d], got " + shape_str(x.shape()));
  if (x.size(1) == 0) throw DimensionError("bigru: empty sequence");
  if (mask.shape != Shape{x.size(0), x.size(1)}) {
    throw DimensionError("bigru: mask shape " + shape_str(mask.shape) + " does not match " +
                         shape_str(x.shape()));
  }
  for (std::size_t b = 0; b < x.size(0); ++b) {
    if (!mask.valid[b * x.size(1)]) {
      throw InvalidMaskError("bigru: row " + std::to_string(b) + " has no valid prefix");
    }
  }
}

}  // namespace

GruParams GruParams::init(std::size_t input_dim, std::size_t hidden, Rng& rng) {
  GruParams p;
  p.w_z = init_uniform({hidden, input_dim}, rng);
  p.u_z = init_uniform({hidden, hidden}, rng);
  p.b_z = init_zeros({hidden});
  p.w_r = init_uniform({hidden, input_dim}, rng);
  p.u_r = init_uniform({hidden, hidden}, rng);
  p.b_r = init_zeros({hidden});
  p.w_h = init_uniform({hidden, input_dim}, rng);
  p.u_h = init_uniform({hidden, hidden}, rng);
  p.b_h = init_zeros({hidden});
  return p;
}

void GruParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w_z", w_z});
  out.push_back({prefix + ".u_z", u_z});
  out.push_back({prefix + ".b_z", b_z});
  out.push_back({prefix + ".w_r", w_r});
  out.push_back({prefix + ".u_r", u_r});
  out.push_back({prefix + ".b_r", b_r});
  out.push_back({prefix + ".w_h", w_h});
  out.push_back({prefix + ".u_h", u_h});
  out.push_back({prefix + ".b_h", b_h});
}

Tensor gru_cell(const Tensor& x, const Tensor& h_prev, const GruParams& p) {
  if (x.dim() != 2 || h_prev.dim() != 2 || x.size(0) != h_prev.size(0)) {
    throw DimensionError("gru_cell: x " + shape_str(x.shape()) + ", h " +
                         shape_str(h_prev.shape()));
  }
  return gru_step(linear(x, p.w_z, p.b_z), linear(x, p.w_r, p.b_r), linear(x, p.w_h, p.b_h),
                  h_prev, p);
}

BiGruStack::BiGruStack(const BiGruConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.input_dim == 0 || cfg.hidden == 0 || cfg.layers == 0) {
    throw std::invalid_argument("bigru: input_dim, hidden and layers must be positive");
  }
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) {
    throw std::invalid_argument("bigru: dropout must lie in [0, 1)");
  }
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    GruParams fwd = GruParams::init(in, cfg.hidden, rng);
    GruParams bwd = GruParams::init(in, cfg.hidden, rng);
    layers_.push_back({std::move(fwd), std::move(bwd)});
    in = 2 * cfg.hidden;
  }
}

Tensor BiGruStack::forward(const Tensor& x, const Mask& mask, bool training, Rng* rng) const {
  check_sequence_mask(x, mask);
  if (x.size(2) != cfg_.input_dim) {
    throw DimensionError("bigru: input dim " + std::to_string(x.size(2)) + ", expected " +
                         std::to_string(cfg_.input_dim));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (l > 0 && training && rng && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *rng);
    const Tensor f = run_direction(h, mask, layers_[l][0], false);
    const Tensor b = run_direction(h, mask, layers_[l][1], true);
    h = concat({f, b}, 2);
  }
  return h;
}

void BiGruStack::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l][0].collect(out, prefix + ".l" + std::to_string(l) + ".fwd");
    layers_[l][1].collect(out, prefix + ".l" + std::to_string(l) + ".bwd");
  }
}

MhsaParams::MhsaParams(const MhsaConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.model_dim == 0 || cfg.heads == 0 || cfg.head_dim == 0) {
    throw std::invalid_argument("mhsa: model_dim, heads and head_dim must be positive");
  }
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    MhsaHead head;
    head.w_q = init_uniform({1, cfg.head_dim}, rng);
    head.w_k = init_uniform({cfg.head_dim, cfg.model_dim}, rng);
    head.w_v = init_uniform({cfg.head_dim, cfg.model_dim}, rng);
    heads_.push_back(std::move(head));
  }
}

void MhsaParams::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t j = 0; j < heads_.size(); ++j) {
    const std::string p = prefix + ".h" + std::to_string(j);
    out.push_back({p + ".w_q", heads_[j].w_q});
    out.push_back({p + ".w_k", heads_[j].w_k});
    out.push_back({p + ".w_v", heads_[j].w_v});
  }
}

Tensor attention_scores(const Tensor& x, const Tensor& w_k, const Tensor& w_q) {
  const Tensor s = linear(linear(x, w_k), w_q);  // [rows x 1]
  return scale(reshape(s, {x.size(0)}), 1.0 / std::sqrt(static_cast<double>(w_k.size(0))));
}

MhsaOutput mhsa_pool(const Tensor& h, const Mask& mask, const MhsaParams& params) {
  if (h.dim() != 3) throw DimensionError("mhsa: expected [B x m x d], got " + shape_str(h.shape()));
  const std::size_t batch = h.size(0), steps = h.size(1), d = h.size(2);
  if (d != params.config().model_dim) {
    throw DimensionError("mhsa: model dim " + std::to_string(d) + ", expected " +
                         std::to_string(params.config().model_dim));
  }
  if (mask.shape != Shape{batch, steps}) {
    throw DimensionError("mhsa: mask shape " + shape_str(mask.shape) + " does not match " +
                         shape_str(h.shape()));
  }
  const Tensor h2 = reshape(h, {batch * steps, d});
  MhsaOutput out;
  for (const auto& head : params.heads()) {
    const Tensor scores = reshape(attention_scores(h2, head.w_k, head.w_q), {batch, steps});
    out.alpha.push_back(softmax(scores, &mask));
  }
  // W_V is linear, so projecting the weighted sum of H equals weighting W_V H^T.
  std::vector<Tensor> rows;
  for (const auto& a : out.alpha) rows.push_back(reshape(a, {batch, 1, steps}));
  const Tensor pooled = bmm(rows.size() == 1 ? rows[0] : concat(rows, 1), h);
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < params.heads().size(); ++j) {
    parts.push_back(linear(select(pooled, 1, j), params.heads()[j].w_v));
  }
  out.v = parts.size() == 1 ? parts[0] : concat(parts, 1);
  return out;
}

ClassifierHead::ClassifierHead(std::size_t input_dim, std::size_t n_classes, Rng& rng)
    : weight_(init_uniform({n_classes, input_dim}, rng)), bias_(init_zeros({n_classes})) {
  if (input_dim == 0 || n_classes < 2) {
    throw std::invalid_argument("classifier: need input_dim > 0 and at least two classes");
  }
}

Tensor ClassifierHead::logits(const Tensor& v) const { return linear(v, weight_, bias_); }

Tensor ClassifierHead::probabilities(const Tensor& v) const { return softmax(logits(v)); }

void ClassifierHead::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

}  // namespace ctarnn
