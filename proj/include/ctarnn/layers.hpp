#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctarnn/params.hpp"
#include "ctarnn/tensor.hpp"

namespace ctarnn {

// ---------------------------------------------------------------------------
// GRU

// One direction of one GRU layer. W_* map the input, U_* the previous state.
struct GruParams {
  Tensor w_z, u_z, b_z;
  Tensor w_r, u_r, b_r;
  Tensor w_h, u_h, b_h;

  static GruParams init(std::size_t input_dim, std::size_t hidden, Rng& rng);
  std::size_t input_dim() const { return w_z.size(1); }
  std::size_t hidden() const { return w_z.size(0); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// z = sigmoid(W_z x + U_z h + b_z)
// r = sigmoid(W_r x + U_r h + b_r)
// c = tanh(W_h x + U_h (r * h) + b_h)
// h' = (1 - z) * h + z * c
// x: [B x in], h_prev: [B x hidden].
Tensor gru_cell(const Tensor& x, const Tensor& h_prev, const GruParams& params);

struct BiGruConfig {
  std::size_t input_dim = 0;
  std::size_t hidden = 256;  // per direction
  std::size_t layers = 2;
  double dropout = 0.3;      // between layers, training only
};

class BiGruStack {
 public:
  BiGruStack() = default;
  BiGruStack(const BiGruConfig& cfg, Rng& rng);

  const BiGruConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return 2 * cfg_.hidden; }

  // x: [B x m x input_dim], mask: [B x m] with each row's valid prefix.
  // Returns [B x m x 2*hidden]; entries at padded positions are unspecified
  // and carry no gradient once downstream ops mask them.
  Tensor forward(const Tensor& x, const Mask& mask, bool training, Rng* rng) const;

  // layer -> {forward, backward}
  const std::vector<std::array<GruParams, 2>>& layers() const { return layers_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  BiGruConfig cfg_;
  std::vector<std::array<GruParams, 2>> layers_;
};

// ---------------------------------------------------------------------------
// Multi-head self-attention pooling

struct MhsaHead {
  Tensor w_q;  // [1 x head_dim]
  Tensor w_k;  // [head_dim x model_dim]
  Tensor w_v;  // [head_dim x model_dim]
};

struct MhsaConfig {
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
};

class MhsaParams {
 public:
  MhsaParams() = default;
  MhsaParams(const MhsaConfig& cfg, Rng& rng);

  const MhsaConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.heads * cfg_.head_dim; }
  std::vector<MhsaHead>& heads() { return heads_; }
  const std::vector<MhsaHead>& heads() const { return heads_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  MhsaConfig cfg_;
  std::vector<MhsaHead> heads_;
};

struct MhsaOutput {
  Tensor v;                   // [B x heads*head_dim]
  std::vector<Tensor> alpha;  // per head, [B x m]
};

// Scaled single-query attention scores: w_q (w_k x_i^T) / sqrt(head_dim)
// for every row x_i of x: [rows x model_dim] -> [rows].
Tensor attention_scores(const Tensor& x, const Tensor& w_k, const Tensor& w_q);

// Per head: alpha = softmax over valid positions of the scaled scores of H,
// v_head = W_V H^T alpha; heads are concatenated. H: [B x m x model_dim].
MhsaOutput mhsa_pool(const Tensor& h, const Mask& mask, const MhsaParams& params);

// ---------------------------------------------------------------------------
// Classifier

class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t input_dim, std::size_t n_classes, Rng& rng);

  std::size_t input_dim() const { return weight_.size(1); }
  std::size_t n_classes() const { return weight_.size(0); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  Tensor logits(const Tensor& v) const;         // [B x n_classes]
  Tensor probabilities(const Tensor& v) const;  // rows sum to 1
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Tensor weight_;  // [n_classes x input_dim]
  Tensor bias_;    // [n_classes]
};

}  // namespace ctarnn
