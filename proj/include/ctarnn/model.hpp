#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctarnn/config_file.hpp"
#include "ctarnn/cta.hpp"
#include "ctarnn/manifest.hpp"
#include "ctarnn/params.hpp"
#include "ctarnn/tensor.hpp"

namespace ctarnn {

enum class ModelKind { rnn, wf, ef, lf, cta, cta_nornn };

const char* model_kind_name(ModelKind kind);
std::optional<ModelKind> parse_model_kind(const std::string& name);

// Architecture record. Input dims of 0 mean "take from the data"; they must be
// resolved before a model is built.
struct ModelConfig {
  ModelKind kind = ModelKind::cta;
  std::vector<StreamKind> streams{StreamKind::embeddings};
  std::vector<std::size_t> blocks;  // 1-based block indices; empty selects all
  std::size_t n_blocks = 0;         // channels stored in each embeddings file
  std::size_t spectrogram_dim = 0;
  std::size_t text_dim = 0;
  std::size_t embedding_dim = 0;
  std::size_t n_classes = 4;
  std::size_t hidden = 256;
  std::size_t rnn_layers = 2;
  double dropout = 0.3;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  bool share_rnn = false;
  AttentionMode attention = AttentionMode::learned;
  std::uint64_t seed = 1;

  // 0-based indices of the selected blocks.
  std::vector<std::size_t> selected_blocks() const;
  std::size_t channels() const { return selected_blocks().size(); }
  std::size_t stream_dim(StreamKind kind) const;
  bool uses(StreamKind kind) const;

  // Throws ConfigError on inconsistent settings; `resolved` also requires
  // every used input dim to be known.
  void validate(bool resolved = true) const;

  static const std::vector<std::string>& keys();
  static ModelConfig from_config(const KeyValueConfig& cfg);
  void write_to(KeyValueConfig& cfg) const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// One padded input stream. Sequence streams are [B x len x d]; the stacked
// embeddings stream is [B x N x m x d] with N the selected blocks. The mask is
// [B x len] (resp. [B x m]).
struct StreamBatch {
  Tensor x;
  Mask mask;
};

struct Batch {
  std::map<StreamKind, StreamBatch> streams;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return ids.size(); }
  const StreamBatch& stream(StreamKind kind) const;
};

struct ForwardResult {
  Tensor logits;                                // [B x n_classes]
  std::optional<CtaAttentionOutput> attention;  // CTA models only
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  virtual ForwardResult forward(const Batch& batch, bool training, Rng* rng) const = 0;
  virtual void collect(ParamList& out) const = 0;
  ParamList parameters() const;

  Tensor probabilities(const Batch& batch) const;

  // Throws CheckFailure if a structural invariant of the parameters is broken.
  virtual void check_invariants() const {}

 private:
  ModelConfig cfg_;
};

std::unique_ptr<Model> make_model(const ModelConfig& cfg);

// Two-stream late fusion (A+T, A+E(i), T+E(i)). An embeddings stream must
// select exactly one block.
ModelConfig bimodal_config(const ModelConfig& base, StreamKind x, StreamKind y);

}  // namespace ctarnn
