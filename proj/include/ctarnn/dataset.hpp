#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctarnn/manifest.hpp"
#include "ctarnn/model.hpp"
#include "ctarnn/seqf.hpp"

namespace ctarnn {

// Sorted distinct labels of a manifest.
std::vector<std::string> manifest_classes(const Manifest& manifest);

// Fills the unset input dims (and n_blocks) of `cfg` from the first record's
// stream headers. Throws ConfigError when a set value disagrees.
void resolve_input_dims(ModelConfig& cfg, const Manifest& manifest);

struct Utterance {
  std::string id;
  std::string speaker;
  std::string session;
  int label = 0;
  // Sequence streams are [len x d]; embeddings are [N_selected x m x d].
  std::map<StreamKind, FloatArray> streams;
  nlohmann::json meta;

  // Time steps of the longest stream.
  std::size_t length() const;
};

// In-memory copy of the streams a model consumes, with block selection
// already applied. Every file is checked against the resolved config.
class Dataset {
 public:
  Dataset() = default;
  Dataset(const Manifest& manifest, const ModelConfig& cfg, const std::vector<std::string>& classes);

  const std::vector<Utterance>& items() const { return items_; }
  const Utterance& operator[](std::size_t i) const { return items_[i]; }
  std::size_t size() const { return items_.size(); }
  const std::vector<std::string>& classes() const { return classes_; }

 private:
  std::vector<Utterance> items_;
  std::vector<std::string> classes_;
};

// Pads each stream to the longest member of the batch. dtype is f32.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

// Groups indices into batches of similar length. With an rng the order
// within equal lengths and the order of batches are shuffled; without one
// the grouping is deterministic by length.
std::vector<std::vector<std::size_t>> length_batches(const Dataset& data,
                                                     std::vector<std::size_t> indices,
                                                     std::size_t batch_size, Rng* rng);

}  // namespace ctarnn
