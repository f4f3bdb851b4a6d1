#include "ctarnn/dataset.hpp"

#include <algorithm>
#include <set>

#include "ctarnn/errors.hpp"

namespace ctarnn {

std::vector<std::string> manifest_classes(const Manifest& manifest) {
  std::set<std::string> labels;
  for (const auto& r : manifest.records) labels.insert(r.label);
  return {labels.begin(), labels.end()};
}

namespace {

void set_dim(std::size_t& slot, std::size_t value, const char* what) {
  if (slot == 0) {
    slot = value;
  } else if (slot != value) {
    throw ConfigError(std::string(what) + " is " + std::to_string(slot) + " in the config but " +
                      std::to_string(value) + " in the data");
  }
}

const std::filesystem::path& stream_path(const ManifestRecord& r, StreamKind kind) {
  const auto& p = r.stream(kind);
  if (!p) throw ConfigError("utterance " + r.utterance_id + " has no " + stream_key(kind) + " stream");
  return *p;
}

}  // namespace

void resolve_input_dims(ModelConfig& cfg, const Manifest& manifest) {
  if (manifest.records.empty()) throw ConfigError("manifest is empty");
  const auto& first = manifest.records.front();
  for (StreamKind kind : cfg.streams) {
    const Shape s = inspect_seqf(manifest.resolve(stream_path(first, kind)));
    switch (kind) {
      case StreamKind::spectrogram:
        if (s.size() != 2) throw ConfigError("spectrogram files must be [frames x dims]");
        set_dim(cfg.spectrogram_dim, s[1], "spectrogram_dim");
        break;
      case StreamKind::text:
        if (s.size() != 2) throw ConfigError("text files must be [tokens x dims]");
        set_dim(cfg.text_dim, s[1], "text_dim");
        break;
      case StreamKind::embeddings:
        if (s.size() != 3) throw ConfigError("embeddings files must be [blocks x frames x dims]");
        set_dim(cfg.n_blocks, s[0], "n_blocks");
        set_dim(cfg.embedding_dim, s[2], "embedding_dim");
        break;
    }
  }
  cfg.validate(true);
}

std::size_t Utterance::length() const {
  std::size_t len = 0;
  for (const auto& [kind, a] : streams) {
    len = std::max(len, kind == StreamKind::embeddings ? a.shape[1] : a.shape[0]);
  }
  return len;
}

Dataset::Dataset(const Manifest& manifest, const ModelConfig& cfg,
                 const std::vector<std::string>& classes)
    : classes_(classes) {
  cfg.validate(true);
  const auto blocks = cfg.selected_blocks();
  items_.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    Utterance u;
    u.id = r.utterance_id;
    u.speaker = r.speaker_id;
    u.session = r.session_id;
    u.meta = r.meta;
    const auto it = std::find(classes.begin(), classes.end(), r.label);
    if (it == classes.end()) throw ConfigError("utterance " + r.utterance_id + ": unknown label " + r.label);
    u.label = static_cast<int>(it - classes.begin());
    for (StreamKind kind : cfg.streams) {
      const auto path = manifest.resolve(stream_path(r, kind));
      FloatArray a = read_seqf(path);
      const std::size_t want_d = cfg.stream_dim(kind);
      if (kind == StreamKind::embeddings) {
        if (a.shape.size() != 3 || a.shape[0] != cfg.n_blocks || a.shape[2] != want_d) {
          throw ConfigError(path.string() + ": expected [" + std::to_string(cfg.n_blocks) + " x m x " +
                            std::to_string(want_d) + "], found " + shape_str(a.shape));
        }
        const std::size_t m = a.shape[1], d = a.shape[2];
        if (blocks.size() != cfg.n_blocks) {
          FloatArray sel{{blocks.size(), m, d}, {}};
          sel.data.reserve(blocks.size() * m * d);
          for (std::size_t b : blocks) {
            sel.data.insert(sel.data.end(), a.data.begin() + b * m * d, a.data.begin() + (b + 1) * m * d);
          }
          a = std::move(sel);
        }
        if (m == 0) throw ConfigError(path.string() + ": empty sequence");
      } else {
        if (a.shape.size() != 2 || a.shape[1] != want_d) {
          throw ConfigError(path.string() + ": expected [len x " + std::to_string(want_d) + "], found " +
                            shape_str(a.shape));
        }
        if (a.shape[0] == 0) throw ConfigError(path.string() + ": empty sequence");
      }
      u.streams[kind] = std::move(a);
    }
    items_.push_back(std::move(u));
  }
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Batch batch;
  if (indices.empty()) return batch;
  const std::size_t bsz = indices.size();
  for (const auto& [kind, first] : data[indices[0]].streams) {
    const bool emb = kind == StreamKind::embeddings;
    const std::size_t time_axis = emb ? 1 : 0;
    std::size_t max_len = 0;
    std::vector<std::size_t> lengths;
    for (std::size_t i : indices) {
      lengths.push_back(data[i].streams.at(kind).shape[time_axis]);
      max_len = std::max(max_len, lengths.back());
    }
    const std::size_t n = emb ? first.shape[0] : 1;
    const std::size_t d = first.shape.back();
    std::vector<float> buf(bsz * n * max_len * d, 0.0f);
    for (std::size_t b = 0; b < bsz; ++b) {
      const FloatArray& a = data[indices[b]].streams.at(kind);
      const std::size_t len = lengths[b];
      for (std::size_t c = 0; c < n; ++c) {
        std::copy_n(a.data.begin() + c * len * d, len * d, buf.begin() + ((b * n + c) * max_len) * d);
      }
    }
    Shape shape = emb ? Shape{bsz, n, max_len, d} : Shape{bsz, max_len, d};
    batch.streams[kind] = {Tensor::from_floats(shape, std::move(buf)), Mask::from_lengths(lengths, max_len)};
  }
  for (std::size_t i : indices) {
    batch.labels.push_back(data[i].label);
    batch.ids.push_back(data[i].id);
  }
  return batch;
}

std::vector<std::vector<std::size_t>> length_batches(const Dataset& data, std::vector<std::size_t> indices,
                                                     std::size_t batch_size, Rng* rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (rng) std::shuffle(indices.begin(), indices.end(), *rng);
  std::stable_sort(indices.begin(), indices.end(),
                   [&](std::size_t a, std::size_t b) { return data[a].length() < data[b].length(); });
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < indices.size(); s += batch_size) {
    out.emplace_back(indices.begin() + s, indices.begin() + std::min(indices.size(), s + batch_size));
  }
  if (rng) std::shuffle(out.begin(), out.end(), *rng);
  return out;
}

}  // namespace ctarnn
