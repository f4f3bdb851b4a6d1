#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctarnn/config_file.hpp"
#include "ctarnn/manifest.hpp"
#include "ctarnn/seqf.hpp"

namespace ctarnn {

// Planted-salience corpus: Gaussian noise over N x m x d_e, plus a fixed
// unit direction per class added to one class-specific channel over one
// contiguous segment.
struct SynthSpec {
  std::size_t n_classes = 4;
  std::size_t n_channels = 8;
  std::size_t d_e = 16;
  double length_mean = 40.0;
  double length_std = 4.0;
  std::size_t salience_len = 8;
  double signal_scale = 3.0;
  std::uint64_t seed = 7;
  std::size_t n_sessions = 5;
  std::size_t speakers_per_session = 2;
  std::size_t utterances_per_speaker = 200;
  std::vector<std::string> class_names;  // defaults to class0..class{K-1}

  std::size_t n_speakers() const { return n_sessions * speakers_per_session; }
  std::size_t n_utterances() const { return n_speakers() * utterances_per_speaker; }
  // Shortest sequence the generator will emit.
  std::size_t min_length() const { return salience_len + 1; }
  std::vector<std::string> resolved_class_names() const;

  void validate() const;
  static SynthSpec from_config(const KeyValueConfig& cfg);
  KeyValueConfig to_config() const;
};

struct SynthClassPlan {
  std::vector<std::vector<float>> directions;  // per class, unit norm in R^{d_e}
  std::vector<std::size_t> channel;            // per class, planted channel c(k)
};

struct SynthUtterance {
  std::string utterance_id;
  std::string speaker_id;
  std::string session_id;
  int label = 0;
  std::size_t planted_channel = 0;
  std::size_t segment_start = 0;
  FloatArray embeddings;  // [N x m x d_e]
};

SynthClassPlan synth_class_plan(const SynthSpec& spec);
// Deterministic in (spec, index); independent of every other utterance.
SynthUtterance synthesize_utterance(const SynthSpec& spec, const SynthClassPlan& plan,
                                    std::size_t index);

// Writes <out_dir>/manifest.jsonl and <out_dir>/embeddings/<id>.seqf.
std::vector<ManifestRecord> generate_synth_corpus(const SynthSpec& spec,
                                                  const std::filesystem::path& out_dir);

}  // namespace ctarnn
