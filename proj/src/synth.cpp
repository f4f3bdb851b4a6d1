#include "ctarnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "ctarnn/errors.hpp"

namespace ctarnn {

std::vector<std::string> SynthSpec::resolved_class_names() const {
  if (!class_names.empty()) return class_names;
  std::vector<std::string> names;
  for (std::size_t k = 0; k < n_classes; ++k) names.push_back("class" + std::to_string(k));
  return names;
}

void SynthSpec::validate() const {
  if (n_classes == 0 || n_channels == 0 || d_e == 0 || salience_len == 0 || n_sessions == 0 ||
      speakers_per_session == 0 || utterances_per_speaker == 0) {
    throw ConfigError("synth: all extents must be positive");
  }
  if (n_classes > n_channels) {
    throw ConfigError("synth: need at least one channel per class (n_classes <= n_channels)");
  }
  if (!(length_mean > 0.0) || length_std < 0.0) throw ConfigError("synth: bad length distribution");
  if (static_cast<double>(salience_len) >= length_mean) {
    throw ConfigError("synth: salience_len must be shorter than the sequences");
  }
  if (signal_scale < 0.0) throw ConfigError("synth: signal_scale must be >= 0");
  if (!class_names.empty() && class_names.size() != n_classes) {
    throw ConfigError("synth: class_names must list exactly n_classes names");
  }
}

SynthSpec SynthSpec::from_config(const KeyValueConfig& cfg) {
  cfg.reject_unknown({"n_classes", "n_channels", "d_e", "length_mean", "length_std",
                      "salience_len", "signal_scale", "seed", "n_sessions",
                      "speakers_per_session", "utterances_per_speaker", "class_names"});
  SynthSpec s;
  s.n_classes = static_cast<std::size_t>(cfg.get_int("n_classes", 4));
  s.n_channels = static_cast<std::size_t>(cfg.get_int("n_channels", 8));
  s.d_e = static_cast<std::size_t>(cfg.get_int("d_e", 16));
  s.length_mean = cfg.get_double("length_mean", s.length_mean);
  s.length_std = cfg.get_double("length_std", s.length_std);
  s.salience_len = static_cast<std::size_t>(cfg.get_int("salience_len", 8));
  s.signal_scale = cfg.get_double("signal_scale", s.signal_scale);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 7));
  s.n_sessions = static_cast<std::size_t>(cfg.get_int("n_sessions", 5));
  s.speakers_per_session = static_cast<std::size_t>(cfg.get_int("speakers_per_session", 2));
  s.utterances_per_speaker = static_cast<std::size_t>(cfg.get_int("utterances_per_speaker", 200));
  s.class_names = cfg.get_list("class_names", {});
  s.validate();
  return s;
}

KeyValueConfig SynthSpec::to_config() const {
  KeyValueConfig c;
  c.set("n_classes", std::to_string(n_classes));
  c.set("n_channels", std::to_string(n_channels));
  c.set("d_e", std::to_string(d_e));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", length_mean);
  c.set("length_mean", buf);
  std::snprintf(buf, sizeof buf, "%.17g", length_std);
  c.set("length_std", buf);
  c.set("salience_len", std::to_string(salience_len));
  std::snprintf(buf, sizeof buf, "%.17g", signal_scale);
  c.set("signal_scale", buf);
  c.set("seed", std::to_string(seed));
  c.set("n_sessions", std::to_string(n_sessions));
  c.set("speakers_per_session", std::to_string(speakers_per_session));
  c.set("utterances_per_speaker", std::to_string(utterances_per_speaker));
  c.set("class_names", join_list(resolved_class_names()));
  return c;
}

SynthClassPlan synth_class_plan(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  SynthClassPlan plan;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    std::vector<double> v(spec.d_e);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& x : v) {
        x = gauss(rng);
        norm += x * x;
      }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    std::vector<float> dir(spec.d_e);
    for (std::size_t i = 0; i < spec.d_e; ++i) dir[i] = static_cast<float>(v[i] / norm);
    plan.directions.push_back(std::move(dir));
  }
  std::vector<std::size_t> channels(spec.n_channels);
  std::iota(channels.begin(), channels.end(), 0);
  std::shuffle(channels.begin(), channels.end(), rng);
  plan.channel.assign(channels.begin(), channels.begin() + static_cast<std::ptrdiff_t>(spec.n_classes));
  return plan;
}

SynthUtterance synthesize_utterance(const SynthSpec& spec, const SynthClassPlan& plan,
                                    std::size_t index) {
  const std::size_t n_speakers = spec.n_speakers();
  const std::size_t speaker = index % n_speakers;
  const std::size_t session = speaker / spec.speakers_per_session;

  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5a11e7u};
  Rng rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::normal_distribution<double> length_dist(spec.length_mean, spec.length_std);

  SynthUtterance u;
  char buf[64];
  std::snprintf(buf, sizeof buf, "utt%06zu", index);
  u.utterance_id = buf;
  std::snprintf(buf, sizeof buf, "spk%02zu", speaker);
  u.speaker_id = buf;
  std::snprintf(buf, sizeof buf, "ses%02zu", session);
  u.session_id = buf;
  // Each speaker cycles through the classes, so every speaker is balanced.
  u.label = static_cast<int>((index / n_speakers) % spec.n_classes);

  const double drawn = std::round(length_dist(rng));
  const std::size_t m = static_cast<std::size_t>(
      std::max(drawn, static_cast<double>(spec.min_length())));
  std::uniform_int_distribution<std::size_t> start_dist(0, m - spec.salience_len);
  u.segment_start = start_dist(rng);
  u.planted_channel = plan.channel[static_cast<std::size_t>(u.label)];

  const std::size_t N = spec.n_channels;
  const std::size_t d = spec.d_e;
  u.embeddings.shape = {N, m, d};
  u.embeddings.data.resize(N * m * d);
  for (auto& x : u.embeddings.data) x = static_cast<float>(gauss(rng));
  const auto& dir = plan.directions[static_cast<std::size_t>(u.label)];
  for (std::size_t t = u.segment_start; t < u.segment_start + spec.salience_len; ++t) {
    float* cell = u.embeddings.data.data() + (u.planted_channel * m + t) * d;
    for (std::size_t i = 0; i < d; ++i) {
      cell[i] = static_cast<float>(cell[i] + spec.signal_scale * dir[i]);
    }
  }
  return u;
}

std::vector<ManifestRecord> generate_synth_corpus(const SynthSpec& spec,
                                                  const std::filesystem::path& out_dir) {
  spec.validate();
  const auto plan = synth_class_plan(spec);
  const auto names = spec.resolved_class_names();
  std::filesystem::create_directories(out_dir / "embeddings");
  std::vector<ManifestRecord> records;
  records.reserve(spec.n_utterances());
  for (std::size_t i = 0; i < spec.n_utterances(); ++i) {
    SynthUtterance u = synthesize_utterance(spec, plan, i);
    const std::filesystem::path rel = std::filesystem::path("embeddings") / (u.utterance_id + ".seqf");
    write_seqf(out_dir / rel, u.embeddings);
    ManifestRecord r;
    r.utterance_id = u.utterance_id;
    r.speaker_id = u.speaker_id;
    r.session_id = u.session_id;
    r.label = names[static_cast<std::size_t>(u.label)];
    r.embeddings = rel;
    r.meta = {{"planted_channel", u.planted_channel},
              {"segment_start", u.segment_start},
              {"segment_len", spec.salience_len}};
    records.push_back(std::move(r));
  }
  write_manifest(out_dir / "manifest.jsonl", records);
  return records;
}

}  // namespace ctarnn
