#include <doctest.h>

#include <cmath>
#include <bit>
#include <cstring>
#include <numbers>
#include <random>

#include "ctarnn/errors.hpp"
#include "ctarnn/lmfb.hpp"
#include "ctarnn/manifest.hpp"
#include "ctarnn/seqf.hpp"
#include "ctarnn/synth.hpp"
#include "ctarnn/wav.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ctarnn;
using ctarnn::testing::TempDir;

namespace {

std::vector<float> sine(double hz, std::size_t n, double amp = 0.5) {
  std::vector<float> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0));
  }
  return x;
}

std::vector<float> noise(std::size_t n, double amp, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, amp);
  std::vector<float> x(n);
  for (auto& v : x) v = static_cast<float>(g(rng));
  return x;
}

}  // namespace

TEST_SUITE("lmfb") {
  TEST_CASE("one second of audio gives 98 frames of 80 bins") {
    auto f = extract_lmfb(sine(440.0, 16000), 16000);
    CHECK(f.shape == Shape{98, 80});
  }

  TEST_CASE("frame count follows the closed form") {
    Rng rng(21);
    std::uniform_int_distribution<std::size_t> len(400, 40000);
    const LmfbConfig cfg;
    for (int i = 0; i < 50; ++i) {
      const std::size_t n = len(rng);
      CHECK(lmfb_frame_count(n, cfg) == (n - 400) / 160 + 1);
    }
    for (std::size_t n : {400u, 559u, 560u, 561u}) {
      auto f = extract_lmfb(noise(n, 0.1, n), 16000);
      CHECK(f.shape[0] == (n - 400) / 160 + 1);
    }
  }

  TEST_CASE("digital silence gives log of the floor everywhere") {
    auto f = extract_lmfb(std::vector<float>(4000, 0.0f), 16000);
    const float expected = static_cast<float>(std::log(1e-10));
    for (float v : f.data) CHECK(v == expected);
  }

  TEST_CASE("1 kHz tone peaks at the filter centred nearest 1 kHz") {
    // Centres straight from the mel-scale definition: n_mels + 2 equally
    // spaced mel points over [0, 8000] Hz, centre m is point m + 1.
    auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
    auto inv = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    std::size_t nearest = 0;
    double best = 1e9;
    for (std::size_t m = 0; m < 80; ++m) {
      const double c = inv(mel(8000.0) * static_cast<double>(m + 1) / 81.0);
      if (std::abs(c - 1000.0) < best) {
        best = std::abs(c - 1000.0);
        nearest = m;
      }
    }
    auto f = extract_lmfb(sine(1000.0, 16000), 16000);
    std::vector<double> mean(80, 0.0);
    for (std::size_t t = 0; t < f.shape[0]; ++t) {
      for (std::size_t m = 0; m < 80; ++m) mean[m] += f.data[t * 80 + m];
    }
    const auto argmax = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
    CHECK(argmax == nearest);
  }

  TEST_CASE("scaling the signal shifts log energies by a constant") {
    auto x = noise(8000, 0.1, 5);
    std::vector<float> y(x.size());
    const double gain = 3.0;
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i] * gain);
    auto fx = extract_lmfb(x, 16000);
    auto fy = extract_lmfb(y, 16000);
    const double offset = 2.0 * std::log(gain);
    std::size_t compared = 0;
    for (std::size_t i = 0; i < fx.data.size(); ++i) {
      if (fx.data[i] < std::log(1e-10) + 20.0) continue;
      CHECK(std::abs((fy.data[i] - fx.data[i]) - offset) < 1e-3);
      ++compared;
    }
    CHECK(compared > fx.data.size() / 2);
  }

  TEST_CASE("every filter covers at least one FFT bin") {
    MelFilterbank bank(LmfbConfig{});
    for (std::size_t m = 0; m < bank.n_mels(); ++m) {
      double total = 0.0;
      for (std::size_t k = 0; k < bank.n_bins(); ++k) total += bank.weight(m, k);
      CHECK(total > 0.0);
    }
  }

  TEST_CASE("input errors") {
    CHECK_THROWS_AS(extract_lmfb(std::vector<float>(399, 0.0f), 16000), std::invalid_argument);
    CHECK_THROWS_AS(extract_lmfb(std::vector<float>(1000, 0.0f), 8000), ConfigError);
  }

  TEST_CASE("normalisation flag gives zero-mean bins") {
    LmfbConfig cfg;
    cfg.normalize = true;
    auto f = extract_lmfb(noise(8000, 0.1, 9), 16000, cfg);
    for (std::size_t m = 0; m < 80; ++m) {
      double s = 0.0;
      for (std::size_t t = 0; t < f.shape[0]; ++t) s += f.data[t * 80 + m];
      CHECK(std::abs(s / static_cast<double>(f.shape[0])) < 1e-4);
    }
  }
}

TEST_SUITE("wav") {
  TEST_CASE("16 kHz mono round trip") {
    TempDir dir("wav");
    auto x = sine(300.0, 1600);
    write_wav_pcm16(dir / "a.wav", x);
    auto a = read_wav(dir / "a.wav");
    CHECK_NOTHROW(require_16k_mono(a));
    REQUIRE(a.samples.size() == x.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(a.samples[i] - x[i]) < 1e-4);
  }

  TEST_CASE("wrong sample rate is rejected") {
    TempDir dir("wav8k");
    write_wav_pcm16(dir / "a.wav", sine(300.0, 800), 8000);
    CHECK_THROWS_AS(require_16k_mono(read_wav(dir / "a.wav")), FormatError);
  }

  TEST_CASE("non-RIFF file is rejected") {
    TempDir dir("wavbad");
    ctarnn::testing::write_file(dir / "a.wav", "not a wav file at all");
    CHECK_THROWS_AS(read_wav(dir / "a.wav"), FormatError);
  }
}

TEST_SUITE("seqf") {
  TEST_CASE("round trip is bit exact over random shapes") {
    Rng rng(31);
    std::uniform_int_distribution<std::size_t> ext(1, 9);
    std::uniform_int_distribution<std::uint32_t> bits;
    for (int trial = 0; trial < 100; ++trial) {
      FloatArray a;
      a.shape = trial % 2 ? Shape{ext(rng), ext(rng)} : Shape{ext(rng), ext(rng), ext(rng)};
      a.data.resize(shape_numel(a.shape));
      // Arbitrary finite bit patterns, including subnormals and signed zero.
      for (auto& v : a.data) {
        float f;
        do {
          f = std::bit_cast<float>(bits(rng));
        } while (!std::isfinite(f));
        v = f;
      }
      auto b = decode_seqf(encode_seqf(a));
      CHECK(b.shape == a.shape);
      CHECK(std::memcmp(b.data.data(), a.data.data(), 4 * a.data.size()) == 0);
    }
  }

  TEST_CASE("file round trip of a 2x3 array") {
    TempDir dir("seqf");
    FloatArray a{{2, 3}, {1.5f, -2.0f, 0.0f, 3.25f, 1e-30f, -0.0f}};
    write_seqf(dir / "x.seqf", a);
    auto b = read_seqf(dir / "x.seqf");
    CHECK(b.shape == a.shape);
    CHECK(std::memcmp(b.data.data(), a.data.data(), 24) == 0);
    CHECK(inspect_seqf(dir / "x.seqf") == a.shape);
  }

  TEST_CASE("layout is little endian with a fixed header") {
    auto bytes = encode_seqf(FloatArray{{1, 1}, {1.0f}});
    const std::vector<std::uint8_t> expected{'S', 'E', 'Q', 'F', 1, 0, 0, 0, 2, 0, 0, 0,
                                             1,   0,   0,   0,   1, 0, 0, 0, 0, 0, 0x80, 0x3f};
    CHECK(bytes == expected);
  }

  TEST_CASE("bad magic is a format error") {
    auto bytes = encode_seqf(FloatArray{{1, 2}, {1.0f, 2.0f}});
    bytes[0] = 'X';
    bytes[1] = 'X';
    bytes[2] = 'X';
    bytes[3] = 'X';
    try {
      decode_seqf(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }

  TEST_CASE("truncated payload names expected and actual byte counts") {
    auto bytes = encode_seqf(FloatArray{{2, 3}, std::vector<float>(6, 1.0f)});
    bytes.resize(bytes.size() - 5);
    try {
      decode_seqf(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("19 bytes") != std::string::npos);
      CHECK(msg.find("expected 24") != std::string::npos);
    }
  }

  TEST_CASE("unsupported version and rank are rejected") {
    auto bytes = encode_seqf(FloatArray{{1, 2}, {1.0f, 2.0f}});
    auto v2 = bytes;
    v2[4] = 2;
    CHECK_THROWS_AS(decode_seqf(v2), FormatError);
    auto rank4 = bytes;
    rank4[8] = 4;
    CHECK_THROWS_AS(decode_seqf(rank4), FormatError);
    CHECK_THROWS_AS(encode_seqf(FloatArray{{2}, {1.0f, 2.0f}}), DimensionError);
  }
}

TEST_SUITE("manifest") {
  struct Fixture {
    TempDir dir{"manifest"};
    Fixture() {
      std::filesystem::create_directories(dir.path() / "emb");
      for (const char* id : {"a", "b", "c"}) {
        write_seqf(dir.path() / "emb" / (std::string(id) + ".seqf"),
                   FloatArray{{2, 2, 3}, std::vector<float>(12, 0.5f)});
      }
    }
    std::string line(const char* id, const char* label, const char* file = nullptr) const {
      return std::string(R"({"utterance_id":")") + id + R"(","speaker_id":"s1","session_id":"x","label":")" +
             label + R"(","embeddings":"emb/)" + (file ? file : id) + ".seqf\"}\n";
    }
  };

  const std::vector<std::string> classes{"happy", "sad", "angry", "neutral"};

  TEST_CASE("three valid lines") {
    Fixture fx;
    auto text = fx.line("a", "happy") + fx.line("b", "sad") + fx.line("c", "angry");
    ctarnn::testing::write_file(fx.dir / "m.jsonl", text);
    auto load = load_manifest(fx.dir / "m.jsonl", classes);
    CHECK(load.ok());
    CHECK(load.manifest.records.size() == 3);
    CHECK(load.manifest.resolve(*load.manifest.records[1].embeddings) ==
          fx.dir.path() / "emb" / "b.seqf");
  }

  TEST_CASE("duplicate utterance id is reported by name") {
    Fixture fx;
    auto load = parse_manifest(fx.line("a", "happy") + fx.line("a", "sad"), fx.dir.path(), classes);
    REQUIRE(load.issues.size() == 1);
    CHECK(load.issues[0].line == 2);
    CHECK(load.issues[0].message.find("'a'") != std::string::npos);
  }

  TEST_CASE("unknown label is reported with line and label") {
    Fixture fx;
    auto load = parse_manifest(fx.line("a", "happy") + fx.line("b", "bored"), fx.dir.path(), classes);
    REQUIRE(load.issues.size() == 1);
    CHECK(load.issues[0].line == 2);
    CHECK(load.issues[0].message.find("bored") != std::string::npos);
  }

  TEST_CASE("missing stream file is reported") {
    Fixture fx;
    auto load = parse_manifest(fx.line("a", "happy", "nope"), fx.dir.path(), classes);
    REQUIRE(load.issues.size() == 1);
    CHECK(load.issues[0].message.find("embeddings") != std::string::npos);
  }

  TEST_CASE("malformed JSON raises a parse error with the line number") {
    Fixture fx;
    try {
      parse_manifest(fx.line("a", "happy") + "{not json\n", fx.dir.path(), classes);
      FAIL("expected ManifestParseError");
    } catch (const ManifestParseError& e) {
      CHECK(e.line() == 2);
    }
  }
}

TEST_SUITE("synth") {
  SynthSpec small_spec() {
    SynthSpec s;
    s.n_sessions = 2;
    s.utterances_per_speaker = 6;
    s.length_mean = 20;
    s.length_std = 3;
    s.salience_len = 6;
    return s;
  }

  TEST_CASE("same seed gives byte-identical corpora") {
    TempDir a("synA"), b("synB");
    const auto spec = small_spec();
    auto ra = generate_synth_corpus(spec, a.path());
    auto rb = generate_synth_corpus(spec, b.path());
    REQUIRE(ra.size() == spec.n_utterances());
    CHECK(ctarnn::testing::read_file(a / "manifest.jsonl") == ctarnn::testing::read_file(b / "manifest.jsonl"));
    for (const auto& r : ra) {
      CHECK(ctarnn::testing::read_file(a.path() / *r.embeddings) ==
            ctarnn::testing::read_file(b.path() / *r.embeddings));
    }
    auto load = load_manifest(a / "manifest.jsonl", spec.resolved_class_names());
    CHECK(load.ok());
  }

  TEST_CASE("different seeds differ") {
    auto s1 = small_spec();
    auto s2 = small_spec();
    s2.seed = 8;
    auto u1 = synthesize_utterance(s1, synth_class_plan(s1), 0);
    auto u2 = synthesize_utterance(s2, synth_class_plan(s2), 0);
    CHECK(u1.embeddings.data != u2.embeddings.data);
  }

  TEST_CASE("speakers are assigned round robin and every speaker sees every class") {
    auto spec = small_spec();
    spec.utterances_per_speaker = 8;
    const auto plan = synth_class_plan(spec);
    std::vector<std::vector<int>> seen(spec.n_speakers(), std::vector<int>(spec.n_classes, 0));
    for (std::size_t i = 0; i < spec.n_utterances(); ++i) {
      auto u = synthesize_utterance(spec, plan, i);
      const auto spk = static_cast<std::size_t>(std::stoi(u.speaker_id.substr(3)));
      CHECK(spk == i % spec.n_speakers());
      CHECK(u.session_id == "ses0" + std::to_string(spk / 2));
      seen[spk][static_cast<std::size_t>(u.label)]++;
      CHECK(u.embeddings.shape[1] >= spec.min_length());
    }
    for (const auto& row : seen) {
      for (int c : row) CHECK(c == 2);
    }
  }

  TEST_CASE("signal scale 0 leaves class means indistinguishable") {
    SynthSpec spec;
    spec.signal_scale = 0.0;
    spec.utterances_per_speaker = 40;
    const auto plan = synth_class_plan(spec);
    std::vector<double> cls0, cls1;
    for (std::size_t i = 0; i < spec.n_utterances(); ++i) {
      auto u = synthesize_utterance(spec, plan, i);
      if (u.label > 1) continue;
      // Projection of the planted channel's mean frame onto class 0's direction.
      const std::size_t c = plan.channel[0];
      const std::size_t m = u.embeddings.shape[1];
      double proj = 0.0;
      for (std::size_t t = 0; t < m; ++t) {
        for (std::size_t k = 0; k < spec.d_e; ++k) {
          proj += u.embeddings.data[(c * m + t) * spec.d_e + k] * plan.directions[0][k];
        }
      }
      (u.label == 0 ? cls0 : cls1).push_back(proj / static_cast<double>(m));
    }
    CHECK(oracles::welch_p_value(cls0, cls1) > 0.01);
  }

  TEST_CASE("energy detector recovers the planted channel at scale 3") {
    SynthSpec spec;  // 4 classes, 8 channels, d_e 16, scale 3, seed 7
    const auto plan = synth_class_plan(spec);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < spec.n_utterances(); ++i) {
      auto u = synthesize_utterance(spec, plan, i);
      const auto c = oracles::energy_detector_channel(u.embeddings.data, spec.n_channels,
                                                      u.embeddings.shape[1], spec.d_e,
                                                      spec.salience_len);
      hits += c == u.planted_channel ? 1 : 0;
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(spec.n_utterances());
    MESSAGE("energy detector hit rate " << rate);
    CHECK(rate >= 0.99);
  }

  TEST_CASE("invalid specs are rejected") {
    SynthSpec s;
    s.n_classes = 9;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SynthSpec{};
    s.salience_len = 50;
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }

  TEST_CASE("spec survives a config round trip") {
    auto s = small_spec();
    auto back = SynthSpec::from_config(KeyValueConfig::parse(s.to_config().dump()));
    CHECK(back.to_config().dump() == s.to_config().dump());
  }
}
