#include "ctarnn/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ctarnn/errors.hpp"

namespace ctarnn {

namespace {

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

void put32(std::ofstream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put16(std::ofstream& out, std::uint16_t v) {
  out.put(static_cast<char>(v & 0xff));
  out.put(static_cast<char>(v >> 8));
}

}  // namespace

PcmAudio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> b{std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>()};
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 ||
      std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("WAV: missing RIFF/WAVE header", 0);
  }
  PcmAudio audio;
  std::uint16_t format = 0;
  bool have_fmt = false;
  std::size_t off = 12;
  while (off + 8 <= b.size()) {
    const std::uint32_t size = le32(b, off + 4);
    const std::size_t body = off + 8;
    if (body + size > b.size()) throw FormatError("WAV: truncated chunk", off);
    if (std::memcmp(b.data() + off, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("WAV: short fmt chunk", off);
      format = le16(b, body);
      audio.channels = le16(b, body + 2);
      audio.sample_rate_hz = le32(b, body + 4);
      audio.bits_per_sample = le16(b, body + 14);
      have_fmt = true;
    } else if (std::memcmp(b.data() + off, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("WAV: data chunk before fmt chunk", off);
      if (format != 1 || audio.bits_per_sample != 16) {
        throw FormatError("WAV: only 16-bit PCM is supported", off);
      }
      const std::size_t n = size / 2;
      audio.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto v = static_cast<std::int16_t>(le16(b, body + 2 * i));
        audio.samples[i] = static_cast<float>(v) / 32768.0f;
      }
      return audio;
    }
    off = body + size + (size & 1);
  }
  throw FormatError("WAV: no data chunk", b.size());
}

void require_16k_mono(const PcmAudio& audio) {
  if (audio.sample_rate_hz != 16000) {
    throw FormatError("WAV: sample rate " + std::to_string(audio.sample_rate_hz) +
                          " Hz, expected 16000",
                      24);
  }
  if (audio.channels != 1) {
    throw FormatError("WAV: " + std::to_string(audio.channels) + " channels, expected mono", 22);
  }
}

void write_wav_pcm16(const std::filesystem::path& path, const std::vector<float>& samples,
                     std::uint32_t sample_rate_hz) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put32(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put32(out, 16);
  put16(out, 1);
  put16(out, 1);
  put32(out, sample_rate_hz);
  put32(out, sample_rate_hz * 2);
  put16(out, 2);
  put16(out, 16);
  out.write("data", 4);
  put32(out, data_bytes);
  for (float s : samples) {
    const double scaled = std::round(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32767.0);
    put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
  }
}

}  // namespace ctarnn
