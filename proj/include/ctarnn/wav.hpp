#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ctarnn {

struct PcmAudio {
  std::uint32_t sample_rate_hz = 0;
  std::uint16_t channels = 0;
  std::uint16_t bits_per_sample = 0;
  // Samples scaled to [-1, 1).
  std::vector<float> samples;
};

// Reads a RIFF/WAVE file. Only 16-bit PCM is decoded; the caller decides
// whether the rate/channel layout is acceptable (see require_16k_mono).
PcmAudio read_wav(const std::filesystem::path& path);
void write_wav_pcm16(const std::filesystem::path& path, const std::vector<float>& samples,
                     std::uint32_t sample_rate_hz = 16000);

// Throws FormatError unless the audio is 16-bit mono at 16 kHz.
void require_16k_mono(const PcmAudio& audio);

}  // namespace ctarnn
