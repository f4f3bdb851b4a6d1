#pragma once

#include <span>
#include <vector>

#include "ctarnn/seqf.hpp"

namespace ctarnn {

struct LmfbConfig {
  int sample_rate_hz = 16000;
  std::size_t frame_len = 400;    // 25 ms
  std::size_t frame_shift = 160;  // 10 ms
  std::size_t n_mels = 80;
  std::size_t fft_size = 512;
  double low_hz = 0.0;
  double high_hz = 8000.0;
  double log_floor = 1e-10;
  // Per-utterance mean/variance normalisation of each mel bin.
  bool normalize = false;

  void validate() const;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filters equally spaced on the mel scale, evaluated at the
// FFT bin centre frequencies.
class MelFilterbank {
 public:
  explicit MelFilterbank(const LmfbConfig& cfg);

  std::size_t n_mels() const { return n_mels_; }
  std::size_t n_bins() const { return n_bins_; }
  double center_hz(std::size_t mel) const { return centers_hz_[mel]; }
  double weight(std::size_t mel, std::size_t bin) const { return weights_[mel * n_bins_ + bin]; }
  void apply(std::span<const double> power, std::span<double> out) const;

 private:
  std::size_t n_mels_;
  std::size_t n_bins_;
  std::vector<double> centers_hz_;
  std::vector<double> weights_;
};

std::size_t lmfb_frame_count(std::size_t n_samples, const LmfbConfig& cfg);

// [n_frames x n_mels] natural-log mel energies.
FloatArray extract_lmfb(std::span<const float> pcm, int sample_rate_hz,
                        const LmfbConfig& cfg = {});

}  // namespace ctarnn
