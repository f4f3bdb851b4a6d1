#include "ctarnn/lmfb.hpp"

#include <fftw3.h>

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>

#include "ctarnn/errors.hpp"

namespace ctarnn {

void LmfbConfig::validate() const {
  if (frame_len == 0 || frame_shift == 0) throw ConfigError("lmfb: frame geometry must be positive");
  if (frame_len > fft_size) throw ConfigError("lmfb: frame_len exceeds fft_size");
  if (n_mels < 1) throw ConfigError("lmfb: n_mels must be >= 1");
  if (!(log_floor > 0.0)) throw ConfigError("lmfb: log floor must be positive");
  if (!(low_hz >= 0.0 && high_hz > low_hz && high_hz <= sample_rate_hz / 2.0)) {
    throw ConfigError("lmfb: mel range must satisfy 0 <= low < high <= nyquist");
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(const LmfbConfig& cfg)
    : n_mels_(cfg.n_mels), n_bins_(cfg.fft_size / 2 + 1) {
  cfg.validate();
  const double mel_lo = hz_to_mel(cfg.low_hz);
  const double mel_hi = hz_to_mel(cfg.high_hz);
  const double step = (mel_hi - mel_lo) / static_cast<double>(n_mels_ + 1);
  weights_.assign(n_mels_ * n_bins_, 0.0);
  centers_hz_.resize(n_mels_);
  const double bin_hz = static_cast<double>(cfg.sample_rate_hz) / static_cast<double>(cfg.fft_size);
  for (std::size_t m = 0; m < n_mels_; ++m) {
    const double left = mel_lo + step * static_cast<double>(m);
    const double center = left + step;
    const double right = center + step;
    centers_hz_[m] = mel_to_hz(center);
    for (std::size_t k = 0; k < n_bins_; ++k) {
      const double mel = hz_to_mel(bin_hz * static_cast<double>(k));
      double w = 0.0;
      if (mel > left && mel <= center) {
        w = (mel - left) / step;
      } else if (mel > center && mel < right) {
        w = (right - mel) / step;
      }
      weights_[m * n_bins_ + k] = w;
    }
  }
}

void MelFilterbank::apply(std::span<const double> power, std::span<double> out) const {
  for (std::size_t m = 0; m < n_mels_; ++m) {
    double acc = 0.0;
    const double* w = weights_.data() + m * n_bins_;
    for (std::size_t k = 0; k < n_bins_; ++k) acc += w[k] * power[k];
    out[m] = acc;
  }
}

std::size_t lmfb_frame_count(std::size_t n_samples, const LmfbConfig& cfg) {
  if (n_samples < cfg.frame_len) return 0;
  return (n_samples - cfg.frame_len) / cfg.frame_shift + 1;
}

namespace {

// FFTW planning is not thread-safe; execution on a private plan is.
std::mutex g_plan_mutex;

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard lock(g_plan_mutex);
    fftw_destroy_plan(p);
  }
};

}  // namespace

FloatArray extract_lmfb(std::span<const float> pcm, int sample_rate_hz, const LmfbConfig& cfg) {
  cfg.validate();
  if (sample_rate_hz != cfg.sample_rate_hz) {
    throw ConfigError("lmfb: input declared at " + std::to_string(sample_rate_hz) +
                      " Hz, extractor expects " + std::to_string(cfg.sample_rate_hz) + " Hz");
  }
  if (pcm.size() < cfg.frame_len) {
    throw std::invalid_argument("lmfb: " + std::to_string(pcm.size()) +
                                " samples is shorter than one frame (" +
                                std::to_string(cfg.frame_len) + ")");
  }
  const MelFilterbank bank(cfg);
  const std::size_t n_frames = lmfb_frame_count(pcm.size(), cfg);
  const std::size_t n_bins = cfg.fft_size / 2 + 1;

  std::vector<double> window(cfg.frame_len);
  for (std::size_t i = 0; i < cfg.frame_len; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(cfg.frame_len - 1));
  }

  std::vector<double> frame(cfg.fft_size, 0.0);
  std::vector<fftw_complex> spectrum(n_bins);
  std::unique_ptr<fftw_plan_s, PlanDeleter> plan;
  {
    std::lock_guard lock(g_plan_mutex);
    plan.reset(fftw_plan_dft_r2c_1d(static_cast<int>(cfg.fft_size), frame.data(), spectrum.data(),
                                    FFTW_ESTIMATE));
  }

  FloatArray out{{n_frames, cfg.n_mels}, std::vector<float>(n_frames * cfg.n_mels)};
  std::vector<double> power(n_bins);
  std::vector<double> mel(cfg.n_mels);
  for (std::size_t f = 0; f < n_frames; ++f) {
    const std::size_t start = f * cfg.frame_shift;
    std::fill(frame.begin(), frame.end(), 0.0);
    for (std::size_t i = 0; i < cfg.frame_len; ++i) {
      frame[i] = static_cast<double>(pcm[start + i]) * window[i];
    }
    fftw_execute(plan.get());
    for (std::size_t k = 0; k < n_bins; ++k) {
      power[k] = spectrum[k][0] * spectrum[k][0] + spectrum[k][1] * spectrum[k][1];
    }
    bank.apply(power, mel);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      out.data[f * cfg.n_mels + m] = static_cast<float>(std::log(mel[m] + cfg.log_floor));
    }
  }

  if (cfg.normalize) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double mean = 0.0;
      for (std::size_t f = 0; f < n_frames; ++f) mean += out.data[f * cfg.n_mels + m];
      mean /= static_cast<double>(n_frames);
      double var = 0.0;
      for (std::size_t f = 0; f < n_frames; ++f) {
        const double d = out.data[f * cfg.n_mels + m] - mean;
        var += d * d;
      }
      const double sd = std::sqrt(var / static_cast<double>(n_frames));
      const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
      for (std::size_t f = 0; f < n_frames; ++f) {
        auto& v = out.data[f * cfg.n_mels + m];
        v = static_cast<float>((v - mean) * inv);
      }
    }
  }
  return out;
}

}  // namespace ctarnn
