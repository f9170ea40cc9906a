// SPDX-License-Identifier: Apache-2.0
//
// Short-time Fourier analysis and overlap-add synthesis.
//
// Frames are taken without centering or padding: frame t covers samples
// [t*hop, t*hop + frame_len). The tail shorter than one frame is dropped.
// Synthesis is weighted overlap-add normalized by the summed squared window,
// which reconstructs the input exactly on the fully overlapped interior
// [hop, T*hop).
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "sbkd/error.hpp"

namespace sbkd {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  Waveform() = default;
  explicit Waveform(std::vector<double> s, int rate = kSampleRate)
      : samples(std::move(s)), sample_rate(rate) {}

  std::size_t size() const { return samples.size(); }
};

inline void validate(const Waveform& wave) {
  if (wave.sample_rate != kSampleRate)
    throw DataError("expected sample rate " + std::to_string(kSampleRate) +
                    " Hz, found " + std::to_string(wave.sample_rate) + " Hz");
  for (double v : wave.samples)
    if (!std::isfinite(v)) throw DataError("waveform contains non-finite samples");
}

// Periodic (DFT-even) Hann window. At hop = len/2 its shifted copies sum to 1.
inline std::vector<double> periodic_hann(int len) {
  std::vector<double> w(static_cast<std::size_t>(len));
  for (int n = 0; n < len; ++n)
    w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / len);
  return w;
}

struct StftConfig {
  int frame_len = 320;
  int hop = 160;
  std::vector<double> window = periodic_hann(320);

  int bins() const { return frame_len / 2 + 1; }

  // 50% overlap periodic-Hann analysis at the given frame length.
  static StftConfig with_frame_len(int frame_len) {
    if (frame_len < 2 || frame_len % 2 != 0)
      throw UsageError("frame length must be even and >= 2");
    return StftConfig{frame_len, frame_len / 2, periodic_hann(frame_len)};
  }
};

inline void validate(const StftConfig& cfg) {
  if (cfg.frame_len < 2 || cfg.frame_len % 2 != 0 || cfg.hop * 2 != cfg.frame_len)
    throw UsageError("stft config must use an even frame length with hop = frame_len / 2");
  if (cfg.window.size() != static_cast<std::size_t>(cfg.frame_len))
    throw UsageError("stft window length must equal frame length");
}

// Complex STFT with frames as rows and one-sided frequency bins as columns.
struct Spectrogram {
  Eigen::MatrixXcd values;

  Eigen::Index frames() const { return values.rows(); }
  Eigen::Index bins() const { return values.cols(); }
  Eigen::MatrixXd magnitude() const { return values.cwiseAbs(); }
  Eigen::MatrixXd phase() const { return values.unaryExpr([](const std::complex<double>& z) { return std::arg(z); }); }
};

inline Eigen::Index frame_count(std::size_t length, const StftConfig& cfg) {
  if (length < static_cast<std::size_t>(cfg.frame_len)) return 0;
  return static_cast<Eigen::Index>((length - cfg.frame_len) / cfg.hop + 1);
}

inline Spectrogram stft(const Waveform& wave, const StftConfig& cfg) {
  validate(cfg);
  if (wave.size() < static_cast<std::size_t>(cfg.frame_len)) throw DataError("input too short");

  const Eigen::Index frames = frame_count(wave.size(), cfg);
  const int bins = cfg.bins();
  Spectrogram spec{Eigen::MatrixXcd(frames, bins)};

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame(cfg.frame_len);
  std::vector<std::complex<double>> out;
  for (Eigen::Index t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * cfg.hop;
    for (int n = 0; n < cfg.frame_len; ++n) frame[n] = wave.samples[start + n] * cfg.window[n];
    fft.fwd(out, frame);
    for (int f = 0; f < bins; ++f) spec.values(t, f) = out[f];
  }
  return spec;
}

inline Waveform istft(const Spectrogram& spec, const StftConfig& cfg) {
  validate(cfg);
  if (spec.bins() != cfg.bins())
    throw ShapeError("spectrogram has " + std::to_string(spec.bins()) + " bins, config expects " +
                     std::to_string(cfg.bins()));
  const Eigen::Index frames = spec.frames();
  if (frames == 0) return Waveform{};

  const std::size_t length = static_cast<std::size_t>(frames - 1) * cfg.hop + cfg.frame_len;
  std::vector<double> out(length, 0.0);
  std::vector<double> norm(length, 0.0);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<std::complex<double>> half(cfg.bins());
  std::vector<double> frame;
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int f = 0; f < cfg.bins(); ++f) half[f] = spec.values(t, f);
    fft.inv(frame, half, cfg.frame_len);
    const std::size_t start = static_cast<std::size_t>(t) * cfg.hop;
    for (int n = 0; n < cfg.frame_len; ++n) {
      out[start + n] += frame[n] * cfg.window[n];
      norm[start + n] += cfg.window[n] * cfg.window[n];
    }
  }

  // Inside the fully overlapped region the normalizer is bounded below; the
  // outer half-frames fade to zero and are floored at that bound so that
  // inconsistent spectra (modified magnitudes) cannot blow up at the edges.
  const std::size_t interior_begin = cfg.hop;
  const std::size_t interior_end = length - cfg.hop;
  double floor = 0.0;
  if (interior_end > interior_begin) {
    floor = *std::min_element(norm.begin() + static_cast<std::ptrdiff_t>(interior_begin),
                              norm.begin() + static_cast<std::ptrdiff_t>(interior_end));
    if (!(floor > 1e-12)) throw Error("istft: zero window sum inside the overlapped region");
  } else {
    floor = *std::max_element(norm.begin(), norm.end());
  }
  for (std::size_t i = 0; i < length; ++i) out[i] = floor > 0.0 ? out[i] / std::max(norm[i], floor) : 0.0;
  return Waveform{std::move(out)};
}

// Polar recomposition of magnitude and phase followed by istft.
inline Waveform recombine(const Eigen::MatrixXd& magnitude, const Eigen::MatrixXd& phase,
                          const StftConfig& cfg) {
  if (magnitude.rows() != phase.rows() || magnitude.cols() != phase.cols())
    throw ShapeError("magnitude and phase shapes differ");
  Spectrogram spec{Eigen::MatrixXcd(magnitude.rows(), magnitude.cols())};
  for (Eigen::Index t = 0; t < magnitude.rows(); ++t)
    for (Eigen::Index f = 0; f < magnitude.cols(); ++f)
      spec.values(t, f) = std::polar(magnitude(t, f), phase(t, f));
  return istft(spec, cfg);
}

}  // namespace sbkd
