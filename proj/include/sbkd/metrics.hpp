// SPDX-License-Identifier: Apache-2.0
//
// Objective evaluation: STOI, SI-SDR, segmental SNR and per-band spectral MSE.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/FFT>

#include "sbkd/error.hpp"
#include "sbkd/spectral.hpp"
#include "sbkd/subband.hpp"

namespace sbkd {

// ---------------------------------------------------------------------------
// Polyphase rational resampling

// Kaiser-windowed sinc low-pass (beta 5, 10 zero crossings per side of the
// slower rate), applied polyphase: upsample by `up`, filter, keep every
// `down`-th sample. Output length is ceil(n * up / down).
inline std::vector<double> resample_poly(const std::vector<double>& x, int up, int down) {
  if (up < 1 || down < 1) throw UsageError("resample factors must be positive");
  const int g = std::gcd(up, down);
  up /= g;
  down /= g;
  if (up == 1 && down == 1) return x;

  const int max_rate = std::max(up, down);
  const int half = 10 * max_rate;
  const int taps = 2 * half + 1;
  const double cutoff = 1.0 / max_rate;  // fraction of the upsampled Nyquist
  constexpr double kBeta = 5.0;
  const double i0_beta = std::cyl_bessel_i(0.0, kBeta);
  std::vector<double> h(taps);
  for (int k = 0; k < taps; ++k) {
    const double m = k - half;
    const double arg = cutoff * m;
    const double sinc = m == 0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
    const double r = m / half;
    const double win = std::cyl_bessel_i(0.0, kBeta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    h[k] = up * cutoff * sinc * win;
  }

  const std::size_t n_out = (x.size() * up + down - 1) / down;
  std::vector<double> y(n_out, 0.0);
  const auto n_in = static_cast<std::int64_t>(x.size());
  for (std::size_t m = 0; m < n_out; ++m) {
    // Upsampled index u = m*down; y[m] = sum_n x[n] * h[u - n*up + half].
    const std::int64_t u = static_cast<std::int64_t>(m) * down + half;
    std::int64_t n_lo = (u - (taps - 1) + up - 1) / up;
    if (u - (taps - 1) < 0) n_lo = 0;
    const std::int64_t n_hi = std::min<std::int64_t>(n_in - 1, u / up);
    double acc = 0.0;
    for (std::int64_t n = std::max<std::int64_t>(0, n_lo); n <= n_hi; ++n) acc += x[n] * h[u - n * up];
    y[m] = acc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// STOI

namespace stoi_detail {

inline constexpr int kFs = 10000;
inline constexpr int kFrameLen = 256;
inline constexpr int kHop = 128;
inline constexpr int kFft = 512;
inline constexpr int kBands = 15;
inline constexpr double kMinFreq = 150.0;
inline constexpr int kSegment = 30;  // frames, 384 ms
inline constexpr double kBeta = -15.0;  // lower SDR bound, dB
inline constexpr double kDynRange = 40.0;

// Hann window without the zero end points.
inline std::vector<double> window() {
  std::vector<double> w(kFrameLen);
  for (int n = 0; n < kFrameLen; ++n) w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (n + 1) / (kFrameLen + 1));
  return w;
}

// Drops frames more than kDynRange dB below the loudest clean frame, then
// overlap-adds what remains.
inline std::pair<std::vector<double>, std::vector<double>> remove_silent_frames(const std::vector<double>& x,
                                                                                const std::vector<double>& y) {
  const auto w = window();
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + kFrameLen < x.size(); s += kHop) starts.push_back(s);
  std::vector<double> energy(starts.size());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    double e = 0.0;
    for (int n = 0; n < kFrameLen; ++n) e += std::pow(w[n] * x[starts[i] + n], 2);
    energy[i] = 20.0 * std::log10(std::sqrt(e) + std::numeric_limits<double>::epsilon());
  }
  const double top = energy.empty() ? 0.0 : *std::max_element(energy.begin(), energy.end());
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < starts.size(); ++i)
    if (energy[i] > top - kDynRange) keep.push_back(starts[i]);

  const std::size_t len = keep.empty() ? 0 : (keep.size() - 1) * kHop + kFrameLen;
  std::vector<double> xs(len, 0.0), ys(len, 0.0);
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (int n = 0; n < kFrameLen; ++n) {
      xs[i * kHop + n] += w[n] * x[keep[i] + n];
      ys[i * kHop + n] += w[n] * y[keep[i] + n];
    }
  return {xs, ys};
}

// One-third octave band energies: kBands x frames.
inline Eigen::MatrixXd third_octave_envelopes(const std::vector<double>& x) {
  const auto w = window();
  const int bins = kFft / 2 + 1;

  // Band edges snapped to the nearest FFT bin.
  std::vector<int> lo(kBands), hi(kBands);
  for (int k = 0; k < kBands; ++k) {
    const double fl = kMinFreq * std::pow(2.0, (2.0 * k - 1.0) / 6.0);
    const double fh = kMinFreq * std::pow(2.0, (2.0 * k + 1.0) / 6.0);
    auto nearest = [&](double f) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int b = 0; b < bins; ++b) {
        const double d = std::abs(static_cast<double>(b) * kFs / kFft - f);
        if (d < bd) {
          bd = d;
          best = b;
        }
      }
      return best;
    };
    lo[k] = nearest(fl);
    hi[k] = nearest(fh);
  }

  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + kFrameLen < x.size(); s += kHop) starts.push_back(s);
  Eigen::MatrixXd env(kBands, static_cast<Eigen::Index>(starts.size()));
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame(kFft, 0.0);
  std::vector<std::complex<double>> spec;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    std::fill(frame.begin(), frame.end(), 0.0);
    for (int n = 0; n < kFrameLen; ++n) frame[n] = w[n] * x[starts[i] + n];
    fft.fwd(spec, frame);
    for (int k = 0; k < kBands; ++k) {
      double e = 0.0;
      for (int b = lo[k]; b < hi[k]; ++b) e += std::norm(spec[b]);
      env(k, static_cast<Eigen::Index>(i)) = std::sqrt(e);
    }
  }
  return env;
}

inline double correlation(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  constexpr double kEps = std::numeric_limits<double>::epsilon();
  Eigen::RowVectorXd an = a.array() - a.mean();
  Eigen::RowVectorXd bn = b.array() - b.mean();
  an /= an.norm() + kEps;
  bn /= bn.norm() + kEps;
  return an.dot(bn);
}

}  // namespace stoi_detail

// Short-time objective intelligibility of `degraded` relative to `clean`,
// in [0, 1] for typical inputs. The longer input is cropped to the shorter.
inline double stoi(const Waveform& clean, const Waveform& degraded) {
  using namespace stoi_detail;
  const std::size_t n = std::min(clean.size(), degraded.size());
  const std::vector<double> c(clean.samples.begin(), clean.samples.begin() + static_cast<std::ptrdiff_t>(n));
  const std::vector<double> d(degraded.samples.begin(), degraded.samples.begin() + static_cast<std::ptrdiff_t>(n));
  if (n < static_cast<std::size_t>(0.384 * clean.sample_rate)) throw DataError("input too short for STOI");

  const auto c10 = resample_poly(c, 5, 8);
  const auto d10 = resample_poly(d, 5, 8);
  const auto [cs, ds] = remove_silent_frames(c10, d10);

  const Eigen::MatrixXd x = third_octave_envelopes(cs);
  const Eigen::MatrixXd y = third_octave_envelopes(ds);
  if (x.cols() < kSegment) throw DataError("input too short for STOI after silence removal");

  const double clip = std::pow(10.0, -kBeta / 20.0);
  double total = 0.0;
  int count = 0;
  for (Eigen::Index m = kSegment; m <= x.cols(); ++m) {
    const Eigen::MatrixXd xs = x.middleCols(m - kSegment, kSegment);
    const Eigen::MatrixXd ys = y.middleCols(m - kSegment, kSegment);
    for (int k = 0; k < kBands; ++k) {
      const double nx = xs.row(k).norm();
      const double ny = ys.row(k).norm();
      const double alpha = nx / (ny + std::numeric_limits<double>::epsilon());
      Eigen::RowVectorXd yp = alpha * ys.row(k);
      yp = yp.cwiseMin(xs.row(k) * (1.0 + clip));
      total += correlation(xs.row(k), yp);
      ++count;
    }
  }
  return total / count;
}

// ---------------------------------------------------------------------------
// SI-SDR and segmental SNR

inline constexpr double kSiSdrCap = 100.0;

inline double si_sdr(const Waveform& reference, const Waveform& estimate) {
  if (reference.size() != estimate.size()) throw ShapeError("si_sdr: length mismatch");
  const Eigen::Map<const Eigen::VectorXd> r(reference.samples.data(), static_cast<Eigen::Index>(reference.size()));
  const Eigen::Map<const Eigen::VectorXd> e(estimate.samples.data(), static_cast<Eigen::Index>(estimate.size()));
  const double rr = r.squaredNorm();
  if (!(rr > 0.0)) throw DataError("si_sdr: reference is silent");
  const Eigen::VectorXd target = (e.dot(r) / rr) * r;
  const double pt = target.squaredNorm();
  const double pn = (e - target).squaredNorm();
  if (pn <= pt * std::pow(10.0, -kSiSdrCap / 10.0)) return kSiSdrCap;
  return std::min(kSiSdrCap, 10.0 * std::log10(pt / pn));
}

// 32 ms frames, 50% overlap, per-frame SNR clamped to [-10, 35] dB.
inline double seg_snr(const Waveform& clean, const Waveform& estimate) {
  const std::size_t n = std::min(clean.size(), estimate.size());
  const std::size_t frame = static_cast<std::size_t>(0.032 * clean.sample_rate);
  const std::size_t hop = frame / 2;
  if (n < frame) throw DataError("seg_snr: input shorter than one frame");
  double sum = 0.0;
  int count = 0;
  for (std::size_t s = 0; s + frame <= n; s += hop) {
    double ps = 0.0, pe = 0.0;
    for (std::size_t i = s; i < s + frame; ++i) {
      ps += clean.samples[i] * clean.samples[i];
      const double d = clean.samples[i] - estimate.samples[i];
      pe += d * d;
    }
    double snr;
    if (pe == 0.0)
      snr = 35.0;
    else if (ps == 0.0)
      snr = -10.0;
    else
      snr = 10.0 * std::log10(ps / pe);
    sum += std::clamp(snr, -10.0, 35.0);
    ++count;
  }
  return sum / count;
}

// Mean squared magnitude difference over each band's frames x width bins.
inline std::vector<double> band_mse(const Eigen::MatrixXd& clean_mag, const Eigen::MatrixXd& enhanced_mag,
                                    const SubbandPartition& part) {
  if (clean_mag.rows() != enhanced_mag.rows() || clean_mag.cols() != enhanced_mag.cols())
    throw ShapeError("band_mse: shape mismatch");
  if (clean_mag.cols() != part.total_bins) throw ShapeError("band_mse: bin count does not match partition");
  std::vector<double> out;
  for (const auto& b : part.bands)
    out.push_back((clean_mag.middleCols(b.start, b.width) - enhanced_mag.middleCols(b.start, b.width)).squaredNorm() /
                  static_cast<double>(clean_mag.rows() * b.width));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct UtteranceMetrics {
  std::string name;
  double stoi = 0.0;
  double si_sdr = 0.0;
  double seg_snr = 0.0;
  std::vector<double> band_mse;
  std::optional<double> pesq;  // merged from an external tool
};

struct MetricReport {
  std::vector<UtteranceMetrics> utterances;

  UtteranceMetrics mean() const {
    UtteranceMetrics m;
    m.name = "mean";
    if (utterances.empty()) return m;
    const double n = static_cast<double>(utterances.size());
    m.band_mse.assign(utterances.front().band_mse.size(), 0.0);
    bool all_pesq = true;
    double pesq = 0.0;
    for (const auto& u : utterances) {
      m.stoi += u.stoi / n;
      m.si_sdr += u.si_sdr / n;
      m.seg_snr += u.seg_snr / n;
      for (std::size_t b = 0; b < m.band_mse.size(); ++b) m.band_mse[b] += u.band_mse[b] / n;
      if (u.pesq)
        pesq += *u.pesq / n;
      else
        all_pesq = false;
    }
    if (all_pesq) m.pesq = pesq;
    return m;
  }
};

inline UtteranceMetrics evaluate_pair(std::string name, const Waveform& clean, const Waveform& enhanced,
                                      const SubbandPartition& part, const StftConfig& cfg) {
  const std::size_t n = std::min(clean.size(), enhanced.size());
  Waveform c{std::vector<double>(clean.samples.begin(), clean.samples.begin() + static_cast<std::ptrdiff_t>(n))};
  Waveform e{std::vector<double>(enhanced.samples.begin(), enhanced.samples.begin() + static_cast<std::ptrdiff_t>(n))};
  UtteranceMetrics m;
  m.name = std::move(name);
  m.stoi = stoi(c, e);
  m.si_sdr = si_sdr(c, e);
  m.seg_snr = seg_snr(c, e);
  m.band_mse = band_mse(stft(c, cfg).magnitude(), stft(e, cfg).magnitude(), part);
  return m;
}

// STOI is reported as a percentage at this layer only.
inline nlohmann::json to_json(const UtteranceMetrics& m) {
  nlohmann::json j{{"name", m.name},
                   {"stoi_percent", 100.0 * m.stoi},
                   {"si_sdr_db", m.si_sdr},
                   {"seg_snr_db", m.seg_snr},
                   {"band_mse", m.band_mse}};
  if (m.pesq) j["pesq"] = *m.pesq;
  return j;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json utts = nlohmann::json::array();
  for (const auto& u : r.utterances) utts.push_back(to_json(u));
  return {{"utterances", utts}, {"mean", to_json(r.mean())}};
}

inline std::string to_csv(const MetricReport& r) {
  std::ostringstream out;
  out.precision(10);
  const std::size_t bands = r.utterances.empty() ? 0 : r.utterances.front().band_mse.size();
  const bool pesq = r.mean().pesq.has_value();
  out << "name,stoi_percent,si_sdr_db,seg_snr_db";
  for (std::size_t b = 0; b < bands; ++b) out << ",band_mse_" << b;
  if (pesq) out << ",pesq";
  out << '\n';
  auto row = [&](const UtteranceMetrics& m) {
    out << m.name << ',' << 100.0 * m.stoi << ',' << m.si_sdr << ',' << m.seg_snr;
    for (double v : m.band_mse) out << ',' << v;
    if (pesq) out << ',' << *m.pesq;
    out << '\n';
  };
  for (const auto& u : r.utterances) row(u);
  row(r.mean());
  return out.str();
}

}  // namespace sbkd
