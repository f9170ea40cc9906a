// SPDX-License-Identifier: Apache-2.0
//
// WAV I/O, SNR-controlled mixing, the synthetic toy corpus and corpus indexes.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbkd/error.hpp"
#include "sbkd/spectral.hpp"

namespace sbkd {

// ---------------------------------------------------------------------------
// Random numbers. Explicit double mapping keeps generated data identical
// across standard library implementations.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // [0, n)
  std::size_t index(std::size_t n) {
    // Rejection sampling avoids modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do r = engine_(); while (r >= limit);
    return static_cast<std::size_t>(r % n);
  }
  // Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Mixes a seed with stream identifiers (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (a + 1) + 0xBF58476D1CE4E5B9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Seeded Fisher-Yates permutation of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5348, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  return perm;
}

// ---------------------------------------------------------------------------
// WAV (RIFF PCM, 16-bit, mono, 16 kHz)

namespace detail {
inline std::uint32_t le32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}
inline std::uint16_t le16(const char* p) {
  std::uint16_t v;
  std::memcpy(&v, p, 2);
  return v;
}
}  // namespace detail

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw DataError(where + "not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::uint32_t size = detail::le32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw DataError(where + "truncated chunk '" + id + "'");
    if (id == "fmt ") {
      if (size < 16) throw DataError(where + "short fmt chunk");
      format = detail::le16(bytes.data() + body);
      channels = detail::le16(bytes.data() + body + 2);
      rate = detail::le32(bytes.data() + body + 4);
      bits = detail::le16(bytes.data() + body + 14);
      // WAVE_FORMAT_EXTENSIBLE: subformat GUID starts with the format tag.
      if (format == 0xFFFE && size >= 26) format = detail::le16(bytes.data() + body + 24);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw DataError(where + "data chunk before fmt chunk");
      if (format != 1) throw DataError(where + "expected PCM, found format tag " + std::to_string(format));
      if (channels != 1) throw DataError(where + "expected mono, found " + std::to_string(channels) + " channels");
      if (rate != static_cast<std::uint32_t>(kSampleRate))
        throw DataError(where + "expected " + std::to_string(kSampleRate) + " Hz, found " + std::to_string(rate) +
                        " Hz");
      if (bits != 16) throw DataError(where + "expected 16-bit samples, found " + std::to_string(bits) + "-bit");
      Waveform wave;
      wave.samples.resize(size / 2);
      for (std::size_t i = 0; i < wave.samples.size(); ++i) {
        std::int16_t s;
        std::memcpy(&s, bytes.data() + body + 2 * i, 2);
        wave.samples[i] = s / 32768.0;
      }
      return wave;
    }
    pos = body + size + (size & 1u);
  }
  throw DataError(where + "no data chunk");
}

inline void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  validate(wave);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());

  const std::uint32_t data_bytes = static_cast<std::uint32_t>(wave.size() * 2);
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  out.write("RIFF", 4);
  u32(36 + data_bytes);
  out.write("WAVEfmt ", 8);
  u32(16);
  u16(1);
  u16(1);
  u32(kSampleRate);
  u32(kSampleRate * 2);
  u16(2);
  u16(16);
  out.write("data", 4);
  u32(data_bytes);
  std::vector<std::int16_t> pcm(wave.size());
  for (std::size_t i = 0; i < wave.size(); ++i) {
    const double v = std::round(std::clamp(wave.samples[i], -1.0, 32767.0 / 32768.0) * 32768.0);
    pcm[i] = static_cast<std::int16_t>(v);
  }
  out.write(reinterpret_cast<const char*>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
}

// ---------------------------------------------------------------------------
// Mixing

inline double mean_power(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

inline double power_db(double ratio) { return 10.0 * std::log10(ratio); }

struct MixtureSample {
  Waveform clean;
  Waveform noise;  // scaled noise actually added
  Waveform noisy;
  double snr_db = 0.0;
};

// Crops the noise at a seeded random offset, scales it to the requested SNR
// over the whole utterance and adds it. snr_db = +inf yields noisy == clean.
inline MixtureSample mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db, Rng& rng) {
  if (noise.size() < clean.size()) throw DataError("noise is shorter than clean speech");
  const double p_clean = mean_power(clean.samples);
  if (!(p_clean > 0.0)) throw DataError("clean signal is silent");

  const std::size_t offset = rng.index(noise.size() - clean.size() + 1);
  std::vector<double> crop(noise.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                           noise.samples.begin() + static_cast<std::ptrdiff_t>(offset + clean.size()));
  const double p_noise = mean_power(crop);
  if (!(p_noise > 0.0)) throw DataError("noise signal is silent");

  const double scale = std::isinf(snr_db) && snr_db > 0 ? 0.0 : std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  MixtureSample m;
  m.clean = clean;
  m.snr_db = snr_db;
  m.noise.samples.resize(clean.size());
  m.noisy.samples.resize(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    m.noise.samples[i] = scale * crop[i];
    m.noisy.samples[i] = clean.samples[i] + m.noise.samples[i];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

inline constexpr std::array<double, 4> kTrainSnrs = {0.0, 5.0, 10.0, 15.0};
inline constexpr std::array<double, 4> kTestSnrs = {2.5, 7.5, 12.5, 17.5};

enum class NoiseKind { white, pink, band };

inline const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::white: return "white";
    case NoiseKind::pink: return "pink";
    case NoiseKind::band: return "band";
  }
  return "?";
}

// Harmonic tone complex with a gliding fundamental in 80-300 Hz, harmonic
// amplitudes falling with frequency, and a syllable-like on/off envelope.
inline Waveform synth_speech_like(Rng& rng, std::size_t length) {
  const double fs = kSampleRate;
  const double f0 = rng.uniform(80.0, 300.0);
  const double glide_rate = rng.uniform(0.5, 3.0);
  const double glide_depth = rng.uniform(0.03, 0.12);
  const double glide_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double formant = rng.uniform(400.0, 1200.0);
  const double tilt = rng.uniform(0.8, 1.4);

  const int harmonics = static_cast<int>(7000.0 / (f0 * (1.0 + glide_depth)));
  std::vector<double> amp(harmonics), phase(harmonics);
  for (int k = 1; k <= harmonics; ++k) {
    const double f = k * f0;
    const double peak = 1.0 + 2.0 * std::exp(-std::pow((f - formant) / 300.0, 2));
    amp[k - 1] = rng.uniform(0.6, 1.0) * peak / std::pow(k, tilt);
    phase[k - 1] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  // Alternating voiced (Hann-shaped) and silent segments.
  std::vector<double> env(length, 0.0);
  std::size_t pos = static_cast<std::size_t>(rng.uniform(0.0, 0.08) * fs);
  while (pos < length) {
    const auto voiced = static_cast<std::size_t>(rng.uniform(0.12, 0.3) * fs);
    const double level = rng.uniform(0.5, 1.0);
    for (std::size_t i = 0; i < voiced && pos + i < length; ++i)
      env[pos + i] = level * std::pow(std::sin(std::numbers::pi * (i + 0.5) / voiced), 2);
    pos += voiced + static_cast<std::size_t>(rng.uniform(0.03, 0.1) * fs);
  }

  std::vector<double> x(length, 0.0);
  double theta = 0.0;
  for (std::size_t n = 0; n < length; ++n) {
    const double t = n / fs;
    const double f = f0 * (1.0 + glide_depth * std::sin(2.0 * std::numbers::pi * glide_rate * t + glide_phase));
    theta += 2.0 * std::numbers::pi * f / fs;
    if (env[n] == 0.0) continue;
    double s = 0.0;
    for (int k = 1; k <= harmonics; ++k) s += amp[k - 1] * std::sin(k * theta + phase[k - 1]);
    x[n] = env[n] * s;
  }
  const double rms = std::sqrt(mean_power(x));
  if (rms > 0)
    for (double& v : x) v *= 0.05 / rms;
  return Waveform{std::move(x)};
}

inline Waveform synth_noise(Rng& rng, NoiseKind kind, std::size_t length) {
  std::vector<double> x(length);
  switch (kind) {
    case NoiseKind::white:
      for (double& v : x) v = rng.normal();
      break;
    case NoiseKind::pink: {
      // Paul Kellet's economy pink filter.
      double b0 = 0, b1 = 0, b2 = 0;
      for (double& v : x) {
        const double w = rng.normal();
        b0 = 0.99765 * b0 + w * 0.0990460;
        b1 = 0.96300 * b1 + w * 0.2965164;
        b2 = 0.57000 * b2 + w * 1.0526913;
        v = b0 + b1 + b2 + w * 0.1848;
      }
      break;
    }
    case NoiseKind::band: {
      // RBJ band-pass biquad, constant peak gain.
      const double fc = rng.uniform(500.0, 4000.0);
      const double q = rng.uniform(0.7, 2.0);
      const double w0 = 2.0 * std::numbers::pi * fc / kSampleRate;
      const double alpha = std::sin(w0) / (2.0 * q);
      const double a0 = 1.0 + alpha;
      const double b0 = alpha / a0, b2 = -alpha / a0;
      const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
      double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
      for (double& v : x) {
        const double in = rng.normal();
        const double y = b0 * in + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = in;
        y2 = y1;
        y1 = y;
        v = y;
      }
      break;
    }
  }
  const double rms = std::sqrt(mean_power(x));
  for (double& v : x) v *= 0.05 / rms;
  return Waveform{std::move(x)};
}

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct ToyUtterance {
  std::string name;
  Split split = Split::train;
  NoiseKind noise_kind = NoiseKind::white;
  MixtureSample mixture;
};

// In-memory toy corpus: one fifth of the utterances (rounded down) form the
// test split, mixed at the test SNRs; the rest are train, at the train SNRs.
inline std::vector<ToyUtterance> synthesize_toy_corpus(std::uint64_t seed, int count, double duration_s) {
  if (count < 1) throw UsageError("count must be >= 1");
  if (!(duration_s > 0.0)) throw UsageError("duration must be positive");
  const auto length = static_cast<std::size_t>(std::llround(duration_s * kSampleRate));
  const int test_count = count / 5;
  std::vector<ToyUtterance> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, 0x70, static_cast<std::uint64_t>(i)));
    ToyUtterance u;
    u.split = i < count - test_count ? Split::train : Split::test;
    char name[32];
    std::snprintf(name, sizeof name, "utt%05d", i);
    u.name = name;
    u.noise_kind = static_cast<NoiseKind>(rng.index(3));
    const Waveform clean = synth_speech_like(rng, length);
    const Waveform noise = synth_noise(rng, u.noise_kind, length + kSampleRate / 4);
    const auto& snrs = u.split == Split::train ? kTrainSnrs : kTestSnrs;
    const double snr = snrs[rng.index(snrs.size())];
    u.mixture = mix_at_snr(clean, noise, snr, rng);
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus index

struct CorpusEntry {
  std::string name;
  std::filesystem::path clean;  // relative to the corpus root
  std::filesystem::path noisy;
  double duration = 0.0;
  Split split = Split::train;
  std::optional<double> snr_db;
};

struct CorpusIndex {
  std::filesystem::path root;
  std::vector<CorpusEntry> entries;

  std::vector<CorpusEntry> split(Split s) const {
    std::vector<CorpusEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }
};

inline constexpr const char* kIndexFile = "index.json";

inline nlohmann::json to_json(const CorpusIndex& index) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : index.entries) {
    nlohmann::json j{{"name", e.name},
                     {"clean", e.clean.generic_string()},
                     {"noisy", e.noisy.generic_string()},
                     {"duration", e.duration},
                     {"split", to_string(e.split)}};
    if (e.snr_db) j["snr_db"] = *e.snr_db;
    entries.push_back(std::move(j));
  }
  return {{"sample_rate", kSampleRate}, {"entries", entries}};
}

inline void write_index(const CorpusIndex& index) {
  std::ofstream out(index.root / kIndexFile);
  if (!out) throw DataError("cannot write " + (index.root / kIndexFile).string());
  out << to_json(index).dump(2) << '\n';
}

// Writes the toy corpus as WAV files plus index.json under `dir`.
inline CorpusIndex generate_toy_corpus(const std::filesystem::path& dir, std::uint64_t seed, int count,
                                       double duration_s) {
  const auto utts = synthesize_toy_corpus(seed, count, duration_s);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());

  CorpusIndex index;
  index.root = dir;
  for (const auto& u : utts) {
    CorpusEntry e;
    e.name = u.name;
    e.split = u.split;
    e.clean = std::filesystem::path(to_string(u.split)) / "clean" / (u.name + ".wav");
    e.noisy = std::filesystem::path(to_string(u.split)) / "noisy" / (u.name + ".wav");
    e.duration = static_cast<double>(u.mixture.clean.size()) / kSampleRate;
    e.snr_db = u.mixture.snr_db;
    write_wav(dir / e.clean, u.mixture.clean);
    write_wav(dir / e.noisy, u.mixture.noisy);
    index.entries.push_back(std::move(e));
  }
  write_index(index);
  return index;
}

// Reads index.json, or pairs <dir>/clean/*.wav with <dir>/noisy/*.wav by
// file name (all entries tagged train) when no index exists.
inline CorpusIndex load_corpus_index(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  CorpusIndex index;
  index.root = dir;
  const fs::path index_path = dir / kIndexFile;
  if (fs::exists(index_path)) {
    std::ifstream in(index_path);
    try {
      const auto j = nlohmann::json::parse(in);
      for (const auto& item : j.at("entries")) {
        CorpusEntry e;
        e.name = item.at("name").get<std::string>();
        e.clean = item.at("clean").get<std::string>();
        e.noisy = item.at("noisy").get<std::string>();
        e.duration = item.value("duration", 0.0);
        e.split = parse_split(item.value("split", std::string("train")));
        if (item.contains("snr_db")) e.snr_db = item.at("snr_db").get<double>();
        index.entries.push_back(std::move(e));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed corpus index " + index_path.string() + ": " + e.what());
    }
  } else {
    const fs::path clean_dir = dir / "clean", noisy_dir = dir / "noisy";
    if (!fs::is_directory(clean_dir) || !fs::is_directory(noisy_dir))
      throw DataError("corpus " + dir.string() + " has neither index.json nor clean/ and noisy/ directories");
    std::vector<std::string> names;
    for (const auto& f : fs::directory_iterator(clean_dir))
      if (f.path().extension() == ".wav") names.push_back(f.path().stem().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
      if (!fs::exists(noisy_dir / (n + ".wav"))) throw DataError("no noisy file paired with clean/" + n + ".wav");
      index.entries.push_back({n, fs::path("clean") / (n + ".wav"), fs::path("noisy") / (n + ".wav"), 0.0,
                               Split::train, std::nullopt});
    }
  }
  std::map<std::string, Split> seen;
  for (const auto& e : index.entries) {
    auto [it, inserted] = seen.emplace(e.name, e.split);
    if (!inserted) throw DataError("corpus entry '" + e.name + "' appears more than once");
  }
  if (index.entries.empty()) throw DataError("corpus " + dir.string() + " is empty");
  return index;
}

struct WavePair {
  std::string name;
  Waveform clean;
  Waveform noisy;
};

inline std::vector<WavePair> load_pairs(const CorpusIndex& index, Split split) {
  std::vector<WavePair> out;
  for (const auto& e : index.entries) {
    if (e.split != split) continue;
    WavePair p{e.name, read_wav(index.root / e.clean), read_wav(index.root / e.noisy)};
    if (p.clean.size() != p.noisy.size()) throw DataError("length mismatch between clean and noisy '" + e.name + "'");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace sbkd
