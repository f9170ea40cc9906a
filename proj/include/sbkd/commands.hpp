// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `sbkd` tool. Each command takes a fully
// resolved RunConfig; the tool applies flag overrides before calling them.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbkd/checkpoint.hpp"
#include "sbkd/data.hpp"
#include "sbkd/error.hpp"
#include "sbkd/metrics.hpp"
#include "sbkd/network.hpp"
#include "sbkd/spectral.hpp"
#include "sbkd/subband.hpp"
#include "sbkd/training.hpp"

namespace sbkd {

struct RunConfig {
  int frame_len = 320;
  int hop = 160;
  int band_width = 40;
  int hidden_size = 256;
  std::optional<int> teacher_hidden_size;  // defaults to hidden_size
  TrainConfig train;
  double alpha = 0.1;
  std::filesystem::path teacher_dir;  // defaults to checkpoint_dir
  std::filesystem::path corpus_dir = "corpus";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_dir = "reports";
  std::uint64_t seed = 0;

  StftConfig stft() const {
    if (hop * 2 != frame_len) throw UsageError("hop must be half the frame length");
    return StftConfig::with_frame_len(frame_len);
  }
  SubbandPartition partition() const { return make_partition(frame_len / 2 + 1, band_width); }
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
  std::filesystem::path teachers() const { return teacher_dir.empty() ? checkpoint_dir : teacher_dir; }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["stft"] = {{"frame_len", c.frame_len}, {"hop", c.hop}};
  j["partition"] = {{"band_width", c.band_width}};
  j["model"] = {{"hidden_size", c.hidden_size}};
  if (c.teacher_hidden_size) j["model"]["teacher_hidden_size"] = *c.teacher_hidden_size;
  const TrainConfig& t = c.train;
  j["train"] = {{"lr", t.lr},
                {"batch_size", t.batch_size},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"lr_reduce_factor", t.lr_reduce_factor},
                {"lr_patience", t.lr_patience},
                {"stop_patience", t.stop_patience},
                {"stop_min_delta", t.stop_min_delta},
                {"chunk_frames", t.chunk_frames},
                {"max_epochs", t.max_epochs},
                {"validation_fraction", t.validation_fraction}};
  j["distill"] = {{"alpha", c.alpha}, {"teacher_dir", c.teacher_dir.generic_string()}};
  j["paths"] = {{"corpus_dir", c.corpus_dir.generic_string()},
                {"checkpoint_dir", c.checkpoint_dir.generic_string()},
                {"report_dir", c.report_dir.generic_string()}};
  return j;
}

// Missing keys keep their defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("stft")) {
      c.frame_len = j["stft"].value("frame_len", c.frame_len);
      c.hop = j["stft"].value("hop", c.frame_len / 2);
    }
    if (j.contains("partition")) c.band_width = j["partition"].value("band_width", c.band_width);
    if (j.contains("model")) {
      c.hidden_size = j["model"].value("hidden_size", c.hidden_size);
      if (j["model"].contains("teacher_hidden_size")) c.teacher_hidden_size = j["model"]["teacher_hidden_size"].get<int>();
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      TrainConfig& d = c.train;
      d.lr = t.value("lr", d.lr);
      d.batch_size = t.value("batch_size", d.batch_size);
      d.beta1 = t.value("beta1", d.beta1);
      d.beta2 = t.value("beta2", d.beta2);
      d.eps = t.value("eps", d.eps);
      d.lr_reduce_factor = t.value("lr_reduce_factor", d.lr_reduce_factor);
      d.lr_patience = t.value("lr_patience", d.lr_patience);
      d.stop_patience = t.value("stop_patience", d.stop_patience);
      d.stop_min_delta = t.value("stop_min_delta", d.stop_min_delta);
      d.chunk_frames = t.value("chunk_frames", d.chunk_frames);
      d.max_epochs = t.value("max_epochs", d.max_epochs);
      d.validation_fraction = t.value("validation_fraction", d.validation_fraction);
    }
    if (j.contains("distill")) {
      c.alpha = j["distill"].value("alpha", c.alpha);
      c.teacher_dir = j["distill"].value("teacher_dir", std::string());
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      c.corpus_dir = p.value("corpus_dir", c.corpus_dir.string());
      c.checkpoint_dir = p.value("checkpoint_dir", c.checkpoint_dir.string());
      c.report_dir = p.value("report_dir", c.report_dir.string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    return run_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline std::filesystem::path teacher_checkpoint_path(const std::filesystem::path& dir, int band) {
  return dir / ("teacher_band_" + std::to_string(band) + ".sbse");
}

// ---------------------------------------------------------------------------

inline int cmd_gen_data(const RunConfig& cfg, int count, double duration_s, std::ostream& out) {
  if (count < 1) throw UsageError("--count must be >= 1");
  const CorpusIndex index = generate_toy_corpus(cfg.corpus_dir, cfg.seed, count, duration_s);
  std::size_t train = index.split(Split::train).size();
  out << "wrote " << index.entries.size() << " utterances (" << train << " train, "
      << index.entries.size() - train << " test) to " << cfg.corpus_dir.string() << '\n';
  return 0;
}

inline TrainData load_train_data(const RunConfig& cfg) {
  const CorpusIndex index = load_corpus_index(cfg.corpus_dir);
  const StftConfig stft_cfg = cfg.stft();
  auto to_utts = [&](Split s) {
    std::vector<Utterance> utts;
    for (auto& p : load_pairs(index, s)) utts.push_back(prepare_utterance(p.name, p.clean, p.noisy, stft_cfg));
    return utts;
  };
  std::vector<Utterance> train = to_utts(Split::train);
  std::vector<Utterance> val = to_utts(Split::val);
  if (train.empty()) throw DataError("corpus " + cfg.corpus_dir.string() + " has no training utterances");
  if (!val.empty()) return {std::move(train), std::move(val)};
  return split_validation(std::move(train), cfg.train.validation_fraction, cfg.seed);
}

inline void print_summary(const TrainReport& r, const std::filesystem::path& ckpt, std::ostream& out) {
  const auto& last = r.epochs.back();
  out << "epochs " << r.epochs.size() << " (" << r.stop_reason << "), best epoch " << r.best_epoch
      << ", best val loss " << r.best_val_loss << ", final lr " << last.lr << '\n'
      << "checkpoint " << ckpt.string() << '\n';
}

inline int cmd_train_teacher(const RunConfig& cfg, int band, std::ostream& out,
                             const std::optional<std::filesystem::path>& output = std::nullopt) {
  const SubbandPartition part = cfg.partition();
  check_band(part, band);
  const TrainData data = load_train_data(cfg);
  const NetConfig net{cfg.band_width, cfg.teacher_hidden_size.value_or(cfg.hidden_size)};
  const TrainResult result = train_teacher(data, band, part, net, cfg.train_config(), cfg.stft());
  const auto path = output.value_or(teacher_checkpoint_path(cfg.checkpoint_dir, band));
  save_checkpoint(path, result.checkpoint);
  write_report_jsonl(cfg.report_dir / ("teacher_band_" + std::to_string(band) + ".jsonl"), result.report);
  print_summary(result.report, path, out);
  return 0;
}

inline std::vector<Checkpoint> load_teachers(const std::filesystem::path& dir, const SubbandPartition& part) {
  std::vector<Checkpoint> teachers;
  for (int b = 0; b < part.band_count(); ++b) {
    const auto path = teacher_checkpoint_path(dir, b);
    if (!std::filesystem::exists(path))
      throw DataError("missing teacher for band " + std::to_string(b) + " (" + path.string() + ")");
    teachers.push_back(load_checkpoint(path));
  }
  return teachers;
}

inline int cmd_train_student(const RunConfig& cfg, bool use_distill, std::ostream& out,
                             const std::optional<std::filesystem::path>& output = std::nullopt) {
  const SubbandPartition part = cfg.partition();
  std::optional<DistillConfig> distill;
  if (use_distill) distill = DistillConfig{cfg.alpha, load_teachers(cfg.teachers(), part)};
  const TrainData data = load_train_data(cfg);
  const NetConfig net{cfg.band_width, cfg.hidden_size};
  const TrainResult result = train_student(data, part, net, cfg.train_config(), distill, cfg.stft());
  const auto path = output.value_or(cfg.checkpoint_dir / "student.sbse");
  save_checkpoint(path, result.checkpoint);
  write_report_jsonl(cfg.report_dir / (path.stem().string() + ".jsonl"), result.report);
  print_summary(result.report, path, out);
  return 0;
}

inline int cmd_enhance(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& in,
                       const std::filesystem::path& out_path, bool bypass, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  RunConfig run = cfg;
  run.frame_len = ckpt.frame_len;
  run.hop = ckpt.hop;
  run.band_width = ckpt.params.width;
  const Waveform noisy = read_wav(in);
  const Waveform enhanced = enhance(ckpt, noisy, run.partition(), run.stft(), bypass);
  write_wav(out_path, enhanced);
  out << "wrote " << out_path.string() << " (" << enhanced.size() << " samples)\n";
  return 0;
}

inline std::map<std::string, double> read_pesq_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::map<std::string, double> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    const std::string name = line.substr(0, comma);
    try {
      out[name] = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      // header row
    }
  }
  return out;
}

// Pairs <clean_dir>/X.wav with <test_dir>/X.wav and writes metrics.json and
// metrics.csv under report_dir.
inline MetricReport cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& clean_dir,
                                 const std::filesystem::path& test_dir, std::ostream& out,
                                 const std::optional<std::filesystem::path>& pesq_csv = std::nullopt) {
  namespace fs = std::filesystem;
  auto list = [](const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::set<std::string> names;
    for (const auto& f : fs::directory_iterator(dir))
      if (f.path().extension() == ".wav") names.insert(f.path().stem().string());
    return names;
  };
  const auto clean_names = list(clean_dir);
  const auto test_names = list(test_dir);
  std::string unpaired;
  for (const auto& n : clean_names)
    if (!test_names.count(n)) unpaired += " " + n + " (clean only)";
  for (const auto& n : test_names)
    if (!clean_names.count(n)) unpaired += " " + n + " (test only)";
  if (!unpaired.empty()) throw DataError("unpaired files:" + unpaired);
  if (clean_names.empty()) throw DataError("no wav files in " + clean_dir.string());

  std::map<std::string, double> pesq;
  if (pesq_csv) pesq = read_pesq_csv(*pesq_csv);

  const SubbandPartition part = cfg.partition();
  const StftConfig stft_cfg = cfg.stft();
  MetricReport report;
  for (const auto& n : clean_names) {
    auto m = evaluate_pair(n, read_wav(clean_dir / (n + ".wav")), read_wav(test_dir / (n + ".wav")), part, stft_cfg);
    if (auto it = pesq.find(n); it != pesq.end()) m.pesq = it->second;
    report.utterances.push_back(std::move(m));
  }

  fs::create_directories(cfg.report_dir);
  std::ofstream(cfg.report_dir / "metrics.json") << to_json(report).dump(2) << '\n';
  std::ofstream(cfg.report_dir / "metrics.csv") << to_csv(report);
  const auto mean = report.mean();
  out << report.utterances.size() << " utterances: STOI " << 100.0 * mean.stoi << "%, SI-SDR " << mean.si_sdr
      << " dB, segSNR " << mean.seg_snr << " dB\n";
  return report;
}

inline std::string group_thousands(std::int64_t n) {
  std::string digits = std::to_string(n);
  for (int i = static_cast<int>(digits.size()) - 3; i > 0; i -= 3) digits.insert(static_cast<std::size_t>(i), ",");
  return digits;
}

inline int cmd_param_count(const RunConfig& cfg, std::ostream& out) {
  if (cfg.hidden_size < 1) throw UsageError("hidden size must be >= 1");
  cfg.partition();  // validates the band width against the bin count
  const std::int64_t n = param_count(cfg.band_width, cfg.hidden_size);
  char millions[32];
  std::snprintf(millions, sizeof millions, "%.2f", static_cast<double>(n) / 1e6);
  out << "w=" << cfg.band_width << " h=" << cfg.hidden_size << " params=" << group_thousands(n) << " (" << millions
      << " M)\n";
  return 0;
}

}  // namespace sbkd
