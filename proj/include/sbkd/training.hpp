// SPDX-License-Identifier: Apache-2.0
//
// Losses, teacher and student training, and sub-band enhancement.
//
// Teachers each learn one band. The student learns all bands with one set of
// weights: every optimizer step draws a band uniformly at random and trains on
// that band for the whole batch. With distillation the student's loss is
//
//   mse(student, clean) + alpha * mse(student, teacher_i)
//
// where teacher_i is the frozen teacher of the drawn band.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sbkd/checkpoint.hpp"
#include "sbkd/data.hpp"
#include "sbkd/error.hpp"
#include "sbkd/network.hpp"
#include "sbkd/spectral.hpp"
#include "sbkd/subband.hpp"

namespace sbkd {

struct TrainConfig {
  double lr = 0.0002;
  int batch_size = 600;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_reduce_factor = 0.5;
  int lr_patience = 3;
  int stop_patience = 10;
  double stop_min_delta = 1e-5;
  int chunk_frames = 192;
  int max_epochs = 100;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw UsageError("lr must be positive");
  if (c.batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (!(c.lr_reduce_factor > 0.0 && c.lr_reduce_factor < 1.0)) throw UsageError("lr_reduce_factor must be in (0, 1)");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw UsageError("Adam decay rates must be in [0, 1)");
  if (c.lr_patience < 1 || c.stop_patience < 1) throw UsageError("patience must be >= 1");
  if (c.chunk_frames < 1) throw UsageError("chunk_frames must be >= 1");
  if (c.max_epochs < 1) throw UsageError("max_epochs must be >= 1");
  if (!(c.validation_fraction >= 0.0 && c.validation_fraction < 1.0))
    throw UsageError("validation_fraction must be in [0, 1)");
}

struct NetConfig {
  int width = 40;
  int hidden = 256;
};

struct DistillConfig {
  double alpha = 0.1;
  std::vector<Checkpoint> teachers;  // one per band
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double wall_time_s = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string stop_reason;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainReport report;
};

// ---------------------------------------------------------------------------
// Losses

struct LossValue {
  double value = 0.0;
  Matrix grad;  // d loss / d prediction
};

inline LossValue mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse_loss: shape mismatch");
  if (pred.size() == 0) throw ShapeError("mse_loss: empty input");
  const double n = static_cast<double>(pred.size());
  const Matrix diff = pred - target;
  return {diff.squaredNorm() / n, (2.0 / n) * diff};
}

// No gradient flows to the teacher output.
inline LossValue distill_loss(const Matrix& student, const Matrix& clean, const Matrix& teacher, double alpha) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols())
    throw ShapeError("distill_loss: shape mismatch");
  if (alpha < 0.0) throw UsageError("alpha must be >= 0");
  LossValue to_clean = mse_loss(student, clean);
  LossValue to_teacher = mse_loss(student, teacher);
  return {to_clean.value + alpha * to_teacher.value, to_clean.grad + alpha * to_teacher.grad};
}

// ---------------------------------------------------------------------------
// Spectral corpus

// Magnitude planes (frames x bins) of one clean/noisy pair.
struct Utterance {
  std::string name;
  Matrix noisy;
  Matrix clean;

  Eigen::Index frames() const { return noisy.rows(); }
};

inline Utterance prepare_utterance(std::string name, const Waveform& clean, const Waveform& noisy,
                                   const StftConfig& cfg) {
  if (clean.size() != noisy.size()) throw DataError("clean/noisy length mismatch for '" + name + "'");
  return {std::move(name), stft(noisy, cfg).magnitude(), stft(clean, cfg).magnitude()};
}

struct TrainData {
  std::vector<Utterance> train;
  std::vector<Utterance> validation;
};

// Moves a seeded random fraction of the utterances into the validation set.
// With fewer than two utterances the training set doubles as validation.
inline TrainData split_validation(std::vector<Utterance> utts, double fraction, std::uint64_t seed) {
  if (utts.empty()) throw DataError("empty corpus");
  TrainData data;
  auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(utts.size())));
  if (fraction > 0.0 && n_val == 0 && utts.size() >= 2) n_val = 1;
  if (n_val == 0) {
    data.validation = utts;
    data.train = std::move(utts);
    return data;
  }
  const auto perm = epoch_permutation(utts.size(), derive_seed(seed, 0x7A1), 0);
  std::vector<bool> is_val(utts.size(), false);
  for (std::size_t k = 0; k < n_val; ++k) is_val[perm[k]] = true;
  for (std::size_t i = 0; i < utts.size(); ++i)
    (is_val[i] ? data.validation : data.train).push_back(std::move(utts[i]));
  return data;
}

// Draws the band for each student optimizer step.
class BandSampler {
 public:
  explicit BandSampler(std::uint64_t train_seed) : rng_(derive_seed(train_seed, 0xBA2D)) {}
  int next(int band_count) { return static_cast<int>(rng_.index(static_cast<std::size_t>(band_count))); }

 private:
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Batching

namespace detail {

struct ChunkBatch {
  SequenceBatch noisy;
  Matrix clean;                      // width x TB
  Eigen::Array<bool, 1, Eigen::Dynamic> mask;  // per column
  double real_elements = 0.0;
};

// Frames [offset, offset + frames) of each utterance, bins [band.start, band.stop()).
// Missing frames are zero and masked out.
inline ChunkBatch make_batch(const std::vector<const Utterance*>& utts, const std::vector<Eigen::Index>& offsets,
                             const std::vector<BandRange>& bands, Eigen::Index frames) {
  const auto batch = static_cast<Eigen::Index>(utts.size());
  const int width = bands.front().width;
  ChunkBatch b;
  b.noisy = {Matrix::Zero(width, frames * batch), frames, batch};
  b.clean = Matrix::Zero(width, frames * batch);
  b.mask = Eigen::Array<bool, 1, Eigen::Dynamic>::Constant(frames * batch, false);
  for (Eigen::Index k = 0; k < batch; ++k) {
    const Utterance& u = *utts[k];
    const BandRange& band = bands[k];
    const Eigen::Index real = std::min(frames, u.frames() - offsets[k]);
    for (Eigen::Index t = 0; t < real; ++t) {
      const Eigen::Index col = t * batch + k;
      b.noisy.data.col(col) = u.noisy.row(offsets[k] + t).segment(band.start, width).transpose();
      b.clean.col(col) = u.clean.row(offsets[k] + t).segment(band.start, width).transpose();
      b.mask(col) = true;
    }
    b.real_elements += static_cast<double>(real * width);
  }
  return b;
}

// Masked mean squared error against the clean target, plus alpha times the
// same against the teacher output when one is given.
inline LossValue masked_loss(const Matrix& pred, const ChunkBatch& b, const Matrix* teacher, double alpha) {
  Matrix diff = pred - b.clean;
  for (Eigen::Index c = 0; c < diff.cols(); ++c)
    if (!b.mask(c)) diff.col(c).setZero();
  const double n = b.real_elements;
  LossValue loss{diff.squaredNorm() / n, (2.0 / n) * diff};
  if (teacher) {
    Matrix tdiff = pred - *teacher;
    for (Eigen::Index c = 0; c < tdiff.cols(); ++c)
      if (!b.mask(c)) tdiff.col(c).setZero();
    loss.value += alpha * (tdiff.squaredNorm() / n);
    loss.grad += alpha * ((2.0 / n) * tdiff);
  }
  return loss;
}

// Pooled MSE over the given bands of every utterance, whole utterances,
// equal-length utterances batched together.
inline double evaluate_bands(const ModelParams& p, const std::vector<Utterance>& utts,
                             const std::vector<BandRange>& bands) {
  std::map<Eigen::Index, std::vector<const Utterance*>> by_length;
  for (const auto& u : utts)
    if (u.frames() > 0) by_length[u.frames()].push_back(&u);
  constexpr std::size_t kMaxItems = 256;
  double sum = 0.0, count = 0.0;
  for (const auto& [frames, group] : by_length) {
    std::vector<const Utterance*> items;
    std::vector<BandRange> item_bands;
    auto flush = [&] {
      if (items.empty()) return;
      const std::vector<Eigen::Index> offsets(items.size(), 0);
      const ChunkBatch b = make_batch(items, offsets, item_bands, frames);
      const ForwardCache c = forward_batch(p, b.noisy);
      sum += (c.output - b.clean).squaredNorm();
      count += b.real_elements;
      items.clear();
      item_bands.clear();
    };
    for (const Utterance* u : group)
      for (const BandRange& band : bands) {
        items.push_back(u);
        item_bands.push_back(band);
        if (items.size() >= kMaxItems) flush();
      }
    flush();
  }
  if (count == 0.0) throw DataError("no validation frames");
  return sum / count;
}

struct TrainTarget {
  ModelKind kind;
  std::optional<int> band;  // teachers
};

inline TrainResult train_model(const TrainData& data, const SubbandPartition& part, const NetConfig& net,
                               const TrainConfig& cfg, const StftConfig& stft_cfg, const TrainTarget& target,
                               const DistillConfig* distill) {
  validate(cfg);
  if (data.train.empty()) throw DataError("empty corpus");
  if (net.width != part.band_width)
    throw UsageError("model width " + std::to_string(net.width) + " does not match band width " +
                     std::to_string(part.band_width));
  for (const auto* set : {&data.train, &data.validation})
    for (const auto& u : *set)
      if (u.noisy.cols() != part.total_bins || u.clean.cols() != part.total_bins)
        throw DataError("utterance '" + u.name + "' bin count does not match partition");

  const std::vector<BandRange> eval_bands =
      target.band ? std::vector<BandRange>{part.bands[*target.band]} : part.bands;

  ModelParams params = init_params(net.width, net.hidden, derive_seed(cfg.seed, 0x1417));
  AdamState adam = AdamState::for_params(params);
  AdamHyper hp{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};

  BandSampler sampler(cfg.seed);
  const auto start = std::chrono::steady_clock::now();

  TrainReport report;
  ModelParams best = params;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  int since_lr_change = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = epoch_permutation(data.train.size(), cfg.seed, static_cast<std::uint64_t>(epoch));
    Rng crop_rng(derive_seed(cfg.seed, 0xC809, static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0, loss_weight = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Utterance*> items;
      std::vector<Eigen::Index> offsets;
      Eigen::Index longest = 0;
      for (std::size_t k = begin; k < end; ++k) {
        const Utterance& u = data.train[order[k]];
        const Eigen::Index slack = std::max<Eigen::Index>(0, u.frames() - cfg.chunk_frames);
        items.push_back(&u);
        offsets.push_back(static_cast<Eigen::Index>(crop_rng.index(static_cast<std::size_t>(slack) + 1)));
        longest = std::max(longest, std::min<Eigen::Index>(u.frames(), cfg.chunk_frames));
      }
      if (longest == 0) continue;

      const int band_index =
          target.band ? *target.band : sampler.next(part.band_count());
      const std::vector<BandRange> bands(items.size(), part.bands[band_index]);
      const ChunkBatch batch = make_batch(items, offsets, bands, longest);
      if (batch.real_elements == 0.0) continue;

      const ForwardCache cache = forward_batch(params, batch.noisy);
      LossValue loss;
      if (distill) {
        const Matrix teacher_out = forward_batch(distill->teachers[band_index].params, batch.noisy).output;
        loss = masked_loss(cache.output, batch, &teacher_out, distill->alpha);
      } else {
        loss = masked_loss(cache.output, batch, nullptr, 0.0);
      }
      if (!std::isfinite(loss.value)) throw DivergedError("diverged: non-finite training loss at epoch " + std::to_string(epoch));

      adam_step(params, backward_batch(params, cache, loss.grad), adam, hp);
      loss_sum += loss.value * batch.real_elements;
      loss_weight += batch.real_elements;
    }

    const double val = evaluate_bands(params, data.validation, eval_bands);
    if (!std::isfinite(val)) throw DivergedError("diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back({epoch, loss_weight > 0 ? loss_sum / loss_weight : 0.0, val, hp.lr, elapsed});

    if (val < best_val - cfg.stop_min_delta) {
      best_val = val;
      best = params;
      report.best_epoch = epoch;
      since_best = 0;
      since_lr_change = 0;
    } else {
      ++since_best;
      ++since_lr_change;
    }
    if (since_best >= cfg.stop_patience) {
      report.stop_reason = "early_stop";
      break;
    }
    if (since_lr_change >= cfg.lr_patience) {
      hp.lr *= cfg.lr_reduce_factor;
      since_lr_change = 0;
    }
  }
  if (report.stop_reason.empty()) report.stop_reason = "max_epochs";
  report.best_val_loss = best_val;

  Checkpoint ckpt;
  ckpt.kind = target.kind;
  ckpt.band_index = target.band;
  ckpt.frame_len = stft_cfg.frame_len;
  ckpt.hop = stft_cfg.hop;
  ckpt.params = std::move(best);
  return {std::move(ckpt), std::move(report)};
}

}  // namespace detail

// Trains the teacher for one band on (noisy band slice -> clean band slice).
// The returned checkpoint holds the weights of the best validation epoch.
inline TrainResult train_teacher(const TrainData& data, int band_index, const SubbandPartition& part,
                                 const NetConfig& net, const TrainConfig& cfg, const StftConfig& stft_cfg = {}) {
  check_band(part, band_index);
  return detail::train_model(data, part, net, cfg, stft_cfg, {ModelKind::teacher, band_index}, nullptr);
}

inline void check_teachers(const DistillConfig& distill, const SubbandPartition& part, const NetConfig& student) {
  if (distill.alpha < 0.0) throw UsageError("alpha must be >= 0");
  std::vector<bool> have(part.band_count(), false);
  for (const auto& t : distill.teachers) {
    if (t.kind != ModelKind::teacher || !t.band_index) throw DataError("distillation checkpoint is not a teacher");
    const int b = *t.band_index;
    if (b < 0 || b >= part.band_count()) throw DataError("teacher band " + std::to_string(b) + " out of range");
    if (have[b]) throw DataError("duplicate teacher for band " + std::to_string(b));
    have[b] = true;
    if (t.params.width != student.width)
      throw UsageError("teacher for band " + std::to_string(b) + " has width " + std::to_string(t.params.width) +
                       ", student has " + std::to_string(student.width));
    if (t.params.hidden < student.hidden)
      std::cerr << "warning: teacher for band " << b << " is smaller than the student (h=" << t.params.hidden
                << " < " << student.hidden << ")\n";
  }
  for (int b = 0; b < part.band_count(); ++b)
    if (!have[b]) throw DataError("missing teacher for band " + std::to_string(b));
}

// Trains the general student over all bands, with teacher guidance when
// `distill` is given. Teachers are only evaluated, never modified.
inline TrainResult train_student(const TrainData& data, const SubbandPartition& part, const NetConfig& net,
                                 const TrainConfig& cfg, const std::optional<DistillConfig>& distill,
                                 const StftConfig& stft_cfg = {}) {
  if (!distill) return detail::train_model(data, part, net, cfg, stft_cfg, {ModelKind::student, std::nullopt}, nullptr);

  check_teachers(*distill, part, net);
  DistillConfig ordered;
  ordered.alpha = distill->alpha;
  ordered.teachers.resize(part.band_count());
  for (const auto& t : distill->teachers) ordered.teachers[*t.band_index] = t;
  return detail::train_model(data, part, net, cfg, stft_cfg, {ModelKind::student, std::nullopt}, &ordered);
}

// ---------------------------------------------------------------------------
// Inference

// Applies one model to every band and passes residual bins through.
inline Matrix enhance_magnitude(const ModelParams& p, const Matrix& noisy_magnitude, const SubbandPartition& part) {
  if (p.width != part.band_width) throw UsageError("model width does not match band width");
  if (noisy_magnitude.cols() != part.total_bins) throw ShapeError("magnitude bin count does not match partition");
  const Eigen::Index frames = noisy_magnitude.rows();
  const auto n = static_cast<Eigen::Index>(part.band_count());
  SequenceBatch in{Matrix(p.width, frames * n), frames, n};
  for (Eigen::Index t = 0; t < frames; ++t)
    for (Eigen::Index b = 0; b < n; ++b)
      in.data.col(t * n + b) = noisy_magnitude.row(t).segment(part.bands[b].start, p.width).transpose();
  const Matrix out = forward_batch(p, in).output;

  std::vector<SubbandSlice> slices(n);
  for (Eigen::Index b = 0; b < n; ++b) {
    slices[b].band_index = static_cast<int>(b);
    slices[b].values.resize(frames, p.width);
    for (Eigen::Index t = 0; t < frames; ++t) slices[b].values.row(t) = out.col(t * n + b).transpose();
  }
  return assemble(slices, noisy_magnitude, part);
}

// Per-band models, models[i] handling band i.
inline Matrix enhance_magnitude_ensemble(const std::vector<ModelParams>& models, const Matrix& noisy_magnitude,
                                         const SubbandPartition& part) {
  if (static_cast<int>(models.size()) != part.band_count()) throw UsageError("need one model per band");
  std::vector<SubbandSlice> slices;
  for (int b = 0; b < part.band_count(); ++b) {
    const SubbandSlice in = extract(noisy_magnitude, part, b);
    slices.push_back({b, forward(models[b], in.values)});
  }
  return assemble(slices, noisy_magnitude, part);
}

// stft -> per-band model -> residual passthrough -> noisy-phase istft.
// The input is zero-padded by one hop at the front and up to a whole frame at
// the back so every input sample lies in the fully overlapped region; the
// output is cropped back to the input length. With `bypass` the magnitude is
// left unchanged.
inline Waveform enhance(const Checkpoint& ckpt, const Waveform& noisy, const SubbandPartition& part,
                        const StftConfig& cfg, bool bypass = false) {
  if (ckpt.frame_len != cfg.frame_len || ckpt.hop != cfg.hop)
    throw UsageError("checkpoint was trained with frame_len " + std::to_string(ckpt.frame_len) + "/hop " +
                     std::to_string(ckpt.hop) + ", config has " + std::to_string(cfg.frame_len) + "/" +
                     std::to_string(cfg.hop));
  if (part.total_bins != cfg.bins()) throw UsageError("partition bin count does not match stft config");
  if (ckpt.params.width != part.band_width)
    throw UsageError("checkpoint width " + std::to_string(ckpt.params.width) + " does not match band width " +
                     std::to_string(part.band_width));
  if (noisy.size() == 0) throw DataError("input too short");

  const std::size_t hop = static_cast<std::size_t>(cfg.hop);
  const std::size_t frames = (noisy.size() + hop - 1) / hop + 1;
  std::vector<double> padded((frames - 1) * hop + static_cast<std::size_t>(cfg.frame_len), 0.0);
  std::copy(noisy.samples.begin(), noisy.samples.end(), padded.begin() + static_cast<std::ptrdiff_t>(hop));

  const Spectrogram spec = stft(Waveform{std::move(padded)}, cfg);
  const Matrix mag = spec.magnitude();
  const Matrix enhanced = bypass ? mag : enhance_magnitude(ckpt.params, mag, part);
  const Waveform full = recombine(enhanced, spec.phase(), cfg);
  return Waveform{std::vector<double>(full.samples.begin() + static_cast<std::ptrdiff_t>(hop),
                                      full.samples.begin() + static_cast<std::ptrdiff_t>(hop + noisy.size()))};
}

// ---------------------------------------------------------------------------
// Reports

inline void write_report_jsonl(const std::filesystem::path& path, const TrainReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path.string());
  for (std::size_t i = 0; i < report.epochs.size(); ++i) {
    const auto& e = report.epochs[i];
    nlohmann::json j{{"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"val_loss", e.val_loss},
                     {"lr", e.lr},
                     {"wall_time_s", e.wall_time_s}};
    if (i + 1 == report.epochs.size()) {
      j["stop_reason"] = report.stop_reason;
      j["best_epoch"] = report.best_epoch;
    }
    out << j.dump() << '\n';
  }
}

}  // namespace sbkd
