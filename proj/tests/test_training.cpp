// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "sbkd/checkpoint.hpp"
#include "sbkd/metrics.hpp"
#include "sbkd/training.hpp"
#include "test_util.hpp"

using namespace sbkd;

namespace {

std::vector<Utterance> toy_utterances(int count, double duration, std::uint64_t seed = 1) {
  std::vector<Utterance> out;
  for (const auto& u : synthesize_toy_corpus(seed, count, duration))
    if (u.split == Split::train) out.push_back(prepare_utterance(u.name, u.mixture.clean, u.mixture.noisy, StftConfig{}));
  return out;
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.lr = 0.005;
  c.batch_size = 8;
  c.chunk_frames = 32;
  c.max_epochs = epochs;
  c.seed = 3;
  return c;
}

// Pooled MSE of the identity mapping over the given bands.
double identity_mse(const std::vector<Utterance>& utts, const std::vector<BandRange>& bands) {
  double ss = 0.0, n = 0.0;
  for (const auto& u : utts)
    for (const auto& b : bands) {
      ss += (u.noisy - u.clean).middleCols(b.start, b.width).squaredNorm();
      n += static_cast<double>(u.frames() * b.width);
    }
  return ss / n;
}

class TinyCorpus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new TrainData(split_validation(toy_utterances(30, 0.5), 0.1, 1));
    part_ = new SubbandPartition(make_partition(161, 40));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete part_;
  }
  static TrainData* data_;
  static SubbandPartition* part_;
};
TrainData* TinyCorpus::data_ = nullptr;
SubbandPartition* TinyCorpus::part_ = nullptr;

}  // namespace

TEST(Mse, Examples) {
  EXPECT_EQ(mse_loss(Eigen::MatrixXd::Ones(3, 4), Eigen::MatrixXd::Ones(3, 4)).value, 0.0);
  EXPECT_EQ(mse_loss(Eigen::MatrixXd::Ones(3, 4), Eigen::MatrixXd::Zero(3, 4)).value, 1.0);
  EXPECT_THROW(mse_loss(Eigen::MatrixXd::Ones(3, 4), Eigen::MatrixXd::Ones(4, 3)), ShapeError);
}

TEST(Mse, GradientMatchesFiniteDifferences) {
  const Eigen::MatrixXd p = test::random_matrix(3, 4, 1);
  const Eigen::MatrixXd t = test::random_matrix(3, 4, 2);
  const Eigen::MatrixXd g = mse_loss(p, t).grad;
  const double eps = 1e-6;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    Eigen::MatrixXd a = p, b = p;
    a.data()[k] += eps;
    b.data()[k] -= eps;
    const double numeric = (mse_loss(a, t).value - mse_loss(b, t).value) / (2 * eps);
    EXPECT_NEAR(numeric, g.data()[k], 1e-8);
  }
}

TEST(Distill, Examples) {
  const Eigen::MatrixXd one = Eigen::MatrixXd::Constant(1, 1, 1.0);
  EXPECT_EQ(distill_loss(one, one, one, 0.1).value, 0.0);
  const auto l = distill_loss(one, Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Constant(1, 1, 0.5), 0.1);
  EXPECT_NEAR(l.value, 1.025, 1e-15);
  EXPECT_THROW(distill_loss(one, one, one, -0.1), UsageError);
}

// Property: distill = mse(s, c) + alpha * mse(s, t), and alpha = 0 is plain mse.
TEST(Distill, DecomposesExactly) {
  Rng gen(17);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index r = 1 + gen.index(8), c = 1 + gen.index(8);
    const Eigen::MatrixXd s = test::random_matrix(r, c, 3 * trial), cl = test::random_matrix(r, c, 3 * trial + 1),
                          t = test::random_matrix(r, c, 3 * trial + 2);
    const double alpha = gen.uniform(0.0, 2.0);
    const auto d = distill_loss(s, cl, t, alpha);
    EXPECT_EQ(d.value, mse_loss(s, cl).value + alpha * mse_loss(s, t).value);
    const auto d0 = distill_loss(s, cl, t, 0.0);
    EXPECT_EQ(d0.value, mse_loss(s, cl).value);
    EXPECT_TRUE(d0.grad == mse_loss(s, cl).grad);
  }
}

TEST(BandSampler, UniformWithinThreeSigma) {
  for (std::uint64_t seed : {0u, 1u, 42u}) {
    BandSampler s(seed);
    const int n = 4, draws = 10000;
    std::vector<int> counts(n, 0);
    for (int i = 0; i < draws; ++i) ++counts[s.next(n)];
    const double p = 1.0 / n;
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (int c : counts) EXPECT_LT(std::abs(c - draws * p), 3 * sigma);
  }
}

TEST(SplitValidation, SeededTenPercent) {
  const auto utts = toy_utterances(25, 0.25);
  const TrainData a = split_validation(utts, 0.1, 5);
  EXPECT_EQ(a.validation.size(), 2u);
  EXPECT_EQ(a.train.size(), 18u);
  const TrainData b = split_validation(utts, 0.1, 5);
  EXPECT_EQ(a.validation[0].name, b.validation[0].name);
  const TrainData single = split_validation({utts[0]}, 0.1, 5);
  EXPECT_EQ(single.train.size(), 1u);
  EXPECT_EQ(single.validation.size(), 1u);
}

TEST(Training, ZeroNoiseFixedPoint) {
  const auto utts = toy_utterances(1, 0.5);
  ASSERT_EQ(utts.size(), 1u);
  Utterance u = utts[0];
  u.noisy = u.clean;
  TrainData data{{u}, {u}};
  const auto r = train_teacher(data, 0, make_partition(161, 40), {40, 4}, quick_config(1));
  ASSERT_EQ(r.report.epochs.size(), 1u);
  const ModelParams init = init_params(40, 4, derive_seed(3, 0x1417));
  const double initial = detail::evaluate_bands(init, data.validation, {make_partition(161, 40).bands[0]});
  EXPECT_TRUE(r.report.best_val_loss < initial || (r.report.best_val_loss < 1e-6 && initial < 1e-6));
}

TEST_F(TinyCorpus, SameSeedGivesIdenticalCheckpointBytes) {
  const auto a = train_student(*data_, *part_, {40, 4}, quick_config(3), std::nullopt);
  const auto b = train_student(*data_, *part_, {40, 4}, quick_config(3), std::nullopt);
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
  TrainConfig other = quick_config(3);
  other.seed = 4;
  const auto c = train_student(*data_, *part_, {40, 4}, other, std::nullopt);
  EXPECT_NE(serialize_checkpoint(a.checkpoint), serialize_checkpoint(c.checkpoint));
}

TEST_F(TinyCorpus, ZeroAlphaMatchesUnguidedBitwise) {
  std::vector<Checkpoint> teachers;
  for (int b = 0; b < 4; ++b) teachers.push_back(train_teacher(*data_, b, *part_, {40, 4}, quick_config(1)).checkpoint);
  const auto plain = train_student(*data_, *part_, {40, 4}, quick_config(3), std::nullopt);
  const auto zero = train_student(*data_, *part_, {40, 4}, quick_config(3), DistillConfig{0.0, teachers});
  EXPECT_EQ(serialize_checkpoint(plain.checkpoint), serialize_checkpoint(zero.checkpoint));
  const auto guided = train_student(*data_, *part_, {40, 4}, quick_config(3), DistillConfig{0.5, teachers});
  EXPECT_NE(serialize_checkpoint(plain.checkpoint), serialize_checkpoint(guided.checkpoint));
}

TEST_F(TinyCorpus, TeachersAreNotModified) {
  std::vector<Checkpoint> teachers;
  for (int b = 0; b < 4; ++b) teachers.push_back(train_teacher(*data_, b, *part_, {40, 4}, quick_config(1)).checkpoint);
  std::vector<std::string> before;
  for (const auto& t : teachers) before.push_back(serialize_checkpoint(t));
  train_student(*data_, *part_, {40, 4}, quick_config(2), DistillConfig{0.1, teachers});
  for (std::size_t b = 0; b < teachers.size(); ++b) EXPECT_EQ(serialize_checkpoint(teachers[b]), before[b]);
}

TEST_F(TinyCorpus, MissingOrMismatchedTeachers) {
  std::vector<Checkpoint> teachers;
  for (int b = 0; b < 4; ++b) {
    Checkpoint c;
    c.kind = ModelKind::teacher;
    c.band_index = b;
    c.params = init_params(40, 4, b);
    teachers.push_back(c);
  }
  auto missing = teachers;
  missing.erase(missing.begin() + 2);
  try {
    train_student(*data_, *part_, {40, 4}, quick_config(1), DistillConfig{0.1, missing});
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("band 2"), std::string::npos) << e.what();
  }
  auto wrong = teachers;
  wrong[1].params = init_params(20, 4, 1);
  EXPECT_THROW(train_student(*data_, *part_, {40, 4}, quick_config(1), DistillConfig{0.1, wrong}), UsageError);
}

// Properties of the schedule: lr never increases and only drops by the
// reduction factor; early stopping waits stop_patience epochs.
TEST_F(TinyCorpus, ScheduleAndEarlyStopping) {
  TrainConfig c = quick_config(60);
  c.lr = 0.05;  // large enough to plateau quickly
  c.lr_patience = 2;
  c.stop_patience = 4;
  const auto r = train_student(*data_, *part_, {40, 3}, c, std::nullopt);
  const auto& e = r.report.epochs;
  for (std::size_t i = 1; i < e.size(); ++i) {
    EXPECT_LE(e[i].lr, e[i - 1].lr);
    if (e[i].lr != e[i - 1].lr) {
      EXPECT_DOUBLE_EQ(e[i].lr, e[i - 1].lr * 0.5);
    }
  }
  if (r.report.stop_reason == "early_stop") {
    const int last = e.back().epoch;
    EXPECT_EQ(last - r.report.best_epoch, c.stop_patience);
    for (int k = r.report.best_epoch; k < last; ++k) EXPECT_GT(e[k].val_loss, r.report.best_val_loss - c.stop_min_delta);
  } else {
    EXPECT_EQ(r.report.stop_reason, "max_epochs");
  }
  double best = INFINITY;
  for (const auto& rec : e) best = std::min(best, rec.val_loss);
  EXPECT_DOUBLE_EQ(best, r.report.best_val_loss);
  // The checkpoint holds the best epoch's weights.
  EXPECT_DOUBLE_EQ(detail::evaluate_bands(r.checkpoint.params, data_->validation, part_->bands), r.report.best_val_loss);
}

TEST_F(TinyCorpus, ReportJsonl) {
  const auto r = train_student(*data_, *part_, {40, 3}, quick_config(2), std::nullopt);
  const auto dir = test::scratch_dir("report");
  write_report_jsonl(dir / "r.jsonl", r.report);
  std::ifstream in(dir / "r.jsonl");
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["epoch"], 1);
  EXPECT_TRUE(rows[0].contains("train_loss") && rows[0].contains("val_loss") && rows[0].contains("lr"));
  EXPECT_EQ(rows[1]["stop_reason"], "max_epochs");
}

TEST_F(TinyCorpus, WidthMismatchIsUsageError) {
  EXPECT_THROW(train_student(*data_, *part_, {20, 4}, quick_config(1), std::nullopt), UsageError);
  TrainConfig bad = quick_config(1);
  bad.batch_size = 0;
  EXPECT_THROW(train_student(*data_, *part_, {40, 4}, bad, std::nullopt), UsageError);
}

TEST(Enhance, BypassReproducesInput) {
  Checkpoint c;
  c.params = init_params(40, 3, 1);
  for (std::size_t n : {400u, 8000u, 8123u}) {
    const Waveform x = test::random_wave(n, n);
    const Waveform y = enhance(c, x, make_partition(161, 40), StftConfig{}, true);
    ASSERT_EQ(y.size(), n);
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(y.samples[i], x.samples[i], 1e-6);
  }
}

TEST(Enhance, ZeroModelLeavesOnlyResidualBin) {
  Checkpoint c;
  c.params = ModelParams::zeros(40, 3);
  const Waveform x = test::random_wave(8000, 3);
  const Waveform y = enhance(c, x, make_partition(161, 40), StftConfig{});
  ASSERT_EQ(y.size(), x.size());
  // Only the Nyquist bin survives: a tiny fraction of white-noise energy.
  EXPECT_LT(mean_power(y.samples), 0.02 * mean_power(x.samples));
}

TEST(Enhance, RejectsGeometryMismatch) {
  Checkpoint c;
  c.params = init_params(40, 3, 1);
  c.frame_len = 512;
  c.hop = 256;
  EXPECT_THROW(enhance(c, test::random_wave(4000, 1), make_partition(161, 40), StftConfig{}), UsageError);
  Checkpoint d;
  d.params = init_params(20, 3, 1);
  EXPECT_THROW(enhance(d, test::random_wave(4000, 1), make_partition(161, 40), StftConfig{}), UsageError);
}

TEST(Enhance, BatchedBandsMatchPerBandEvaluation) {
  const ModelParams p = init_params(40, 3, 7);
  const SubbandPartition part = make_partition(161, 40);
  const Eigen::MatrixXd mag = test::random_matrix(20, 161, 8, 0.0, 2.0);
  const Eigen::MatrixXd batched = enhance_magnitude(p, mag, part);
  const Eigen::MatrixXd per_band = enhance_magnitude_ensemble({p, p, p, p}, mag, part);
  EXPECT_LT((batched - per_band).cwiseAbs().maxCoeff(), 1e-13);
}

// A teacher trained on a small tone-plus-noise corpus beats the identity
// mapping, and a student improves SI-SDR on a 0 dB mixture.
TEST(Training, LearnsBetterThanIdentity) {
  const TrainData data = split_validation(toy_utterances(60, 1.0, 5), 0.1, 2);
  const SubbandPartition part = make_partition(161, 40);
  TrainConfig c = quick_config(30);
  c.batch_size = 10;
  c.chunk_frames = 64;
  const auto teacher = train_teacher(data, 0, part, {40, 32}, c);
  EXPECT_LT(teacher.report.best_val_loss, identity_mse(data.validation, {part.bands[0]}));

  const auto student = train_student(data, part, {40, 16}, c, std::nullopt);
  EXPECT_LT(student.report.best_val_loss, identity_mse(data.validation, part.bands));

  Rng rng(11);
  Rng src(12);
  const Waveform clean = synth_speech_like(src, 16000);
  const Waveform noise = synth_noise(src, NoiseKind::white, 20000);
  const MixtureSample m = mix_at_snr(clean, noise, 0.0, rng);
  const Waveform y = enhance(student.checkpoint, m.noisy, part, StftConfig{});
  EXPECT_GT(si_sdr(clean, y), si_sdr(clean, m.noisy));
}
