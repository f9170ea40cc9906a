// SPDX-License-Identifier: Apache-2.0
//
// sbkd: sub-band knowledge-distillation speech enhancement.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical divergence.

#include <iostream>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "sbkd/commands.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;

// Flags that override config-file values. Unset flags leave the file (or
// built-in default) value in place.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> frame_len, band_width, hidden, teacher_hidden, batch_size, epochs, chunk_frames;
  std::optional<double> lr, alpha;
  std::optional<std::string> corpus_dir, checkpoint_dir, report_dir, teacher_dir;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--seed", seed, "RNG seed");
    app->add_option("--frame-len", frame_len, "STFT frame length (hop is half)");
    app->add_option("--band-width", band_width, "sub-band width in bins");
    app->add_option("--hidden", hidden, "LSTM cells per layer");
    app->add_option("--teacher-hidden", teacher_hidden, "LSTM cells per layer for teachers");
    app->add_option("--batch-size", batch_size, "chunks per optimizer step");
    app->add_option("--epochs", epochs, "maximum epochs");
    app->add_option("--chunk-frames", chunk_frames, "frames per training chunk");
    app->add_option("--lr", lr, "initial learning rate");
    app->add_option("--alpha", alpha, "distillation weight");
    app->add_option("--corpus-dir", corpus_dir);
    app->add_option("--checkpoint-dir", checkpoint_dir);
    app->add_option("--report-dir", report_dir);
    app->add_option("--teacher-dir", teacher_dir);
  }

  sbkd::RunConfig resolve() const {
    sbkd::RunConfig c = config.empty() ? sbkd::RunConfig{} : sbkd::load_run_config(config);
    if (seed) c.seed = *seed;
    if (frame_len) {
      c.frame_len = *frame_len;
      c.hop = *frame_len / 2;
    }
    if (band_width) c.band_width = *band_width;
    if (hidden) c.hidden_size = *hidden;
    if (teacher_hidden) c.teacher_hidden_size = *teacher_hidden;
    if (batch_size) c.train.batch_size = *batch_size;
    if (epochs) c.train.max_epochs = *epochs;
    if (chunk_frames) c.train.chunk_frames = *chunk_frames;
    if (lr) c.train.lr = *lr;
    if (alpha) c.alpha = *alpha;
    if (corpus_dir) c.corpus_dir = *corpus_dir;
    if (checkpoint_dir) c.checkpoint_dir = *checkpoint_dir;
    if (report_dir) c.report_dir = *report_dir;
    if (teacher_dir) c.teacher_dir = *teacher_dir;
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep freed training buffers on the heap between steps.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Sub-band knowledge-distillation speech enhancement"};
  app.require_subcommand(1);

  Overrides ov;

  int count = 0;
  double duration = 1.0;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic toy corpus");
  gen->add_option("--count", count, "number of utterances")->required();
  gen->add_option("--duration", duration, "seconds per utterance");
  gen->add_option("--out", ov.corpus_dir, "output directory (overrides corpus_dir)");

  int band = -1;
  std::optional<std::string> output;
  auto* teacher = app.add_subcommand("train-teacher", "train the teacher for one band");
  teacher->add_option("--band", band, "band index")->required();
  teacher->add_option("--output", output, "checkpoint path");

  bool distill = false;
  auto* student = app.add_subcommand("train-student", "train the general student");
  student->add_flag("--distill", distill, "guide with per-band teachers");
  student->add_option("--output", output, "checkpoint path");

  std::string checkpoint, in_path, out_path;
  bool bypass = false;
  auto* enh = app.add_subcommand("enhance", "enhance a noisy WAV file");
  enh->add_option("--checkpoint", checkpoint)->required();
  enh->add_option("--in", in_path)->required();
  enh->add_option("--out", out_path)->required();
  enh->add_flag("--bypass", bypass, "skip the model (STFT round trip only)");

  std::string clean_dir, test_dir;
  std::optional<std::string> pesq;
  auto* eval = app.add_subcommand("evaluate", "score enhanced files against clean references");
  eval->add_option("--clean-dir", clean_dir)->required();
  eval->add_option("--test-dir", test_dir)->required();
  eval->add_option("--pesq", pesq, "CSV of name,pesq computed by an external tool");

  auto* params = app.add_subcommand("param-count", "print the model parameter count");

  for (auto* sub : {gen, teacher, student, enh, eval, params}) ov.add_to(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    const sbkd::RunConfig cfg = ov.resolve();
    if (*gen) return sbkd::cmd_gen_data(cfg, count, duration, std::cout);
    if (*teacher) return sbkd::cmd_train_teacher(cfg, band, std::cout, output);
    if (*student) return sbkd::cmd_train_student(cfg, distill, std::cout, output);
    if (*enh) return sbkd::cmd_enhance(cfg, checkpoint, in_path, out_path, bypass, std::cout);
    if (*eval) {
      sbkd::cmd_evaluate(cfg, clean_dir, test_dir, std::cout, pesq ? std::optional<std::filesystem::path>(*pesq) : std::nullopt);
      return 0;
    }
    if (*params) return sbkd::cmd_param_count(cfg, std::cout);
  } catch (const sbkd::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const sbkd::DivergedError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const sbkd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
