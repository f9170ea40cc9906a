// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sbkd/data.hpp"
#include "sbkd/network.hpp"
#include "sbkd/spectral.hpp"

namespace sbkd::test {

inline Waveform random_wave(std::size_t n, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  std::vector<double> s(n);
  for (auto& v : s) v = scale * rng.normal();
  return Waveform{std::move(s)};
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double lo = -1.0,
                                     double hi = 1.0) {
  Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(lo, hi);
  return m;
}

// Relative L2 error over [begin, end).
inline double rel_err(const std::vector<double>& ref, const std::vector<double>& got, std::size_t begin,
                      std::size_t end) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    num += (ref[i] - got[i]) * (ref[i] - got[i]);
    den += ref[i] * ref[i];
  }
  return std::sqrt(num / den);
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sbkd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Max relative error between analytic and central-difference gradients of
// L = sum(upstream .* forward(p, x)) over every parameter.
inline double gradient_check_error(int width, int hidden, Eigen::Index frames, std::uint64_t seed,
                                   double eps = 1e-4) {
  ModelParams p = init_params(width, hidden, seed);
  // Shift the output bias so ReLU is active for most units; kinks at 0 would
  // break central differences.
  p.b_out.array() += 0.5;
  const Eigen::MatrixXd x = random_matrix(frames, width, seed + 1, 0.0, 1.0);
  const Eigen::MatrixXd up = random_matrix(frames, width, seed + 2);
  const ModelParams g = backward(p, x, up);

  auto objective = [&](const ModelParams& q) { return (up.array() * forward(q, x).array()).sum(); };
  const auto ps = arrays(p);
  const auto gs = arrays(g);
  double worst = 0.0;
  for (std::size_t a = 0; a < kArrayCount; ++a)
    for (Eigen::Index k = 0; k < ps[a]->size(); ++k) {
      const double orig = ps[a]->data()[k];
      ps[a]->data()[k] = orig + eps;
      const double lp = objective(p);
      ps[a]->data()[k] = orig - eps;
      const double lm = objective(p);
      ps[a]->data()[k] = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double analytic = gs[a]->data()[k];
      const double err = std::abs(numeric - analytic) / std::max(1e-3, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, err);
    }
  return worst;
}

}  // namespace sbkd::test
