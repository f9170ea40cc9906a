// SPDX-License-Identifier: Apache-2.0
//
// Fixed-width partition of the frequency axis into disjoint sub-bands.
// Magnitude planes are frames x bins; a band slice is frames x width.
#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sbkd/error.hpp"

namespace sbkd {

// Half-open bin range [start, start + width).
struct BandRange {
  int start = 0;
  int width = 0;
  int stop() const { return start + width; }
};

struct SubbandPartition {
  int total_bins = 0;
  int band_width = 0;
  std::vector<BandRange> bands;
  std::vector<int> residual_bins;

  int band_count() const { return static_cast<int>(bands.size()); }
  // First bin not covered by a band.
  int covered_bins() const { return band_count() * band_width; }
};

struct SubbandSlice {
  int band_index = 0;
  Eigen::MatrixXd values;
};

inline SubbandPartition make_partition(int total_bins, int band_width) {
  if (total_bins < 1) throw UsageError("invalid bin count");
  if (band_width < 1 || band_width > total_bins) throw UsageError("invalid band width");
  SubbandPartition part;
  part.total_bins = total_bins;
  part.band_width = band_width;
  const int n = total_bins / band_width;
  for (int i = 0; i < n; ++i) part.bands.push_back({i * band_width, band_width});
  for (int f = n * band_width; f < total_bins; ++f) part.residual_bins.push_back(f);
  return part;
}

inline void check_band(const SubbandPartition& part, int band_index) {
  if (band_index < 0 || band_index >= part.band_count())
    throw UsageError("band index " + std::to_string(band_index) + " out of range [0, " +
                     std::to_string(part.band_count()) + ")");
}

inline SubbandSlice extract(const Eigen::MatrixXd& magnitude, const SubbandPartition& part, int band_index) {
  check_band(part, band_index);
  if (magnitude.cols() != part.total_bins)
    throw ShapeError("magnitude has " + std::to_string(magnitude.cols()) + " bins, partition expects " +
                     std::to_string(part.total_bins));
  const BandRange& band = part.bands[band_index];
  return {band_index, magnitude.middleCols(band.start, band.width)};
}

// Writes each slice into its band and copies residual bins from the noisy plane.
inline Eigen::MatrixXd assemble(const std::vector<SubbandSlice>& slices, const Eigen::MatrixXd& noisy_magnitude,
                                const SubbandPartition& part) {
  if (noisy_magnitude.cols() != part.total_bins) throw ShapeError("noisy magnitude bin count mismatch");
  if (static_cast<int>(slices.size()) != part.band_count())
    throw UsageError("expected " + std::to_string(part.band_count()) + " slices, got " +
                     std::to_string(slices.size()));

  std::vector<bool> seen(part.band_count(), false);
  Eigen::MatrixXd out(noisy_magnitude.rows(), noisy_magnitude.cols());
  for (const SubbandSlice& slice : slices) {
    check_band(part, slice.band_index);
    if (seen[slice.band_index])
      throw UsageError("duplicate slice for band " + std::to_string(slice.band_index));
    seen[slice.band_index] = true;
    if (slice.values.rows() != noisy_magnitude.rows() || slice.values.cols() != part.band_width)
      throw ShapeError("slice shape does not match partition");
    const BandRange& band = part.bands[slice.band_index];
    out.middleCols(band.start, band.width) = slice.values;
  }
  for (int f : part.residual_bins) out.col(f) = noisy_magnitude.col(f);
  return out;
}

}  // namespace sbkd
