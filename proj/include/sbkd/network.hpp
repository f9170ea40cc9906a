// SPDX-License-Identifier: Apache-2.0
//
// Sub-band enhancement network: two bidirectional LSTM layers, then a
// per-frame affine map with ReLU output.
//
//   width -> [lstm1 fwd | lstm1 bwd] (2h) -> [lstm2 fwd | lstm2 bwd] (2h) -> width
//
// Gate order in every 4h block is (input, forget, cell candidate, output).
// Each direction carries both an input bias and a recurrent bias.
//
// Batched sequences are stored feature-major: a d x (frames * batch) matrix
// whose column t * batch + b holds frame t of sequence b.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "sbkd/error.hpp"

namespace sbkd {

using Matrix = Eigen::MatrixXd;

struct LstmDirection {
  Matrix w_in;   // 4h x d
  Matrix w_rec;  // 4h x h
  Matrix b_in;   // 4h x 1
  Matrix b_rec;  // 4h x 1
};

struct LstmLayer {
  LstmDirection fwd;
  LstmDirection bwd;
};

struct ModelParams {
  int width = 0;
  int hidden = 0;
  LstmLayer lstm1;  // input width, hidden h
  LstmLayer lstm2;  // input 2h, hidden h
  Matrix w_out;     // width x 2h
  Matrix b_out;     // width x 1

  static ModelParams zeros(int width, int hidden) {
    auto dir = [](int d, int h) {
      return LstmDirection{Matrix::Zero(4 * h, d), Matrix::Zero(4 * h, h), Matrix::Zero(4 * h, 1),
                           Matrix::Zero(4 * h, 1)};
    };
    ModelParams p;
    p.width = width;
    p.hidden = hidden;
    p.lstm1 = {dir(width, hidden), dir(width, hidden)};
    p.lstm2 = {dir(2 * hidden, hidden), dir(2 * hidden, hidden)};
    p.w_out = Matrix::Zero(width, 2 * hidden);
    p.b_out = Matrix::Zero(width, 1);
    return p;
  }
};

inline constexpr std::size_t kArrayCount = 18;

inline constexpr std::array<std::string_view, kArrayCount> kArrayNames = {
    "lstm1.fwd.w_in", "lstm1.fwd.w_rec", "lstm1.fwd.b_in", "lstm1.fwd.b_rec",
    "lstm1.bwd.w_in", "lstm1.bwd.w_rec", "lstm1.bwd.b_in", "lstm1.bwd.b_rec",
    "lstm2.fwd.w_in", "lstm2.fwd.w_rec", "lstm2.fwd.b_in", "lstm2.fwd.b_rec",
    "lstm2.bwd.w_in", "lstm2.bwd.w_rec", "lstm2.bwd.b_in", "lstm2.bwd.b_rec",
    "out.w",          "out.b"};

namespace detail {
template <class P, class M>
auto arrays_of(P& p) {
  return std::array<M*, kArrayCount>{
      &p.lstm1.fwd.w_in, &p.lstm1.fwd.w_rec, &p.lstm1.fwd.b_in, &p.lstm1.fwd.b_rec,
      &p.lstm1.bwd.w_in, &p.lstm1.bwd.w_rec, &p.lstm1.bwd.b_in, &p.lstm1.bwd.b_rec,
      &p.lstm2.fwd.w_in, &p.lstm2.fwd.w_rec, &p.lstm2.fwd.b_in, &p.lstm2.fwd.b_rec,
      &p.lstm2.bwd.w_in, &p.lstm2.bwd.w_rec, &p.lstm2.bwd.b_in, &p.lstm2.bwd.b_rec,
      &p.w_out,          &p.b_out};
}
}  // namespace detail

// All trainable arrays in declaration order (matches kArrayNames).
inline std::array<Matrix*, kArrayCount> arrays(ModelParams& p) { return detail::arrays_of<ModelParams, Matrix>(p); }
inline std::array<const Matrix*, kArrayCount> arrays(const ModelParams& p) {
  return detail::arrays_of<const ModelParams, const Matrix>(p);
}

inline std::int64_t param_count(std::int64_t w, std::int64_t h) {
  const std::int64_t lstm1 = 2 * 4 * (h * (w + h) + 2 * h);
  const std::int64_t lstm2 = 2 * 4 * (h * (2 * h + h) + 2 * h);
  const std::int64_t out = 2 * h * w + w;
  return lstm1 + lstm2 + out;
}

inline std::int64_t param_count(const ModelParams& p) {
  std::int64_t n = 0;
  for (const Matrix* a : arrays(p)) n += a->size();
  return n;
}

// Uniform in [-1/sqrt(h), 1/sqrt(h)] from a 64-bit Mersenne twister. The
// mapping from raw draws to doubles is spelled out so checkpoints do not
// depend on the standard library's distribution implementation.
inline ModelParams init_params(int width, int hidden, std::uint64_t seed) {
  if (width < 1 || hidden < 1) throw UsageError("width and hidden size must be >= 1");
  ModelParams p = ModelParams::zeros(width, hidden);
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Matrix* a : arrays(p))
    for (Eigen::Index k = 0; k < a->size(); ++k) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      a->data()[k] = (2.0 * u - 1.0) * scale;
    }
  return p;
}

// A batch of equal-length sequences in feature-major layout.
struct SequenceBatch {
  Matrix data;  // d x (frames * batch)
  Eigen::Index frames = 0;
  Eigen::Index batch = 0;

  // One sequence given as frames x d.
  static SequenceBatch single(const Matrix& frames_by_dim) {
    return {frames_by_dim.transpose(), frames_by_dim.rows(), 1};
  }
};

struct DirectionCache {
  Matrix gates;  // 4h x TB, post-activation
  Matrix cell;   // h x TB
  Matrix cell_tanh;
  Matrix hidden;
};

struct LayerCache {
  DirectionCache fwd;
  DirectionCache bwd;
  Matrix output;  // 2h x TB
};

struct ForwardCache {
  Eigen::Index frames = 0;
  Eigen::Index batch = 0;
  Matrix input;
  LayerCache lstm1;
  LayerCache lstm2;
  Matrix pre_output;
  Matrix output;  // width x TB
};

namespace detail {

inline auto sigmoid(const Eigen::Ref<const Matrix>& z) {
  return (1.0 + (-z.array()).exp()).inverse().matrix();
}

inline void run_direction(const LstmDirection& p, const Matrix& x, Eigen::Index frames, Eigen::Index batch,
                          bool reverse, DirectionCache& c) {
  const Eigen::Index h = p.w_rec.cols();
  const Eigen::Index cols = frames * batch;
  Matrix z = p.w_in * x;
  z.colwise() += (p.b_in + p.b_rec).col(0);

  c.gates.resize(4 * h, cols);
  c.cell.resize(h, cols);
  c.cell_tanh.resize(h, cols);
  c.hidden.resize(h, cols);

  Matrix h_prev = Matrix::Zero(h, batch);
  Matrix c_prev = Matrix::Zero(h, batch);
  for (Eigen::Index step = 0; step < frames; ++step) {
    const Eigen::Index t = reverse ? frames - 1 - step : step;
    auto zt = z.middleCols(t * batch, batch);
    zt.noalias() += p.w_rec * h_prev;

    auto gates = c.gates.middleCols(t * batch, batch);
    gates.topRows(2 * h) = sigmoid(zt.topRows(2 * h));
    gates.middleRows(2 * h, h) = zt.middleRows(2 * h, h).array().tanh().matrix();
    gates.bottomRows(h) = sigmoid(zt.bottomRows(h));

    auto cell = c.cell.middleCols(t * batch, batch);
    cell = gates.middleRows(h, h).cwiseProduct(c_prev) + gates.topRows(h).cwiseProduct(gates.middleRows(2 * h, h));
    auto ct = c.cell_tanh.middleCols(t * batch, batch);
    ct = cell.array().tanh().matrix();
    auto hid = c.hidden.middleCols(t * batch, batch);
    hid = gates.bottomRows(h).cwiseProduct(ct);

    h_prev = hid;
    c_prev = cell;
  }
}

// Accumulates parameter gradients into `grad`, and input gradients into
// `d_input` when it is non-null.
inline void backprop_direction(const LstmDirection& p, const Matrix& x, const DirectionCache& c,
                               const Eigen::Ref<const Matrix>& d_hidden, Eigen::Index frames, Eigen::Index batch,
                               bool reverse, LstmDirection& grad, Matrix* d_input) {
  const Eigen::Index h = p.w_rec.cols();
  const Eigen::Index cols = frames * batch;
  Matrix dz(4 * h, cols);
  Matrix h_prev_all = Matrix::Zero(h, cols);

  Matrix dh_next = Matrix::Zero(h, batch);
  Matrix dc_next = Matrix::Zero(h, batch);
  const Matrix zeros = Matrix::Zero(h, batch);
  for (Eigen::Index step = frames - 1; step >= 0; --step) {
    const Eigen::Index t = reverse ? frames - 1 - step : step;
    const Eigen::Index col = t * batch;
    const bool has_prev = step > 0;
    const Eigen::Index prev_col = has_prev ? (reverse ? t + 1 : t - 1) * batch : 0;

    const auto gates = c.gates.middleCols(col, batch);
    const auto ig = gates.topRows(h).array();
    const auto fg = gates.middleRows(h, h).array();
    const auto gg = gates.middleRows(2 * h, h).array();
    const auto og = gates.bottomRows(h).array();
    const auto ct = c.cell_tanh.middleCols(col, batch).array();

    const Matrix dh = d_hidden.middleCols(col, batch) + dh_next;
    const Matrix dc = (dh.array() * og * (1.0 - ct.square())).matrix() + dc_next;
    const auto c_prev = has_prev ? c.cell.middleCols(prev_col, batch) : zeros.middleCols(0, batch);

    auto dzt = dz.middleCols(col, batch);
    dzt.topRows(h) = (dc.array() * gg * ig * (1.0 - ig)).matrix();
    dzt.middleRows(h, h) = (dc.array() * c_prev.array() * fg * (1.0 - fg)).matrix();
    dzt.middleRows(2 * h, h) = (dc.array() * ig * (1.0 - gg.square())).matrix();
    dzt.bottomRows(h) = (dh.array() * ct * og * (1.0 - og)).matrix();

    dc_next = dc.cwiseProduct(gates.middleRows(h, h));
    dh_next.noalias() = p.w_rec.transpose() * dzt;
    if (has_prev) h_prev_all.middleCols(col, batch) = c.hidden.middleCols(prev_col, batch);
  }

  grad.w_in.noalias() += dz * x.transpose();
  grad.w_rec.noalias() += dz * h_prev_all.transpose();
  const Matrix db = dz.rowwise().sum();
  grad.b_in += db;
  grad.b_rec += db;
  if (d_input) d_input->noalias() += p.w_in.transpose() * dz;
}

inline void run_layer(const LstmLayer& p, const Matrix& x, Eigen::Index frames, Eigen::Index batch, LayerCache& c) {
  run_direction(p.fwd, x, frames, batch, false, c.fwd);
  run_direction(p.bwd, x, frames, batch, true, c.bwd);
  const Eigen::Index h = p.fwd.w_rec.cols();
  c.output.resize(2 * h, frames * batch);
  c.output.topRows(h) = c.fwd.hidden;
  c.output.bottomRows(h) = c.bwd.hidden;
}

inline void backprop_layer(const LstmLayer& p, const Matrix& x, const LayerCache& c, const Matrix& d_output,
                           Eigen::Index frames, Eigen::Index batch, LstmLayer& grad, Matrix* d_input) {
  const Eigen::Index h = p.fwd.w_rec.cols();
  backprop_direction(p.fwd, x, c.fwd, d_output.topRows(h), frames, batch, false, grad.fwd, d_input);
  backprop_direction(p.bwd, x, c.bwd, d_output.bottomRows(h), frames, batch, true, grad.bwd, d_input);
}

}  // namespace detail

inline ForwardCache forward_batch(const ModelParams& p, const SequenceBatch& x) {
  if (x.data.rows() != p.width)
    throw ShapeError("input width " + std::to_string(x.data.rows()) + " does not match model width " +
                     std::to_string(p.width));
  if (x.data.cols() != x.frames * x.batch) throw ShapeError("sequence batch layout is inconsistent");
  ForwardCache c;
  c.frames = x.frames;
  c.batch = x.batch;
  c.input = x.data;
  detail::run_layer(p.lstm1, c.input, x.frames, x.batch, c.lstm1);
  detail::run_layer(p.lstm2, c.lstm1.output, x.frames, x.batch, c.lstm2);
  c.pre_output = p.w_out * c.lstm2.output;
  c.pre_output.colwise() += p.b_out.col(0);
  c.output = c.pre_output.cwiseMax(0.0);
  return c;
}

// Parameter gradients for an upstream gradient on the batch output
// (width x frames*batch). ReLU passes gradient only where the pre-activation
// is strictly positive.
inline ModelParams backward_batch(const ModelParams& p, const ForwardCache& c, const Matrix& upstream) {
  if (upstream.rows() != c.output.rows() || upstream.cols() != c.output.cols())
    throw ShapeError("upstream gradient shape does not match output");
  ModelParams g = ModelParams::zeros(p.width, p.hidden);

  const Matrix d_pre = (c.pre_output.array() > 0.0).select(upstream, 0.0);
  g.w_out.noalias() = d_pre * c.lstm2.output.transpose();
  g.b_out = d_pre.rowwise().sum();

  Matrix d_lstm2 = p.w_out.transpose() * d_pre;
  Matrix d_lstm1 = Matrix::Zero(2 * p.hidden, c.frames * c.batch);
  detail::backprop_layer(p.lstm2, c.lstm1.output, c.lstm2, d_lstm2, c.frames, c.batch, g.lstm2, &d_lstm1);
  detail::backprop_layer(p.lstm1, c.input, c.lstm1, d_lstm1, c.frames, c.batch, g.lstm1, nullptr);
  return g;
}

// Single sequence, frames x width in and out.
inline Matrix forward(const ModelParams& p, const Matrix& x) {
  if (x.cols() != p.width)
    throw ShapeError("input width " + std::to_string(x.cols()) + " does not match model width " +
                     std::to_string(p.width));
  return forward_batch(p, SequenceBatch::single(x)).output.transpose();
}

inline ModelParams backward(const ModelParams& p, const Matrix& x, const Matrix& upstream) {
  if (x.cols() != p.width) throw ShapeError("input width does not match model width");
  if (upstream.rows() != x.rows() || upstream.cols() != x.cols())
    throw ShapeError("upstream gradient shape does not match input");
  const ForwardCache c = forward_batch(p, SequenceBatch::single(x));
  return backward_batch(p, c, upstream.transpose());
}

struct AdamHyper {
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::int64_t step = 0;

  static AdamState for_params(const ModelParams& p) {
    return {ModelParams::zeros(p.width, p.hidden), ModelParams::zeros(p.width, p.hidden), 0};
  }
};

// Bias-corrected Adam. Parameters are left untouched if any gradient is
// non-finite.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamHyper& hp) {
  if (!(hp.lr > 0.0)) throw UsageError("learning rate must be positive");
  const auto ps = arrays(params);
  const auto gs = arrays(grads);
  const auto ms = arrays(state.m);
  const auto vs = arrays(state.v);
  for (std::size_t k = 0; k < kArrayCount; ++k) {
    if (gs[k]->rows() != ps[k]->rows() || gs[k]->cols() != ps[k]->cols() || ms[k]->size() != ps[k]->size())
      throw ShapeError("gradient shape mismatch in " + std::string(kArrayNames[k]));
    if (!gs[k]->allFinite()) throw DivergedError("diverged");
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < kArrayCount; ++k) {
    auto g = gs[k]->array();
    auto m = ms[k]->array();
    auto v = vs[k]->array();
    m = hp.beta1 * m + (1.0 - hp.beta1) * g;
    v = hp.beta2 * v + (1.0 - hp.beta2) * g.square();
    ps[k]->array() -= hp.lr * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
  }
}

}  // namespace sbkd
