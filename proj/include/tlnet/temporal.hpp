#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "tlnet/lattice_ops.hpp"
#include "tlnet/tensor.hpp"

namespace tlnet {

enum class FusionKind { kNone, kGru, kLstm, kAFlow };

inline std::string_view fusion_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::kNone: return "/";
    case FusionKind::kGru: return "GRU";
    case FusionKind::kLstm: return "LSTM";
    case FusionKind::kAFlow: return "AFlow";
  }
  return "?";
}

inline std::optional<FusionKind> parse_fusion_kind(std::string_view token) {
  if (token == "/" || token == "None") return FusionKind::kNone;
  if (token == "GRU") return FusionKind::kGru;
  if (token == "LSTM") return FusionKind::kLstm;
  if (token == "AFlow") return FusionKind::kAFlow;
  return std::nullopt;
}

/// Hidden state of one fusion site, rows aligned to the shared lattice.
template <class T>
struct TemporalState {
  ad::Tensor<T> hidden;
  ad::Tensor<T> cell;  // LSTM only
  std::size_t vertex_count_at_write = 0;

  bool empty() const { return !hidden.defined(); }
};

/// Zero-pads the previous hidden matrix to the current vertex count.
template <class T>
ad::Tensor<T> align_states(const TemporalState<T>& prev, std::size_t current_vertex_count) {
  if (current_vertex_count < prev.vertex_count_at_write) {
    throw InvariantError("align_states: lattice shrank from " + std::to_string(prev.vertex_count_at_write) + " to " +
                         std::to_string(current_vertex_count) + " vertices");
  }
  if (prev.hidden.rows() != static_cast<Eigen::Index>(prev.vertex_count_at_write)) {
    throw InvariantError("align_states: hidden rows differ from the recorded vertex count");
  }
  return ad::pad_rows(prev.hidden, static_cast<Eigen::Index>(current_vertex_count));
}

template <class T>
ad::Tensor<T> align_cell(const TemporalState<T>& prev, std::size_t current_vertex_count) {
  if (current_vertex_count < prev.vertex_count_at_write) throw InvariantError("align_cell: lattice shrank");
  return ad::pad_rows(prev.cell, static_cast<Eigen::Index>(current_vertex_count));
}

// ---------------------------------------------------------------------------
// GRU:  z = s(W_z[x,h] + b_z), r = s(W_r[x,h] + b_r),
//       n = tanh(W_n[x, r*h] + b_n),  h' = (1-z)*n + z*h
// ---------------------------------------------------------------------------

template <class T>
struct GruParams {
  LinearParams<T> gates;      // 2c -> 2c, columns [z | r]
  LinearParams<T> candidate;  // 2c -> c

  static GruParams init(Eigen::Index channels, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(double(channels));
    GruParams p;
    p.gates = {ad::Tensor<T>::parameter(uniform_init<T>(2 * channels, 2 * channels, bound, rng)),
               ad::Tensor<T>::parameter(Mat<T>::Zero(1, 2 * channels))};
    p.candidate = {ad::Tensor<T>::parameter(uniform_init<T>(2 * channels, channels, bound, rng)),
                   ad::Tensor<T>::parameter(Mat<T>::Zero(1, channels))};
    return p;
  }
  Eigen::Index channels() const { return candidate.out(); }
};

template <class T>
ad::Tensor<T> gru_fuse(const ad::Tensor<T>& h_prev, const ad::Tensor<T>& x, const GruParams<T>& params) {
  if (h_prev.rows() != x.rows() || h_prev.cols() != x.cols()) throw ShapeError("gru_fuse: hidden and input shapes differ");
  if (x.cols() != params.channels()) throw ShapeError("gru_fuse: channel count differs from parameters");
  const Eigen::Index c = x.cols();
  auto zr = ad::sigmoid(params.gates(ad::concat_cols(x, h_prev)));
  auto z = ad::slice_cols(zr, 0, c);
  auto r = ad::slice_cols(zr, c, c);
  auto n = ad::tanh(params.candidate(ad::concat_cols(x, ad::mul(r, h_prev))));
  return ad::add(ad::mul(ad::one_minus(z), n), ad::mul(z, h_prev));
}

// ---------------------------------------------------------------------------
// LSTM: [i f g o] = W[x,h] + b;  c' = s(f)*c + s(i)*tanh(g);  h' = s(o)*tanh(c')
// ---------------------------------------------------------------------------

template <class T>
struct LstmParams {
  LinearParams<T> gates;  // 2c -> 4c, columns [i | f | g | o]

  static LstmParams init(Eigen::Index channels, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(double(channels));
    LstmParams p;
    Mat<T> bias = Mat<T>::Zero(1, 4 * channels);
    bias.middleCols(channels, channels).setConstant(T(1));  // forget bias
    p.gates = {ad::Tensor<T>::parameter(uniform_init<T>(2 * channels, 4 * channels, bound, rng)),
               ad::Tensor<T>::parameter(std::move(bias))};
    return p;
  }
  Eigen::Index channels() const { return gates.out() / 4; }
};

template <class T>
struct LstmOutput {
  ad::Tensor<T> hidden;
  ad::Tensor<T> cell;
};

template <class T>
LstmOutput<T> lstm_fuse(const ad::Tensor<T>& h_prev, const ad::Tensor<T>& c_prev, const ad::Tensor<T>& x,
                        const LstmParams<T>& params) {
  if (h_prev.rows() != x.rows() || h_prev.cols() != x.cols() || c_prev.rows() != x.rows() || c_prev.cols() != x.cols()) {
    throw ShapeError("lstm_fuse: hidden, cell and input shapes differ");
  }
  if (x.cols() != params.channels()) throw ShapeError("lstm_fuse: channel count differs from parameters");
  const Eigen::Index c = x.cols();
  auto pre = params.gates(ad::concat_cols(x, h_prev));
  auto i = ad::sigmoid(ad::slice_cols(pre, 0, c));
  auto f = ad::sigmoid(ad::slice_cols(pre, c, c));
  auto g = ad::tanh(ad::slice_cols(pre, 2 * c, c));
  auto o = ad::sigmoid(ad::slice_cols(pre, 3 * c, c));
  auto cell = ad::add(ad::mul(f, c_prev), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(cell)), cell};
}

// ---------------------------------------------------------------------------
// Abstract Flow
// ---------------------------------------------------------------------------

inline constexpr double kAFlowInit = 0.1;

template <class T>
struct AFlowParams {
  ad::Tensor<T> alpha;
  ad::Tensor<T> beta;
  LinearParams<T> fuse;  // 2c -> c, followed by ReLU

  static AFlowParams init(Eigen::Index channels, std::mt19937_64& rng) {
    AFlowParams p;
    p.alpha = ad::Tensor<T>::parameter(Mat<T>::Constant(1, 1, T(kAFlowInit)));
    p.beta = ad::Tensor<T>::parameter(Mat<T>::Constant(1, 1, T(kAFlowInit)));
    p.fuse = LinearParams<T>::init(2 * channels, channels, rng);
    return p;
  }
  Eigen::Index channels() const { return fuse.out(); }
};

/// L = flow-weighted sum of previous-timestep neighbors, then ReLU(fuse([x, L])).
template <class T>
ad::Tensor<T> aflow_fuse(const ad::Tensor<T>& h_prev, const ad::Tensor<T>& x, const AFlowParams<T>& params,
                         std::shared_ptr<const ad::GatherTable> neighbors) {
  if (h_prev.rows() != x.rows() || h_prev.cols() != x.cols()) throw ShapeError("aflow_fuse: hidden and input shapes differ");
  if (x.cols() != params.channels()) throw ShapeError("aflow_fuse: channel count differs from parameters");
  auto flow = ad::flow_aggregate(x, h_prev, params.alpha, params.beta, std::move(neighbors));
  return ad::relu(params.fuse(ad::concat_cols(x, flow)));
}

/// Direction from each vertex toward its most feature-similar previous-timestep
/// neighbor: centroid(argmin_i |x_v - h_i|) - centroid(v). Zero when no neighbor is present.
template <class T>
Mat<double> aflow_direction(const ad::GatherTable& neighbors, const Mat<T>& h_prev, const Mat<T>& x,
                            const Mat<double>& current_centroids, const Mat<double>& previous_centroids) {
  if (h_prev.rows() != x.rows() || h_prev.cols() != x.cols()) throw ShapeError("aflow_direction: hidden and input shapes differ");
  if (current_centroids.rows() != x.rows()) throw ShapeError("aflow_direction: centroid rows differ from vertex count");
  Mat<double> out = Mat<double>::Zero(x.rows(), current_centroids.cols());
  for (Eigen::Index v = 0; v < x.rows(); ++v) {
    std::int32_t best = kAbsent;
    T best_dist = std::numeric_limits<T>::infinity();
    for (int t = 0; t < neighbors.taps; ++t) {
      const std::int32_t i = neighbors.at(std::size_t(v), t);
      if (i == kAbsent) continue;
      const T dist = (x.row(v) - h_prev.row(i)).norm();
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    if (best != kAbsent) out.row(v) = previous_centroids.row(best) - current_centroids.row(v);
  }
  return out;
}

template <class T>
Mat<double> aflow_direction(const ad::GatherTable& neighbors, const Mat<T>& h_prev, const Mat<T>& x,
                            const Mat<double>& centroids) {
  return aflow_direction(neighbors, h_prev, x, centroids, centroids);
}

}  // namespace tlnet
