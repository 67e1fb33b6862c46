#pragma once

// Differentiable operators on sparse lattices: distribute, PointNet
// aggregation, convolution, downsample/upsample and DeformSlice.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tlnet/lattice.hpp"
#include "tlnet/point_cloud.hpp"
#include "tlnet/tensor.hpp"

namespace tlnet {

using ActiveMask = std::vector<std::uint8_t>;

/// Result of splatting one cloud onto a lattice.
///
/// Record r belongs to point r / (d+1) and simplex slot r % (d+1). Its data
/// row is (point - vertex position, in sigma-scaled input space) followed by
/// the point features.
struct Distribution {
  int dim = 3;
  std::size_t points = 0;
  std::size_t lattice_size = 0;
  std::vector<std::int32_t> footprint_index;  // points * (d+1)
  std::vector<double> footprint_weight;       // points * (d+1)
  std::vector<std::int32_t> record_vertex;    // points * (d+1)
  Mat<double> records;
  ActiveMask active;       // vertices touched by this cloud
  Mat<double> centroids;   // mean scaled position of contributing points per vertex (zero if untouched)

  int corners() const { return dim + 1; }

  /// Record ids per vertex (the vertex bags).
  std::vector<std::vector<std::int32_t>> bags() const {
    std::vector<std::vector<std::int32_t>> out(lattice_size);
    for (std::size_t r = 0; r < record_vertex.size(); ++r) {
      out[std::size_t(record_vertex[r])].push_back(static_cast<std::int32_t>(r));
    }
    return out;
  }
};

/// Splats `cloud` (already in the common frame and sigma-scaled) onto
/// `lattice`, appending unknown vertices at the end.
inline Distribution distribute(const PointCloud& cloud, SparseLattice& lattice) {
  const int d = lattice.dim();
  if (cloud.size() > 0 && cloud.dim() != d) throw ShapeError("distribute: cloud dimension differs from lattice");
  const int n = d + 1;
  const int fd = cloud.feature_dim();
  Distribution dist;
  dist.dim = d;
  dist.points = cloud.size();
  dist.footprint_index.resize(dist.points * std::size_t(n));
  dist.footprint_weight.resize(dist.points * std::size_t(n));
  dist.record_vertex.resize(dist.points * std::size_t(n));
  dist.records.resize(Eigen::Index(dist.points) * n, d + fd);

  std::vector<Eigen::VectorXd> vertex_pos_cache;
  for (std::size_t p = 0; p < dist.points; ++p) {
    Eigen::VectorXd pos = cloud.positions.row(Eigen::Index(p)).transpose();
    const Eigen::VectorXd e = elevate_scaled(std::span<const double>(pos.data(), std::size_t(d)));
    const SimplexCorners corners = enclosing_simplex(std::span<const double>(e.data(), std::size_t(n)));
    for (int r = 0; r < n; ++r) {
      const std::int32_t v = lattice.lookup_or_insert(corners.keys[r]);
      if (std::size_t(v) >= vertex_pos_cache.size()) vertex_pos_cache.resize(std::size_t(v) + 1);
      if (vertex_pos_cache[std::size_t(v)].size() == 0) vertex_pos_cache[std::size_t(v)] = key_position(corners.keys[r]);
      const std::size_t slot = p * std::size_t(n) + std::size_t(r);
      dist.footprint_index[slot] = v;
      dist.footprint_weight[slot] = corners.weights[r];
      dist.record_vertex[slot] = v;
      dist.records.block(Eigen::Index(slot), 0, 1, d) = (pos - vertex_pos_cache[std::size_t(v)]).transpose();
      if (fd > 0) dist.records.block(Eigen::Index(slot), d, 1, fd) = cloud.features.row(Eigen::Index(p));
    }
  }
  dist.lattice_size = lattice.size();
  dist.active.assign(dist.lattice_size, 0);
  dist.centroids = Mat<double>::Zero(Eigen::Index(dist.lattice_size), d);
  std::vector<int> counts(dist.lattice_size, 0);
  for (std::size_t slot = 0; slot < dist.record_vertex.size(); ++slot) {
    const auto v = std::size_t(dist.record_vertex[slot]);
    dist.active[v] = 1;
    dist.centroids.row(Eigen::Index(v)) += cloud.positions.row(Eigen::Index(slot / std::size_t(n)));
    ++counts[v];
  }
  for (std::size_t v = 0; v < dist.lattice_size; ++v) {
    if (counts[v] > 0) dist.centroids.row(Eigen::Index(v)) /= double(counts[v]);
  }
  return dist;
}

/// Footprints of a distribution as an interpolation table (point -> corners).
inline std::shared_ptr<ad::InterpTable> slice_table(const Distribution& dist) {
  auto table = std::make_shared<ad::InterpTable>();
  table->out_rows = dist.points;
  table->width = dist.corners();
  table->index = dist.footprint_index;
  table->weight = dist.footprint_weight;
  return table;
}

/// Footprints of `cloud` against an existing lattice without inserting.
/// Corners that are not allocated are marked absent and counted in `missing`.
inline std::shared_ptr<ad::InterpTable> slice_table(const PointCloud& cloud, const SparseLattice& lattice,
                                                    std::size_t* missing = nullptr) {
  const int d = lattice.dim();
  const int n = d + 1;
  auto table = std::make_shared<ad::InterpTable>();
  table->out_rows = cloud.size();
  table->width = n;
  std::size_t absent = 0;
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    Eigen::VectorXd pos = cloud.positions.row(Eigen::Index(p)).transpose();
    const Eigen::VectorXd e = elevate_scaled(std::span<const double>(pos.data(), std::size_t(d)));
    const SimplexFootprint fp = lattice.find_enclosing_simplex(std::span<const double>(e.data(), std::size_t(n)));
    for (int r = 0; r < n; ++r) {
      table->index.push_back(fp.vertex_indices[r]);
      table->weight.push_back(fp.barycentric[r]);
      if (fp.vertex_indices[r] == kAbsent) ++absent;
    }
  }
  if (missing) *missing = absent;
  return table;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
Mat<T> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(u(rng));
  return m;
}

template <class T>
struct LinearParams {
  ad::Tensor<T> weight;  // in x out
  ad::Tensor<T> bias;    // 1 x out

  static LinearParams init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / double(std::max<Eigen::Index>(in, 1)));
    return {ad::Tensor<T>::parameter(uniform_init<T>(in, out, bound, rng)),
            ad::Tensor<T>::parameter(Mat<T>::Zero(1, out))};
  }
  static LinearParams zeros(Eigen::Index in, Eigen::Index out) {
    return {ad::Tensor<T>::parameter(Mat<T>::Zero(in, out)), ad::Tensor<T>::parameter(Mat<T>::Zero(1, out))};
  }

  Eigen::Index in() const { return weight.rows(); }
  Eigen::Index out() const { return weight.cols(); }
  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const {
    if (x.cols() != weight.rows()) {
      throw ShapeError("linear: input has " + std::to_string(x.cols()) + " channels, weight expects " +
                       std::to_string(weight.rows()));
    }
    return ad::linear(x, weight, bias);
  }
};

/// Taps: 0 is the center vertex, 1 + j is neighbor slot j (axis j/2, sign + for even j).
inline int conv_taps(int d) { return 1 + neighbor_count(d); }

template <class T>
struct ConvParams {
  ad::Tensor<T> weight;  // (taps * cin) x cout
  ad::Tensor<T> bias;    // 1 x cout
  int taps = 9;

  static ConvParams init(int taps, Eigen::Index cin, Eigen::Index cout, std::mt19937_64& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / double(taps * cin));
    return {ad::Tensor<T>::parameter(uniform_init<T>(taps * cin, cout, bound, rng)),
            ad::Tensor<T>::parameter(Mat<T>::Zero(1, cout)), taps};
  }

  Eigen::Index in_channels() const { return weight.rows() / taps; }
  Eigen::Index out_channels() const { return weight.cols(); }
};

// ---------------------------------------------------------------------------
// Gather tables
// ---------------------------------------------------------------------------

inline bool is_active(const ActiveMask* mask, std::int32_t row) {
  return row != kAbsent && (mask == nullptr || (*mask)[std::size_t(row)] != 0);
}

/// Convolution neighborhood over one lattice. Inactive vertices are treated as
/// missing neighbors and produce zero output rows.
inline std::shared_ptr<ad::GatherTable> conv_table(const SparseLattice& lattice, const ActiveMask* active = nullptr) {
  const int taps = conv_taps(lattice.dim());
  auto table = std::make_shared<ad::GatherTable>();
  table->out_rows = lattice.size();
  table->taps = taps;
  table->index.assign(lattice.size() * std::size_t(taps), kAbsent);
  table->active.assign(lattice.size(), 1);
  for (std::size_t v = 0; v < lattice.size(); ++v) {
    if (!is_active(active, std::int32_t(v))) {
      table->active[v] = 0;
      continue;
    }
    table->index[v * std::size_t(taps)] = std::int32_t(v);
    for (int j = 0; j + 1 < taps; ++j) {
      const std::int32_t nb = lattice.neighbor_row(v, j);
      if (is_active(active, nb)) table->index[v * std::size_t(taps) + std::size_t(j + 1)] = nb;
    }
  }
  return table;
}

/// One-hop neighbors of every vertex of `current` that were allocated in the
/// previous timestep's lattice (row index < previous_count).
inline std::shared_ptr<ad::GatherTable> flow_neighbor_table(const SparseLattice& current, std::size_t previous_count) {
  const int slots = neighbor_count(current.dim());
  auto table = std::make_shared<ad::GatherTable>();
  table->out_rows = current.size();
  table->taps = slots;
  table->index.assign(current.size() * std::size_t(slots), kAbsent);
  table->active.assign(current.size(), 1);
  for (std::size_t v = 0; v < current.size(); ++v) {
    for (int j = 0; j < slots; ++j) {
      const std::int32_t nb = current.neighbor_row(v, j);
      if (nb != kAbsent && std::size_t(nb) < previous_count) table->index[v * std::size_t(slots) + std::size_t(j)] = nb;
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// Shared linear embedding of every bag record followed by an elementwise max per vertex.
template <class T>
ad::Tensor<T> pointnet_aggregate(const Distribution& dist, const LinearParams<T>& params) {
  auto records = ad::Tensor<T>::constant(dist.records.template cast<T>());
  auto segments = std::make_shared<const std::vector<std::int32_t>>(dist.record_vertex);
  return ad::segment_max(params(records), segments, dist.lattice_size);
}

template <class T>
ad::Tensor<T> lattice_convolution(const ad::Tensor<T>& x, const ConvParams<T>& params,
                                  std::shared_ptr<const ad::GatherTable> table, bool preactivate = true) {
  if (params.taps != table->taps) throw ShapeError("lattice conv: tap count differs from the neighbor table");
  if (x.cols() != params.in_channels()) {
    throw ShapeError("lattice conv: input has " + std::to_string(x.cols()) + " channels, weights expect " +
                     std::to_string(params.in_channels()));
  }
  if (x.rows() != static_cast<Eigen::Index>(table->out_rows)) throw ShapeError("lattice conv: row count differs from lattice");
  return ad::gather_conv(x, params.weight, params.bias, std::move(table), preactivate);
}

template <class T>
struct ResnetParams {
  ConvParams<T> conv1, conv2;

  static ResnetParams init(int taps, Eigen::Index channels, std::mt19937_64& rng) {
    return {ConvParams<T>::init(taps, channels, channels, rng), ConvParams<T>::init(taps, channels, channels, rng, 0.5)};
  }
};

/// x + Conv(ReLU(Conv(ReLU(x)))).
template <class T>
ad::Tensor<T> resnet_block(const ad::Tensor<T>& x, const ResnetParams<T>& params,
                           std::shared_ptr<const ad::GatherTable> table) {
  if (params.conv1.in_channels() != x.cols() || params.conv2.out_channels() != x.cols()) {
    throw ShapeError("resnet block: input and output channels must match");
  }
  auto inner = lattice_convolution(x, params.conv1, table, true);
  return ad::add(x, lattice_convolution(inner, params.conv2, table, true));
}

// ---------------------------------------------------------------------------
// Coarsening
//
// A fine key k corresponds to the elevated point k/2 of the coarse lattice.
// Its coarse key is the corner of the coarse simplex enclosing k/2 nearest to
// k/2 in the hyperplane (ties: lexicographically smallest key). The map is
// many-to-one, so a coarse lattice never has more vertices than its fine one.
// ---------------------------------------------------------------------------

inline LatticeKey coarse_key_of(const LatticeKey& fine) {
  const int n = fine.size();
  std::array<double, kMaxLatticeDim + 1> half{};
  for (int i = 0; i < n; ++i) half[i] = 0.5 * fine[i];
  const SimplexCorners corners = enclosing_simplex(std::span<const double>(half.data(), std::size_t(n)));
  int best = -1;
  double best_d2 = 0.0;
  for (int r = 0; r < corners.count; ++r) {
    double d2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double diff = corners.keys[r][i] - half[i];
      d2 += diff * diff;
    }
    if (best < 0 || d2 < best_d2 - 1e-9 || (std::abs(d2 - best_d2) <= 1e-9 && corners.keys[r] < corners.keys[best])) {
      best = r;
      best_d2 = d2;
    }
  }
  return corners.keys[best];
}

/// Position of coarse key c inside the fine lattice: 2c.
inline LatticeKey fine_center_of(const LatticeKey& coarse) {
  LatticeKey out = coarse;
  for (int i = 0; i < out.size(); ++i) out[i] *= 2;
  return out;
}

/// Inserts coarse keys for every fine row not yet mapped (append-only on both sides).
inline void extend_coarse(const SparseLattice& fine, SparseLattice& coarse, std::vector<std::int32_t>& fine_to_coarse) {
  if (fine_to_coarse.size() > fine.size()) throw InvariantError("coarse map covers more rows than the fine lattice has");
  for (std::size_t r = fine_to_coarse.size(); r < fine.size(); ++r) {
    fine_to_coarse.push_back(coarse.lookup_or_insert(coarse_key_of(fine.key(r))));
  }
}

inline SparseLattice downsample_keys(const SparseLattice& fine, std::vector<std::int32_t>* fine_to_coarse = nullptr) {
  std::vector<double> sigma(fine.sigma().begin(), fine.sigma().end());
  for (double& s : sigma) s *= 2.0;
  SparseLattice coarse(fine.dim(), std::move(sigma));
  std::vector<std::int32_t> map;
  extend_coarse(fine, coarse, map);
  if (fine_to_coarse) *fine_to_coarse = std::move(map);
  return coarse;
}

/// Activity of coarse vertices: those receiving an active fine vertex.
inline ActiveMask coarse_active(const std::vector<std::int32_t>& fine_to_coarse, const ActiveMask& fine_active,
                                std::size_t coarse_size) {
  ActiveMask out(coarse_size, 0);
  for (std::size_t r = 0; r < fine_active.size(); ++r) {
    if (fine_active[r]) out[std::size_t(fine_to_coarse[r])] = 1;
  }
  return out;
}

/// Downsample taps for coarse vertex c are the convolution taps centered at 2c in the fine lattice.
inline std::shared_ptr<ad::GatherTable> downsample_table(const SparseLattice& fine, const SparseLattice& coarse,
                                                         const ActiveMask* fine_active = nullptr,
                                                         const ActiveMask* coarse_active_mask = nullptr) {
  const int taps = conv_taps(fine.dim());
  auto table = std::make_shared<ad::GatherTable>();
  table->out_rows = coarse.size();
  table->taps = taps;
  table->index.assign(coarse.size() * std::size_t(taps), kAbsent);
  table->active.assign(coarse.size(), 1);
  for (std::size_t c = 0; c < coarse.size(); ++c) {
    if (!is_active(coarse_active_mask, std::int32_t(c))) {
      table->active[c] = 0;
      continue;
    }
    const LatticeKey center = fine_center_of(coarse.key(c));
    const std::int32_t row = fine.find(center);
    if (is_active(fine_active, row)) table->index[c * std::size_t(taps)] = row;
    for (int j = 0; j + 1 < taps; ++j) {
      const std::int32_t nb = fine.find(neighbor_slot_key(center, j));
      if (is_active(fine_active, nb)) table->index[c * std::size_t(taps) + std::size_t(j + 1)] = nb;
    }
  }
  return table;
}

template <class T>
ad::Tensor<T> downsample(const ad::Tensor<T>& fine_values, const ConvParams<T>& params,
                         std::shared_ptr<const ad::GatherTable> table) {
  if (fine_values.cols() != params.in_channels()) throw ShapeError("downsample: channel mismatch");
  return ad::gather_conv(fine_values, params.weight, params.bias, std::move(table), true);
}

/// For each fine key k: barycentric weights of k/2 in the coarse lattice,
/// renormalized over the corners that are present (and active).
inline std::shared_ptr<ad::InterpTable> upsample_table(const SparseLattice& coarse, const std::vector<LatticeKey>& fine_keys,
                                                       const ActiveMask* coarse_active_mask = nullptr,
                                                       const ActiveMask* fine_active = nullptr) {
  const int n = coarse.dim() + 1;
  auto table = std::make_shared<ad::InterpTable>();
  table->out_rows = fine_keys.size();
  table->width = n;
  table->index.assign(fine_keys.size() * std::size_t(n), kAbsent);
  table->weight.assign(fine_keys.size() * std::size_t(n), 0.0);
  for (std::size_t f = 0; f < fine_keys.size(); ++f) {
    if (!is_active(fine_active, std::int32_t(f))) continue;
    std::array<double, kMaxLatticeDim + 1> half{};
    for (int i = 0; i < n; ++i) half[i] = 0.5 * fine_keys[f][i];
    const SimplexCorners corners = enclosing_simplex(std::span<const double>(half.data(), std::size_t(n)));
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
      const std::int32_t row = coarse.find(corners.keys[r]);
      if (!is_active(coarse_active_mask, row) || corners.weights[r] <= 0.0) continue;
      table->index[f * std::size_t(n) + std::size_t(r)] = row;
      table->weight[f * std::size_t(n) + std::size_t(r)] = corners.weights[r];
      total += corners.weights[r];
    }
    if (total > 1e-12) {
      for (int r = 0; r < n; ++r) table->weight[f * std::size_t(n) + std::size_t(r)] /= total;
    } else {
      const std::int32_t row = coarse.find(coarse_key_of(fine_keys[f]));
      if (is_active(coarse_active_mask, row)) {
        table->index[f * std::size_t(n)] = row;
        table->weight[f * std::size_t(n)] = 1.0;
      }
    }
  }
  return table;
}

template <class T>
ad::Tensor<T> upsample(const ad::Tensor<T>& coarse_values, std::shared_ptr<const ad::InterpTable> table) {
  return ad::weighted_gather(coarse_values, std::move(table), ad::Tensor<T>());
}

/// Plain barycentric slicing of vertex values back onto points.
template <class T>
ad::Tensor<T> slice(const ad::Tensor<T>& values, std::shared_ptr<const ad::InterpTable> table) {
  return ad::weighted_gather(values, std::move(table), ad::Tensor<T>());
}

/// Offset network for DeformSlice: (d+1)*c corner values -> hidden -> d+1 weight offsets.
template <class T>
struct DeformSliceParams {
  LinearParams<T> hidden;
  LinearParams<T> offsets;

  static DeformSliceParams init(int corners, Eigen::Index channels, Eigen::Index hidden_width, std::mt19937_64& rng) {
    auto h = LinearParams<T>::init(corners * channels, hidden_width, rng);
    auto o = LinearParams<T>::init(hidden_width, corners, rng, 0.01);
    return {std::move(h), std::move(o)};
  }
};

template <class T>
ad::Tensor<T> slice_offsets(const ad::Tensor<T>& values, std::shared_ptr<const ad::InterpTable> table,
                            const DeformSliceParams<T>& params) {
  auto corners = ad::gather_concat(values, table);
  return params.offsets(ad::relu(params.hidden(corners)));
}

/// out_p = sum_i (b_i + db_i) x_{v_i}, with db predicted from the concatenated corner values.
template <class T>
ad::Tensor<T> deform_slice(const ad::Tensor<T>& values, std::shared_ptr<const ad::InterpTable> table,
                           const DeformSliceParams<T>& params) {
  auto delta = slice_offsets(values, table, params);
  return ad::weighted_gather(values, std::move(table), delta);
}

}  // namespace tlnet
