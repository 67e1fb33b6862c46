#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "tlnet/binary_io.hpp"
#include "tlnet/error.hpp"

namespace tlnet {

inline constexpr int kMaxLatticeDim = 7;
inline constexpr double kDefaultSigma = 0.6;
inline constexpr std::int32_t kAbsent = -1;

/// Integer coordinates of a permutohedral lattice vertex. Coordinates sum to zero.
class LatticeKey {
 public:
  LatticeKey() = default;
  explicit LatticeKey(int size) : size_(size) {
    if (size < 1 || size > kMaxLatticeDim + 1) throw UserError("lattice key size out of range");
  }
  LatticeKey(std::initializer_list<std::int32_t> coords) : LatticeKey(static_cast<int>(coords.size())) {
    std::copy(coords.begin(), coords.end(), coords_.begin());
  }
  explicit LatticeKey(std::span<const std::int32_t> coords) : LatticeKey(static_cast<int>(coords.size())) {
    std::copy(coords.begin(), coords.end(), coords_.begin());
  }

  int size() const { return size_; }
  std::int32_t operator[](int i) const { return coords_[i]; }
  std::int32_t& operator[](int i) { return coords_[i]; }
  std::span<const std::int32_t> coords() const { return {coords_.data(), std::size_t(size_)}; }

  std::int64_t sum() const {
    std::int64_t s = 0;
    for (int i = 0; i < size_; ++i) s += coords_[i];
    return s;
  }

  /// Remainder class in {0..d}: every coordinate is congruent to it modulo d+1.
  int remainder() const {
    const int m = size_;
    return static_cast<int>(((coords_[0] % m) + m) % m);
  }

  bool is_valid() const {
    if (size_ < 2 || sum() != 0) return false;
    const int r = remainder();
    for (int i = 0; i < size_; ++i) {
      if (((coords_[i] % size_) + size_) % size_ != r) return false;
    }
    return true;
  }

  friend bool operator==(const LatticeKey&, const LatticeKey&) = default;
  friend std::strong_ordering operator<=>(const LatticeKey& a, const LatticeKey& b) {
    if (auto c = a.size_ <=> b.size_; c != 0) return c;
    for (int i = 0; i < a.size_; ++i) {
      if (auto c = a.coords_[i] <=> b.coords_[i]; c != 0) return c;
    }
    return std::strong_ordering::equal;
  }

 private:
  std::array<std::int32_t, kMaxLatticeDim + 1> coords_{};
  int size_ = 0;
};

struct LatticeKeyHash {
  std::size_t operator()(const LatticeKey& key) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int32_t c : key.coords()) {
      h ^= static_cast<std::uint32_t>(c);
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

// ---------------------------------------------------------------------------
// Elevation into the hyperplane {x in R^{d+1} : sum(x) = 0}.
//
// Basis column i (0-based, one per input axis) is
//   s_i * (1, ..., 1, -(i+1), 0, ..., 0)      (i+1 leading ones)
// with s_i = (d+1) * sqrt(2/3) / sqrt((i+1)(i+2)). The columns are mutually
// orthogonal and all have norm (d+1) * sqrt(2/3).
// ---------------------------------------------------------------------------

inline double elevation_norm(int d) { return (d + 1) * std::sqrt(2.0 / 3.0); }

inline double elevation_axis_scale(int d, int axis) {
  return elevation_norm(d) / std::sqrt(double(axis + 1) * double(axis + 2));
}

/// Elevates a position that is already divided by sigma.
inline Eigen::VectorXd elevate_scaled(std::span<const double> scaled) {
  const int d = static_cast<int>(scaled.size());
  if (d < 1 || d > kMaxLatticeDim) throw UserError("elevate: dimension out of range");
  for (double v : scaled) {
    if (!std::isfinite(v)) throw UserError("elevate: non-finite coordinate");
  }
  Eigen::VectorXd e(d + 1);
  double running = 0.0;
  for (int i = d; i > 0; --i) {
    const double cf = scaled[i - 1] * elevation_axis_scale(d, i - 1);
    e[i] = running - i * cf;
    running += cf;
  }
  e[0] = running;
  return e;
}

inline Eigen::VectorXd elevate(std::span<const double> position, std::span<const double> sigma) {
  if (position.size() != sigma.size()) throw ShapeError("elevate: sigma length differs from position");
  std::array<double, kMaxLatticeDim> scaled{};
  for (std::size_t i = 0; i < position.size(); ++i) {
    if (!(sigma[i] > 0.0) || !std::isfinite(sigma[i])) throw UserError("elevate: sigma must be positive");
    if (!std::isfinite(position[i])) throw UserError("elevate: non-finite coordinate");
    scaled[i] = position[i] / sigma[i];
  }
  return elevate_scaled(std::span<const double>(scaled.data(), position.size()));
}

/// Inverse of elevate_scaled for points in the hyperplane.
inline Eigen::VectorXd project_to_input(std::span<const double> elevated) {
  const int d = static_cast<int>(elevated.size()) - 1;
  const double norm2 = elevation_norm(d) * elevation_norm(d);
  Eigen::VectorXd p(d);
  double prefix = 0.0;
  for (int i = 0; i < d; ++i) {
    prefix += elevated[i];
    p[i] = elevation_axis_scale(d, i) * (prefix - (i + 1) * elevated[i + 1]) / norm2;
  }
  return p;
}

inline Eigen::VectorXd key_position(const LatticeKey& key) {
  std::array<double, kMaxLatticeDim + 1> e{};
  for (int i = 0; i < key.size(); ++i) e[i] = key[i];
  return project_to_input(std::span<const double>(e.data(), std::size_t(key.size())));
}

/// The d+1 corners of the simplex containing an elevated point; slot r holds
/// the remainder-r vertex.
struct SimplexCorners {
  int count = 0;
  std::array<LatticeKey, kMaxLatticeDim + 1> keys{};
  std::array<double, kMaxLatticeDim + 1> weights{};
};

inline SimplexCorners enclosing_simplex(std::span<const double> elevated) {
  const int n = static_cast<int>(elevated.size());
  const int d = n - 1;
  if (d < 1 || d > kMaxLatticeDim) throw UserError("enclosing_simplex: dimension out of range");
  double sum_e = 0.0, max_abs = 0.0;
  for (double v : elevated) {
    if (!std::isfinite(v)) throw UserError("enclosing_simplex: non-finite coordinate");
    sum_e += v;
    max_abs = std::max(max_abs, std::abs(v));
  }
  if (std::abs(sum_e) > 1e-6 * (1.0 + max_abs)) {
    throw UserError("enclosing_simplex: point is not in the lattice hyperplane");
  }

  // Nearest remainder-0 point, coordinate-wise.
  std::array<std::int64_t, kMaxLatticeDim + 1> rem0{};
  std::int64_t rem_sum = 0;
  for (int i = 0; i < n; ++i) {
    const double v = elevated[i] / n;
    const double up = std::ceil(v) * n;
    const double down = std::floor(v) * n;
    rem0[i] = static_cast<std::int64_t>((up - elevated[i] < elevated[i] - down) ? up : down);
    rem_sum += rem0[i];
  }
  rem_sum /= n;

  // Rank of each differential elevated - rem0 (0 = largest).
  std::array<int, kMaxLatticeDim + 1> rank{};
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (elevated[i] - rem0[i] < elevated[j] - rem0[j]) {
        ++rank[i];
      } else {
        ++rank[j];
      }
    }
  }
  // Move rem0 back onto the hyperplane.
  if (rem_sum > 0) {
    for (int i = 0; i < n; ++i) {
      if (rank[i] >= n - rem_sum) {
        rank[i] -= static_cast<int>(n - rem_sum);
        rem0[i] -= n;
      } else {
        rank[i] += static_cast<int>(rem_sum);
      }
    }
  } else if (rem_sum < 0) {
    for (int i = 0; i < n; ++i) {
      if (rank[i] < -rem_sum) {
        rank[i] += static_cast<int>(n + rem_sum);
        rem0[i] += n;
      } else {
        rank[i] += static_cast<int>(rem_sum);
      }
    }
  }

  std::array<double, kMaxLatticeDim + 2> bary{};
  for (int i = 0; i < n; ++i) {
    const double delta = (elevated[i] - static_cast<double>(rem0[i])) / n;
    bary[d - rank[i]] += delta;
    bary[d + 1 - rank[i]] -= delta;
  }
  bary[0] += 1.0 + bary[d + 1];

  SimplexCorners out;
  out.count = n;
  for (int r = 0; r < n; ++r) {
    LatticeKey key(n);
    for (int i = 0; i < n; ++i) {
      key[i] = static_cast<std::int32_t>(rem0[i] + (rank[i] <= d - r ? r : r - n));
    }
    out.keys[r] = key;
    out.weights[r] = bary[r];
  }
  return out;
}

/// key + sign * o_axis, where o_axis is d at `axis` and -1 elsewhere.
inline LatticeKey neighbor_key(const LatticeKey& key, int axis, int sign) {
  const int n = key.size();
  if (axis < 0 || axis >= n) throw UserError("neighbor_key: axis out of range");
  if (sign != 1 && sign != -1) throw UserError("neighbor_key: sign must be +1 or -1");
  LatticeKey out = key;
  for (int i = 0; i < n; ++i) out[i] += (i == axis ? (n - 1) : -1) * sign;
  return out;
}

/// Number of one-hop neighbors, 2(d+1).
inline int neighbor_count(int d) { return 2 * (d + 1); }

/// Neighbor slot j in 0..2(d+1)-1 maps to (axis j/2, sign + for even j, - for odd j).
inline LatticeKey neighbor_slot_key(const LatticeKey& key, int slot) {
  return neighbor_key(key, slot / 2, (slot % 2 == 0) ? 1 : -1);
}

struct SimplexFootprint {
  std::vector<std::int32_t> vertex_indices;  // kAbsent when not allocated
  std::vector<double> barycentric;
};

/// Append-only sparse lattice: keys in insertion order, a key -> row hash map,
/// and an optional float value matrix with one row per key.
class SparseLattice {
 public:
  explicit SparseLattice(int dim = 3, std::vector<double> sigma = {})
      : dim_(dim), sigma_(std::move(sigma)) {
    if (dim < 1 || dim > kMaxLatticeDim) throw UserError("lattice dimension out of range");
    if (sigma_.empty()) sigma_.assign(std::size_t(dim), kDefaultSigma);
    if (sigma_.size() != std::size_t(dim)) throw UserError("sigma length must equal lattice dimension");
    for (double s : sigma_) {
      if (!(s > 0.0) || !std::isfinite(s)) throw UserError("sigma must be strictly positive");
    }
  }

  int dim() const { return dim_; }
  std::span<const double> sigma() const { return sigma_; }
  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  const LatticeKey& key(std::size_t row) const { return keys_[row]; }
  const std::vector<LatticeKey>& keys() const { return keys_; }

  std::int32_t find(const LatticeKey& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? kAbsent : it->second;
  }

  std::int32_t lookup_or_insert(const LatticeKey& key) {
    if (key.size() != dim_ + 1) throw ShapeError("lattice key has wrong length");
    if (key.sum() != 0) throw InvariantError("lattice key coordinates must sum to zero");
    auto [it, inserted] = index_.try_emplace(key, static_cast<std::int32_t>(keys_.size()));
    if (inserted) {
      keys_.push_back(key);
      values_.resize(values_.size() + std::size_t(value_dim_), 0.0f);
    }
    return it->second;
  }

  int value_dim() const { return value_dim_; }

  /// Resets the value matrix to zeros with the given column count.
  void set_value_dim(int value_dim) {
    value_dim_ = value_dim;
    values_.assign(keys_.size() * std::size_t(value_dim), 0.0f);
  }

  using ValueMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstValueMap =
      Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  ValueMap values() { return ValueMap(values_.data(), Eigen::Index(keys_.size()), value_dim_); }
  ConstValueMap values() const {
    return ConstValueMap(values_.data(), Eigen::Index(keys_.size()), value_dim_);
  }

  SimplexFootprint find_enclosing_simplex(std::span<const double> elevated, bool allow_insert) {
    if (static_cast<int>(elevated.size()) != dim_ + 1) throw ShapeError("elevated point has wrong length");
    const SimplexCorners corners = enclosing_simplex(elevated);
    SimplexFootprint fp;
    fp.vertex_indices.resize(std::size_t(corners.count));
    fp.barycentric.resize(std::size_t(corners.count));
    for (int r = 0; r < corners.count; ++r) {
      fp.vertex_indices[r] = allow_insert ? lookup_or_insert(corners.keys[r]) : find(corners.keys[r]);
      fp.barycentric[r] = corners.weights[r];
    }
    return fp;
  }

  SimplexFootprint find_enclosing_simplex(std::span<const double> elevated) const {
    const SimplexCorners corners = enclosing_simplex(elevated);
    SimplexFootprint fp;
    for (int r = 0; r < corners.count; ++r) {
      fp.vertex_indices.push_back(find(corners.keys[r]));
      fp.barycentric.push_back(corners.weights[r]);
    }
    return fp;
  }

  std::int32_t neighbor_row(std::size_t row, int slot) const {
    return find(neighbor_slot_key(keys_[row], slot));
  }

 private:
  int dim_;
  std::vector<double> sigma_;
  std::vector<LatticeKey> keys_;
  std::unordered_map<LatticeKey, std::int32_t, LatticeKeyHash> index_;
  int value_dim_ = 0;
  std::vector<float> values_;
};

// ---------------------------------------------------------------------------
// Snapshot layout (all little-endian):
//   u64 d, u64 k, u64 v_d
//   k * (d+1) x i32   keys, row-major
//   k * v_d   x f32   values, row-major
// ---------------------------------------------------------------------------

inline void write_snapshot(std::ostream& out, const SparseLattice& lattice) {
  binary::put_u64(out, std::uint64_t(lattice.dim()));
  binary::put_u64(out, std::uint64_t(lattice.size()));
  binary::put_u64(out, std::uint64_t(lattice.value_dim()));
  for (const auto& key : lattice.keys()) {
    for (std::int32_t c : key.coords()) binary::put_i32(out, c);
  }
  const auto values = lattice.values();
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) binary::put_f32(out, values(r, c));
  }
}

inline SparseLattice read_snapshot(std::istream& in, std::vector<double> sigma = {}) {
  const auto d = binary::get_u64(in, "snapshot header d");
  const auto k = binary::get_u64(in, "snapshot header k");
  const auto vd = binary::get_u64(in, "snapshot header v_d");
  if (d < 1 || d > std::uint64_t(kMaxLatticeDim)) throw FormatError("snapshot: bad dimension");
  if (vd > (1u << 20)) throw FormatError("snapshot: implausible value dimension");
  SparseLattice lattice(static_cast<int>(d), std::move(sigma));
  lattice.set_value_dim(static_cast<int>(vd));
  for (std::uint64_t r = 0; r < k; ++r) {
    LatticeKey key(static_cast<int>(d + 1));
    for (std::uint64_t i = 0; i <= d; ++i) key[int(i)] = binary::get_i32(in, "snapshot key");
    if (key.sum() != 0) throw FormatError("snapshot: key " + std::to_string(r) + " does not sum to zero");
    if (lattice.lookup_or_insert(key) != static_cast<std::int32_t>(r)) {
      throw FormatError("snapshot: duplicate key at row " + std::to_string(r));
    }
  }
  auto values = lattice.values();
  for (std::uint64_t r = 0; r < k; ++r) {
    for (std::uint64_t c = 0; c < vd; ++c) values(Eigen::Index(r), Eigen::Index(c)) = binary::get_f32(in, "snapshot value");
  }
  return lattice;
}

inline void save_snapshot(const std::string& path, const SparseLattice& lattice) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot open " + path + " for writing");
  write_snapshot(out, lattice);
}

inline SparseLattice load_snapshot(const std::string& path, std::vector<double> sigma = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open " + path);
  return read_snapshot(in, std::move(sigma));
}

}  // namespace tlnet
