#pragma once

// Golden operator fixtures for cross-language tests.
//
// <dir>/manifest.json lists fixtures; each tensor is a file:
//   "lattice": lattice snapshot (keys + per-vertex values)
//   "matrix":  u64 rows, u64 cols, rows*cols f32 row-major (the checkpoint blob layout)
// Outputs are computed in double from the f32-rounded inputs and stored as f32.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "tlnet/binary_io.hpp"
#include "tlnet/lattice.hpp"
#include "tlnet/lattice_ops.hpp"
#include "tlnet/temporal.hpp"

namespace tlnet::fixtures {

namespace fs = std::filesystem;

inline void write_matrix(const fs::path& path, const Mat<double>& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path.string());
  binary::put_u64(out, std::uint64_t(m.rows()));
  binary::put_u64(out, std::uint64_t(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) binary::put_f32(out, float(m.data()[i]));
}

inline Mat<double> read_matrix(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open " + path.string());
  const auto rows = binary::get_u64(in, "matrix rows");
  const auto cols = binary::get_u64(in, "matrix cols");
  if (rows * cols > (std::uint64_t(1) << 28)) throw FormatError(path.string() + ": matrix too large");
  Mat<double> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = binary::get_f32(in, "matrix value");
  return m;
}

/// Lattice with `values` attached as its per-vertex data.
inline void write_lattice_values(const fs::path& path, const SparseLattice& keys, const Mat<double>& values) {
  SparseLattice copy(keys.dim());
  for (const auto& k : keys.keys()) copy.lookup_or_insert(k);
  copy.set_value_dim(int(values.cols()));
  auto v = copy.values();
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) v(r, c) = float(values(r, c));
  }
  save_snapshot(path.string(), copy);
}

inline Mat<double> lattice_values(const SparseLattice& lattice) { return lattice.values().template cast<double>(); }

/// Rounds through f32 so the stored inputs reproduce the stored outputs exactly in double.
inline Mat<double> f32_round(const Mat<double>& m) { return m.cast<float>().cast<double>(); }

class Writer {
 public:
  explicit Writer(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void begin(const std::string& op) {
    current_ = {{"op", op}, {"tensors", nlohmann::json::object()}};
    prefix_ = op + "_";
  }
  void lattice(const std::string& name, const SparseLattice& keys, const Mat<double>& values) {
    const std::string file = prefix_ + name + ".lat";
    write_lattice_values(dir_ / file, keys, values);
    current_["tensors"][name] = {{"file", file}, {"kind", "lattice"}, {"rows", values.rows()}, {"cols", values.cols()}};
  }
  void matrix(const std::string& name, const Mat<double>& m) {
    const std::string file = prefix_ + name + ".mat";
    write_matrix(dir_ / file, m);
    current_["tensors"][name] = {{"file", file}, {"kind", "matrix"}, {"rows", m.rows()}, {"cols", m.cols()}};
  }
  void attr(const std::string& name, const nlohmann::json& value) { current_[name] = value; }
  void end() { manifest_["fixtures"].push_back(current_); }

  void finish(std::uint64_t seed) {
    manifest_["format"] = "tlnet-operator-fixtures";
    manifest_["version"] = 1;
    manifest_["seed"] = seed;
    std::ofstream out(dir_ / "manifest.json");
    if (!out) throw UserError("cannot write fixture manifest in " + dir_.string());
    out << manifest_.dump(2) << '\n';
  }

 private:
  fs::path dir_;
  nlohmann::json manifest_ = {{"fixtures", nlohmann::json::array()}};
  nlohmann::json current_;
  std::string prefix_;
};

inline Mat<double> random_values(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return f32_round(m);
}

inline PointCloud fixture_cloud(std::mt19937_64& rng, std::size_t points = 12) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  PointCloud c;
  c.positions.resize(Eigen::Index(points), 3);
  c.features.resize(Eigen::Index(points), 1);
  for (Eigen::Index i = 0; i < c.positions.size(); ++i) c.positions.data()[i] = double(float(u(rng)));
  c.features.setConstant(0.5);
  return c;
}

/// Writes fixtures for lattice_convolution, downsample, upsample, slice,
/// gru_fuse and aflow_fuse.
inline void export_operator_fixtures(const fs::path& dir, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  Writer w(dir);
  using Tensor = ad::Tensor<double>;
  auto T = [](const Mat<double>& m) { return Tensor::constant(m); };

  SparseLattice lattice(3);
  const PointCloud cloud = fixture_cloud(rng);
  const Distribution dist = distribute(cloud, lattice);
  const auto k = Eigen::Index(lattice.size());

  {
    ConvParams<double> p = ConvParams<double>::init(conv_taps(3), 3, 4, rng);
    p.weight = T(f32_round(p.weight.value()));
    p.bias = T(random_values(1, 4, rng));
    const Mat<double> x = random_values(k, 3, rng);
    const auto out = lattice_convolution(T(x), p, conv_table(lattice)).value();
    w.begin("lattice_convolution");
    w.attr("preactivate", true);
    w.lattice("x", lattice, x);
    w.matrix("weight", p.weight.value());
    w.matrix("bias", p.bias.value());
    w.lattice("out", lattice, out);
    w.end();
  }
  std::vector<std::int32_t> map;
  const SparseLattice coarse = downsample_keys(lattice, &map);
  {
    ConvParams<double> p = ConvParams<double>::init(conv_taps(3), 2, 3, rng);
    p.weight = T(f32_round(p.weight.value()));
    p.bias = T(random_values(1, 3, rng));
    const Mat<double> x = random_values(k, 2, rng);
    const auto out = downsample(T(x), p, downsample_table(lattice, coarse)).value();
    w.begin("downsample");
    w.lattice("x", lattice, x);
    w.matrix("weight", p.weight.value());
    w.matrix("bias", p.bias.value());
    w.lattice("out", coarse, out);
    w.end();
  }
  {
    const Mat<double> x = random_values(Eigen::Index(coarse.size()), 3, rng);
    const auto out = upsample(T(x), upsample_table(coarse, lattice.keys())).value();
    w.begin("upsample");
    w.lattice("x", coarse, x);
    w.lattice("out", lattice, out);
    w.end();
  }
  {
    const Mat<double> x = random_values(k, 3, rng);
    const auto out = slice(T(x), slice_table(dist)).value();
    w.begin("slice");
    w.matrix("positions", cloud.positions);
    w.lattice("x", lattice, x);
    w.matrix("out", out);
    w.end();
  }
  {
    GruParams<double> p = GruParams<double>::init(3, rng);
    for (auto* t : {&p.gates.weight, &p.gates.bias, &p.candidate.weight, &p.candidate.bias}) *t = T(f32_round(t->value()));
    const Mat<double> h = random_values(k, 3, rng), x = random_values(k, 3, rng);
    const auto out = gru_fuse(T(h), T(x), p).value();
    w.begin("gru_fuse");
    w.lattice("h_prev", lattice, h);
    w.lattice("x", lattice, x);
    w.matrix("gates_weight", p.gates.weight.value());
    w.matrix("gates_bias", p.gates.bias.value());
    w.matrix("candidate_weight", p.candidate.weight.value());
    w.matrix("candidate_bias", p.candidate.bias.value());
    w.lattice("out", lattice, out);
    w.end();
  }
  {
    AFlowParams<double> p = AFlowParams<double>::init(3, rng);
    p.alpha = T(Mat<double>::Constant(1, 1, 2.0));
    p.fuse.weight = T(f32_round(p.fuse.weight.value()));
    p.fuse.bias = T(random_values(1, 3, rng));
    const std::size_t previous = lattice.size() - lattice.size() / 3;
    const Mat<double> h = random_values(k, 3, rng), x = random_values(k, 3, rng);
    const auto out = aflow_fuse(T(h), T(x), p, flow_neighbor_table(lattice, previous)).value();
    w.begin("aflow_fuse");
    w.attr("previous_vertex_count", previous);
    w.attr("alpha", p.alpha.item());
    w.attr("beta", p.beta.item());
    w.lattice("h_prev", lattice, h);
    w.lattice("x", lattice, x);
    w.matrix("fuse_weight", p.fuse.weight.value());
    w.matrix("fuse_bias", p.fuse.bias.value());
    w.lattice("out", lattice, out);
    w.end();
  }
  w.finish(seed);
}

}  // namespace tlnet::fixtures
