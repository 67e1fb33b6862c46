#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tlnet/lattice_ops.hpp"
#include "tlnet/model.hpp"
#include "tlnet/temporal.hpp"
#include "tlnet/tensor.hpp"

namespace tlnet::gradcheck {

using Tensor = ad::Tensor<double>;

/// A differentiable function of `inputs` on one random small fixture. The
/// harness reduces non-scalar outputs with a fixed random projection.
struct Fixture {
  std::vector<Tensor> inputs;
  std::vector<std::string> input_names;
  std::function<Tensor()> forward;
};

struct OpCase {
  std::string name;
  std::function<Fixture(std::mt19937_64&)> make;
};

struct CheckOptions {
  int fixtures = 5;
  double step = 1e-6;
  double tolerance = 1e-4;
  std::uint64_t seed = 1234;
  std::string corrupt_op;  // test hook: perturbs the analytic gradient of this op
};

struct OpResult {
  std::string name;
  int fixtures = 0;
  double max_rel_error = 0.0;
  std::string worst_input;
  bool passed = true;
};

/// Normwise relative error ||a - n|| / max(||a||, ||n||, 1e-12).
inline double relative_error(const Mat<double>& analytic, const Mat<double>& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

namespace detail {

inline Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Tensor param(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::parameter(random_mat(r, c, rng, lo, hi));
}

/// A small random cloud (sigma-scaled units) and the lattice it spans.
inline PointCloud random_cloud(std::size_t points, int features, std::mt19937_64& rng, double extent = 2.0) {
  PointCloud c;
  c.positions = random_mat(Eigen::Index(points), 3, rng, -extent, extent);
  c.features = random_mat(Eigen::Index(points), features, rng, 0.0, 1.0);
  return c;
}

struct SmallLattice {
  SparseLattice lattice{3};
  Distribution dist;
};

inline SmallLattice small_lattice(std::mt19937_64& rng, std::size_t points = 8) {
  SmallLattice s;
  s.dist = distribute(random_cloud(points, 1, rng), s.lattice);
  return s;
}

/// Random partial neighbor table over `rows` vertices with some missing slots.
inline std::shared_ptr<ad::GatherTable> random_neighbors(std::size_t rows, int taps, std::size_t source_rows, std::mt19937_64& rng,
                                                         double missing = 0.3) {
  auto t = std::make_shared<ad::GatherTable>();
  t->out_rows = rows;
  t->taps = taps;
  t->index.assign(rows * std::size_t(taps), kAbsent);
  t->active.assign(rows, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> pick(0, std::int32_t(source_rows) - 1);
  for (auto& i : t->index) {
    if (u(rng) >= missing) i = pick(rng);
  }
  return t;
}

inline std::shared_ptr<ad::InterpTable> random_interp(std::size_t rows, int width, std::size_t source_rows, std::mt19937_64& rng) {
  auto t = std::make_shared<ad::InterpTable>();
  t->out_rows = rows;
  t->width = width;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> pick(0, std::int32_t(source_rows) - 1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < width; ++j) {
      const bool present = u(rng) > 0.2;
      t->index.push_back(present ? pick(rng) : kAbsent);
      t->weight.push_back(present ? u(rng) : 0.0);
    }
  }
  return t;
}

/// Values kept away from zero so ReLU kinks are not crossed by the FD step.
inline Mat<double> away_from_zero(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  Mat<double> m = random_mat(r, c, rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (sign(rng)) m.data()[i] = -m.data()[i];
  }
  return m;
}

inline ModelConfig tiny_model_config(const std::string& fusion, std::uint64_t seed) {
  ModelConfig c;
  c.widths = {3, 4, 5};
  c.slice_hidden = 3;
  c.num_classes = 3;
  c.seed = seed;
  c.fusion = FusionSpec::parse(fusion);
  return c;
}

}  // namespace detail

/// Every differentiable operation exported by the autodiff core, the lattice
/// ops, the fusion cells and the model. The acceptance and selfcheck reports
/// are checked against this list.
inline std::vector<OpCase> registry() {
  using namespace detail;
  std::vector<OpCase> ops;
  auto unary = [&](const std::string& name, std::function<Tensor(const Tensor&)> f, bool avoid_zero = false) {
    ops.push_back({name, [f, avoid_zero](std::mt19937_64& rng) {
                     Fixture fx;
                     auto a = avoid_zero ? Tensor::parameter(away_from_zero(4, 3, rng)) : param(4, 3, rng);
                     fx.inputs = {a};
                     fx.input_names = {"a"};
                     fx.forward = [f, a] { return f(a); };
                     return fx;
                   }});
  };
  auto binary = [&](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> f, Eigen::Index ar,
                    Eigen::Index ac, Eigen::Index br, Eigen::Index bc) {
    ops.push_back({name, [=](std::mt19937_64& rng) {
                     Fixture fx;
                     auto a = param(ar, ac, rng);
                     auto b = param(br, bc, rng);
                     fx.inputs = {a, b};
                     fx.input_names = {"a", "b"};
                     fx.forward = [f, a, b] { return f(a, b); };
                     return fx;
                   }});
  };

  // dense primitives
  binary("matmul", [](auto& a, auto& b) { return ad::matmul(a, b); }, 4, 3, 3, 2);
  binary("add", [](auto& a, auto& b) { return ad::add(a, b); }, 4, 3, 4, 3);
  binary("sub", [](auto& a, auto& b) { return ad::sub(a, b); }, 4, 3, 4, 3);
  binary("mul", [](auto& a, auto& b) { return ad::mul(a, b); }, 4, 3, 4, 3);
  binary("add_bias", [](auto& a, auto& b) { return ad::add_bias(a, b); }, 4, 3, 1, 3);
  binary("concat_cols", [](auto& a, auto& b) { return ad::concat_cols(a, b); }, 4, 3, 4, 2);
  unary("scale", [](const Tensor& a) { return ad::scale(a, -1.7); });
  unary("one_minus", [](const Tensor& a) { return ad::one_minus(a); });
  unary("relu", [](const Tensor& a) { return ad::relu(a); }, true);
  unary("sigmoid", [](const Tensor& a) { return ad::sigmoid(a); });
  unary("tanh", [](const Tensor& a) { return ad::tanh(a); });
  unary("slice_cols", [](const Tensor& a) { return ad::slice_cols(a, 1, 2); });
  unary("sum", [](const Tensor& a) { return ad::sum(a); });
  unary("pad_rows", [](const Tensor& a) { return ad::pad_rows(a, 7); });
  unary("mask_rows", [](const Tensor& a) {
    return ad::mask_rows(a, std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1}));
  });
  ops.push_back({"linear", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto x = param(5, 3, rng), w = param(3, 4, rng), b = param(1, 4, rng);
                   fx.inputs = {x, w, b};
                   fx.input_names = {"x", "weight", "bias"};
                   fx.forward = [=] { return ad::linear(x, w, b); };
                   return fx;
                 }});

  // sparse gather primitives
  ops.push_back({"gather_conv", [](std::mt19937_64& rng) {
                   Fixture fx;
                   const int taps = 5;
                   auto table = random_neighbors(6, taps, 6, rng);
                   auto x = Tensor::parameter(away_from_zero(6, 2, rng));
                   auto w = param(taps * 2, 3, rng), b = param(1, 3, rng);
                   fx.inputs = {x, w, b};
                   fx.input_names = {"x", "weight", "bias"};
                   fx.forward = [=] { return ad::gather_conv(x, w, b, table, true); };
                   return fx;
                 }});
  ops.push_back({"segment_max", [](std::mt19937_64& rng) {
                   Fixture fx;
                   std::uniform_int_distribution<std::int32_t> pick(0, 3);
                   std::vector<std::int32_t> seg(9);
                   for (auto& s : seg) s = pick(rng);
                   auto x = param(9, 3, rng);
                   auto segments = std::make_shared<const std::vector<std::int32_t>>(seg);
                   fx.inputs = {x};
                   fx.input_names = {"values"};
                   fx.forward = [=] { return ad::segment_max(x, segments, 5); };
                   return fx;
                 }});
  ops.push_back({"weighted_gather", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto table = random_interp(5, 4, 6, rng);
                   auto x = param(6, 3, rng);
                   auto delta = param(5, 4, rng, -0.1, 0.1);
                   fx.inputs = {x, delta};
                   fx.input_names = {"values", "delta"};
                   fx.forward = [=] { return ad::weighted_gather(x, table, delta); };
                   return fx;
                 }});
  ops.push_back({"gather_concat", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto table = random_interp(5, 4, 6, rng);
                   auto x = param(6, 2, rng);
                   fx.inputs = {x};
                   fx.input_names = {"values"};
                   fx.forward = [=] { return ad::gather_concat(x, table); };
                   return fx;
                 }});
  ops.push_back({"flow_aggregate", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto table = random_neighbors(6, 8, 4, rng);
                   // alpha large enough that most pairs fall inside the unclamped region
                   auto x = param(6, 3, rng, -0.5, 0.5), h = param(6, 3, rng, -0.5, 0.5);
                   auto alpha = param(1, 1, rng, 0.8, 1.5), beta = param(1, 1, rng, 0.05, 0.3);
                   fx.inputs = {x, h, alpha, beta};
                   fx.input_names = {"x", "h_prev", "alpha", "beta"};
                   fx.forward = [=] { return ad::flow_aggregate(x, h, alpha, beta, table); };
                   return fx;
                 }});
  ops.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto logits = param(6, 4, rng, -2.0, 2.0);
                   std::vector<std::int32_t> labels = {0, 3, kIgnoreLabel, 1, 2, 2};
                   fx.inputs = {logits};
                   fx.input_names = {"logits"};
                   fx.forward = [=] { return ad::cross_entropy(logits, labels, kIgnoreLabel); };
                   return fx;
                 }});
  ops.push_back({"cross_entropy_weighted", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto logits = param(6, 4, rng, -2.0, 2.0);
                   std::vector<std::int32_t> labels = {0, 3, kIgnoreLabel, 1, 2, 2};
                   std::vector<double> weights = {0.5, 2.0, 1.0, 1.5};
                   fx.inputs = {logits};
                   fx.input_names = {"logits"};
                   fx.forward = [=] { return ad::cross_entropy(logits, labels, kIgnoreLabel, weights); };
                   return fx;
                 }});

  // lattice ops on real lattices
  ops.push_back({"lattice_convolution", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng));
                   auto table = conv_table(s->lattice, &s->dist.active);
                   ConvParams<double> p = ConvParams<double>::init(conv_taps(3), 2, 3, rng);
                   auto x = Tensor::parameter(away_from_zero(Eigen::Index(s->lattice.size()), 2, rng));
                   fx.inputs = {x, p.weight, p.bias};
                   fx.input_names = {"x", "weight", "bias"};
                   fx.forward = [=] { return lattice_convolution(x, p, table); };
                   return fx;
                 }});
  ops.push_back({"resnet_block", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng));
                   auto table = conv_table(s->lattice, &s->dist.active);
                   auto p = ResnetParams<double>::init(conv_taps(3), 2, rng);
                   p.conv1.bias = Tensor::parameter(away_from_zero(1, 2, rng));
                   p.conv2.bias = Tensor::parameter(away_from_zero(1, 2, rng));
                   auto x = Tensor::parameter(away_from_zero(Eigen::Index(s->lattice.size()), 2, rng));
                   fx.inputs = {x, p.conv1.weight, p.conv1.bias, p.conv2.weight, p.conv2.bias};
                   fx.input_names = {"x", "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"};
                   fx.forward = [=] { return resnet_block(x, p, table); };
                   return fx;
                 }});
  ops.push_back({"pointnet_aggregate", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng));
                   auto p = LinearParams<double>::init(4, 3, rng);
                   p.bias = param(1, 3, rng);
                   fx.inputs = {p.weight, p.bias};
                   fx.input_names = {"weight", "bias"};
                   fx.forward = [=] { return pointnet_aggregate(s->dist, p); };
                   return fx;
                 }});
  ops.push_back({"downsample", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng, 12));
                   std::vector<std::int32_t> map;
                   auto coarse = std::make_shared<SparseLattice>(downsample_keys(s->lattice, &map));
                   auto table = downsample_table(s->lattice, *coarse, &s->dist.active, nullptr);
                   auto p = ConvParams<double>::init(conv_taps(3), 2, 3, rng);
                   auto x = Tensor::parameter(away_from_zero(Eigen::Index(s->lattice.size()), 2, rng));
                   fx.inputs = {x, p.weight, p.bias};
                   fx.input_names = {"x", "weight", "bias"};
                   fx.forward = [=] { return downsample(x, p, table); };
                   return fx;
                 }});
  ops.push_back({"upsample", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng, 12));
                   auto coarse = downsample_keys(s->lattice);
                   auto table = upsample_table(coarse, s->lattice.keys());
                   auto x = param(Eigen::Index(coarse.size()), 3, rng);
                   fx.inputs = {x};
                   fx.input_names = {"coarse"};
                   fx.forward = [=] { return upsample(x, table); };
                   return fx;
                 }});
  ops.push_back({"slice", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng));
                   auto table = slice_table(s->dist);
                   auto x = param(Eigen::Index(s->lattice.size()), 3, rng);
                   fx.inputs = {x};
                   fx.input_names = {"values"};
                   fx.forward = [=] { return slice(x, table); };
                   return fx;
                 }});
  ops.push_back({"deform_slice", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng));
                   auto table = slice_table(s->dist);
                   auto p = DeformSliceParams<double>::init(4, 2, 3, rng);
                   p.offsets = LinearParams<double>::init(3, 4, rng);
                   p.hidden.bias = Tensor::parameter(away_from_zero(1, 3, rng));
                   auto x = param(Eigen::Index(s->lattice.size()), 2, rng);
                   fx.inputs = {x, p.hidden.weight, p.hidden.bias, p.offsets.weight, p.offsets.bias};
                   fx.input_names = {"values", "hidden.weight", "hidden.bias", "offsets.weight", "offsets.bias"};
                   fx.forward = [=] { return deform_slice(x, table, p); };
                   return fx;
                 }});

  // fusion cells
  ops.push_back({"gru_fuse", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto p = GruParams<double>::init(3, rng);
                   auto h = param(5, 3, rng), x = param(5, 3, rng);
                   fx.inputs = {h, x, p.gates.weight, p.gates.bias, p.candidate.weight, p.candidate.bias};
                   fx.input_names = {"h_prev", "x", "gates.weight", "gates.bias", "candidate.weight", "candidate.bias"};
                   fx.forward = [=] { return gru_fuse(h, x, p); };
                   return fx;
                 }});
  ops.push_back({"lstm_fuse", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto p = LstmParams<double>::init(3, rng);
                   auto h = param(5, 3, rng), c = param(5, 3, rng), x = param(5, 3, rng);
                   fx.inputs = {h, c, x, p.gates.weight, p.gates.bias};
                   fx.input_names = {"h_prev", "c_prev", "x", "gates.weight", "gates.bias"};
                   fx.forward = [=] {
                     auto out = lstm_fuse(h, c, x, p);
                     return ad::concat_cols(out.hidden, out.cell);
                   };
                   return fx;
                 }});
  ops.push_back({"aflow_fuse", [](std::mt19937_64& rng) {
                   Fixture fx;
                   auto s = std::make_shared<SmallLattice>(small_lattice(rng, 10));
                   const std::size_t k = s->lattice.size();
                   auto neighbors = flow_neighbor_table(s->lattice, k - k / 3);
                   auto p = AFlowParams<double>::init(3, rng);
                   p.alpha = param(1, 1, rng, 1.5, 2.5);
                   p.fuse.bias = Tensor::parameter(Mat<double>::Constant(1, 3, 3.0));  // keep ReLU inputs positive
                   auto x = param(Eigen::Index(k), 3, rng, -0.4, 0.4), h = param(Eigen::Index(k), 3, rng, -0.4, 0.4);
                   fx.inputs = {h, x, p.alpha, p.beta, p.fuse.weight, p.fuse.bias};
                   fx.input_names = {"h_prev", "x", "alpha", "beta", "fuse.weight", "fuse.bias"};
                   fx.forward = [=] { return aflow_fuse(h, x, p, neighbors); };
                   return fx;
                 }});

  // whole model, BPTT over two clouds, cross-entropy on the last
  auto model_case = [&](const std::string& name, const std::string& fusion) {
    ops.push_back({name, [fusion](std::mt19937_64& rng) {
                     Fixture fx;
                     auto model = std::make_shared<Model<double>>(tiny_model_config(fusion, rng()));
                     auto clouds = std::make_shared<std::vector<PointCloud>>();
                     std::uniform_int_distribution<std::int32_t> label(0, 2);
                     for (int t = 0; t < 2; ++t) {
                       PointCloud c = random_cloud(6, 1, rng, 1.5);
                       for (std::size_t i = 0; i < c.size(); ++i) c.labels.push_back(label(rng));
                       clouds->push_back(std::move(c));
                     }
                     for (auto& [pname, p] : model->named_parameters()) {
                       // nonzero biases keep ReLU inputs off their kink
                       if (p.rows() == 1 && pname.ends_with(".bias")) p.mutable_value() = away_from_zero(1, p.cols(), rng);
                       fx.inputs.push_back(p);
                       fx.input_names.push_back(pname);
                     }
                     fx.forward = [model, clouds] {
                       auto logits = model->forward_sequence(std::span<const PointCloud>(*clouds));
                       return ad::cross_entropy(logits, clouds->back().labels, kIgnoreLabel);
                     };
                     return fx;
                   }});
  };
  model_case("model_gru_lstm_aflow_gru", "GRU-LSTM-AFlow-GRU");
  model_case("model_aflow_gru_lstm_aflow", "AFlow-GRU-LSTM-AFlow");
  return ops;
}

namespace detail {

inline double projected_loss(const Fixture& fx, const Mat<double>& projection) {
  ad::NoGradGuard guard;
  const auto out = fx.forward();
  return (out.value().array() * projection.array()).sum();
}

}  // namespace detail

inline OpResult check_op(const OpCase& op, const CheckOptions& options) {
  OpResult result;
  result.name = op.name;
  std::mt19937_64 rng(options.seed ^ std::hash<std::string>{}(op.name));
  for (int f = 0; f < options.fixtures; ++f) {
    Fixture fx = op.make(rng);
    Tensor out = fx.forward();
    const Mat<double> projection = detail::random_mat(out.rows(), out.cols(), rng);
    auto loss = ad::sum(ad::mul(out, Tensor::constant(projection)));
    for (auto& in : fx.inputs) in.zero_grad();
    ad::backward(loss);
    for (std::size_t i = 0; i < fx.inputs.size(); ++i) {
      Tensor& in = fx.inputs[i];
      Mat<double> analytic = in.has_grad() ? in.grad() : Mat<double>::Zero(in.rows(), in.cols());
      if (op.name == options.corrupt_op && i == 0) analytic *= 1.01;
      Mat<double> numeric(in.rows(), in.cols());
      Mat<double>& value = in.mutable_value();
      for (Eigen::Index k = 0; k < value.size(); ++k) {
        const double saved = value.data()[k];
        value.data()[k] = saved + options.step;
        const double up = detail::projected_loss(fx, projection);
        value.data()[k] = saved - options.step;
        const double down = detail::projected_loss(fx, projection);
        value.data()[k] = saved;
        numeric.data()[k] = (up - down) / (2.0 * options.step);
      }
      const double err = relative_error(analytic, numeric);
      if (err > result.max_rel_error || result.worst_input.empty()) {
        result.max_rel_error = err;
        result.worst_input = fx.input_names[i];
      }
    }
    ++result.fixtures;
  }
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

inline std::vector<OpResult> check_all(const CheckOptions& options = {}) {
  std::vector<OpResult> out;
  for (const auto& op : registry()) out.push_back(check_op(op, options));
  return out;
}

}  // namespace tlnet::gradcheck
