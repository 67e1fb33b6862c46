#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// Every op produces a node that remembers its parents and a closure which,
// given the node's upstream gradient, accumulates into the parents. Node ids
// increase monotonically, so sorting reachable nodes by descending id is a
// valid reverse topological order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tlnet/error.hpp"

namespace tlnet {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

namespace detail {
inline std::atomic<std::uint64_t> next_node_id{1};
inline thread_local int no_grad_depth = 0;
}  // namespace detail

/// While alive, ops record no backward closures (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class T>
struct Node {
  Mat<T> value;
  Mat<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = detail::next_node_id.fetch_add(1);
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Mat<T>& grad_buffer() {
    if (grad.size() == 0 && value.size() != 0) grad = Mat<T>::Zero(value.rows(), value.cols());
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Mat<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Mat<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Tensor(std::move(n));
  }

  static Tensor parameter(Mat<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Mat<T>::Zero(rows, cols)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Mat<T>& value() const { return node_->value; }
  Mat<T>& mutable_value() { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }

  T item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value(0, 0);
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  Mat<T> grad() const {
    if (has_grad()) return node_->grad;
    return Mat<T>::Zero(rows(), cols());
  }
  Mat<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0, 0); }

  /// Same value, cut from the tape.
  Tensor detach() const { return constant(node_->value); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the result node; the closure is dropped when nothing upstream needs a gradient.
template <class T>
Tensor<T> make_result(Mat<T> value, std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward, const char* op) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  n->is_leaf = false;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs && grad_enabled()) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw Error("backward on an undefined tensor");
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward requires a scalar loss");
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });

  loss.node()->grad_buffer()(0, 0) += T(1);
  for (Node<T>* n : order) {
    if (n->backward && n->grad.size() != 0) n->backward(*n);
    if (!n->is_leaf) n->grad.resize(0, 0);
  }
}

namespace detail {
template <class T>
inline void accumulate(Node<T>& self, std::size_t i, const Mat<T>& g) {
  auto& p = *self.parents[i];
  if (p.requires_grad) p.grad_buffer() += g;
}
template <class T>
inline bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}
inline void check_same_shape(Eigen::Index r1, Eigen::Index c1, Eigen::Index r2, Eigen::Index c2, const char* op) {
  if (r1 != r2 || c1 != c2) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(r1) + "x" + std::to_string(c1) +
                     " vs " + std::to_string(r2) + "x" + std::to_string(c2) + ")");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Dense primitives
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  return make_result<T>(a.value() * b.value(), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) detail::accumulate<T>(self, 0, self.grad * bv.transpose());
    if (detail::wants(self, 1)) detail::accumulate<T>(self, 1, av.transpose() * self.grad);
  }, "matmul");
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  return make_result<T>(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    detail::accumulate<T>(self, 0, self.grad);
    detail::accumulate<T>(self, 1, self.grad);
  }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
  return make_result<T>(a.value() - b.value(), {a, b}, [](Node<T>& self) {
    detail::accumulate<T>(self, 0, self.grad);
    if (detail::wants(self, 1)) detail::accumulate<T>(self, 1, Mat<T>(-self.grad));
  }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
  return make_result<T>(a.value().cwiseProduct(b.value()), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) detail::accumulate<T>(self, 0, self.grad.cwiseProduct(bv));
    if (detail::wants(self, 1)) detail::accumulate<T>(self, 1, self.grad.cwiseProduct(av));
  }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return make_result<T>(a.value() * factor, {a}, [factor](Node<T>& self) {
    detail::accumulate<T>(self, 0, Mat<T>(self.grad * factor));
  }, "scale");
}

/// 1 - a
template <class T>
Tensor<T> one_minus(const Tensor<T>& a) {
  Mat<T> v = (T(1) - a.value().array()).matrix();
  return make_result<T>(std::move(v), {a}, [](Node<T>& self) {
    detail::accumulate<T>(self, 0, Mat<T>(-self.grad));
  }, "one_minus");
}

/// Adds a 1 x c bias row to every row of a.
template <class T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_bias: bias must be 1 x cols");
  Mat<T> v = a.value();
  v.rowwise() += bias.value().row(0);
  return make_result<T>(std::move(v), {a, bias}, [](Node<T>& self) {
    detail::accumulate<T>(self, 0, self.grad);
    if (detail::wants(self, 1)) detail::accumulate<T>(self, 1, Mat<T>(self.grad.colwise().sum()));
  }, "add_bias");
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return make_result<T>(a.value().cwiseMax(T(0)), {a}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    detail::accumulate<T>(self, 0, Mat<T>((av.array() > T(0)).select(self.grad.array(), T(0))));
  }, "relu");
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Mat<T> v = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return make_result<T>(v, {a}, [v](Node<T>& self) {
    detail::accumulate<T>(self, 0, Mat<T>(self.grad.array() * v.array() * (T(1) - v.array())));
  }, "sigmoid");
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  Mat<T> v = a.value().array().tanh().matrix();
  return make_result<T>(v, {a}, [v](Node<T>& self) {
    detail::accumulate<T>(self, 0, Mat<T>(self.grad.array() * (T(1) - v.array().square())));
  }, "tanh");
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
  Mat<T> v(a.rows(), a.cols() + b.cols());
  v.leftCols(a.cols()) = a.value();
  v.rightCols(b.cols()) = b.value();
  const Eigen::Index ca = a.cols();
  return make_result<T>(std::move(v), {a, b}, [ca](Node<T>& self) {
    if (detail::wants(self, 0)) detail::accumulate<T>(self, 0, Mat<T>(self.grad.leftCols(ca)));
    if (detail::wants(self, 1)) detail::accumulate<T>(self, 1, Mat<T>(self.grad.rightCols(self.grad.cols() - ca)));
  }, "concat_cols");
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  Mat<T> v = a.value().middleCols(start, count);
  return make_result<T>(std::move(v), {a}, [start, count](Node<T>& self) {
    auto& p = *self.parents[0];
    p.grad_buffer().middleCols(start, count) += self.grad;
  }, "slice_cols");
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Mat<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return make_result<T>(std::move(v), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    p.grad_buffer().array() += self.grad(0, 0);
  }, "sum");
}

/// Appends zero rows so the result has `rows` rows.
template <class T>
Tensor<T> pad_rows(const Tensor<T>& a, Eigen::Index rows) {
  if (rows < a.rows()) throw InvariantError("pad_rows: target has fewer rows than the input");
  if (rows == a.rows()) return a;
  Mat<T> v = Mat<T>::Zero(rows, a.cols());
  v.topRows(a.rows()) = a.value();
  const Eigen::Index keep = a.rows();
  return make_result<T>(std::move(v), {a}, [keep](Node<T>& self) {
    detail::accumulate<T>(self, 0, Mat<T>(self.grad.topRows(keep)));
  }, "pad_rows");
}

/// Zeroes the rows whose mask entry is 0.
template <class T>
Tensor<T> mask_rows(const Tensor<T>& a, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  if (static_cast<Eigen::Index>(mask->size()) != a.rows()) throw ShapeError("mask_rows: mask length differs");
  Mat<T> v = a.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    if (!(*mask)[std::size_t(r)]) v.row(r).setZero();
  }
  return make_result<T>(std::move(v), {a}, [mask](Node<T>& self) {
    Mat<T> g = self.grad;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (!(*mask)[std::size_t(r)]) g.row(r).setZero();
    }
    detail::accumulate<T>(self, 0, g);
  }, "mask_rows");
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_bias(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Sparse gather structures shared by the lattice ops.
// ---------------------------------------------------------------------------

/// For every output row, `taps` input row indices (kAbsent = -1 when missing).
/// Inactive output rows produce all-zero output.
struct GatherTable {
  std::size_t out_rows = 0;
  int taps = 0;
  std::vector<std::int32_t> index;   // out_rows * taps
  std::vector<std::uint8_t> active;  // out_rows

  std::int32_t at(std::size_t row, int tap) const { return index[row * std::size_t(taps) + std::size_t(tap)]; }
};

/// Rows of a fixed linear interpolation: out_r = sum_j weight(r,j) * in[index(r,j)].
struct InterpTable {
  std::size_t out_rows = 0;
  int width = 0;
  std::vector<std::int32_t> index;
  std::vector<double> weight;
};

/// Lattice convolution: out[r] = sum_t act(x[idx(r,t)]) * W_t + b for active r,
/// where W is (taps * cin) x cout with tap t occupying rows [t*cin, (t+1)*cin)
/// and act is ReLU when `preactivate` is set, identity otherwise.
template <class T>
Tensor<T> gather_conv(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                      std::shared_ptr<const GatherTable> table, bool preactivate) {
  const Eigen::Index cin = x.cols();
  const int taps = table->taps;
  if (weight.rows() != taps * cin) {
    throw ShapeError("lattice conv: weight has " + std::to_string(weight.rows()) + " rows, expected taps*cin = " +
                     std::to_string(taps * cin));
  }
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw ShapeError("lattice conv: bias shape mismatch");
  const Eigen::Index out_rows = static_cast<Eigen::Index>(table->out_rows);

  Mat<T> gathered = Mat<T>::Zero(out_rows, taps * cin);
  const auto& xv = x.value();
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    if (!table->active[std::size_t(r)]) continue;
    for (int t = 0; t < taps; ++t) {
      const std::int32_t src = table->at(std::size_t(r), t);
      if (src == -1) continue;
      if (src >= xv.rows()) throw ShapeError("lattice conv: gather index out of range");
      if (preactivate) {
        gathered.block(r, t * cin, 1, cin) = xv.row(src).cwiseMax(T(0));
      } else {
        gathered.block(r, t * cin, 1, cin) = xv.row(src);
      }
    }
  }
  Mat<T> out = gathered * weight.value();
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    if (table->active[std::size_t(r)]) out.row(r) += bias.value().row(0);
  }
  return make_result<T>(std::move(out), {x, weight, bias},
                        [table, preactivate, gathered = std::move(gathered), cin](Node<T>& self) {
    const auto& g = self.grad;
    if (detail::wants(self, 0)) {
      const auto& xv = self.parents[0]->value;
      const auto& wv = self.parents[1]->value;
      Mat<T> dgathered = g * wv.transpose();
      auto& dx = self.parents[0]->grad_buffer();
      for (std::size_t r = 0; r < table->out_rows; ++r) {
        if (!table->active[r]) continue;
        for (int t = 0; t < table->taps; ++t) {
          const std::int32_t src = table->at(r, t);
          if (src == -1) continue;
          auto block = dgathered.block(Eigen::Index(r), t * cin, 1, cin);
          if (preactivate) {
            dx.row(src) += (xv.row(src).array() > T(0)).select(block.array(), T(0)).matrix();
          } else {
            dx.row(src) += block;
          }
        }
      }
    }
    if (detail::wants(self, 1)) detail::accumulate<T>(self, 1, Mat<T>(gathered.transpose() * g));
    if (detail::wants(self, 2)) {
      Mat<T> db = Mat<T>::Zero(1, g.cols());
      for (std::size_t r = 0; r < table->out_rows; ++r) {
        if (table->active[r]) db += g.row(Eigen::Index(r));
      }
      detail::accumulate<T>(self, 2, db);
    }
  }, "gather_conv");
}

/// Per-segment elementwise max over rows of `values`; segment[i] names the
/// output row of input row i. Empty segments produce zero rows.
template <class T>
Tensor<T> segment_max(const Tensor<T>& values, std::shared_ptr<const std::vector<std::int32_t>> segment,
                      std::size_t segments) {
  if (static_cast<Eigen::Index>(segment->size()) != values.rows()) throw ShapeError("segment_max: segment ids length differs");
  const Eigen::Index cols = values.cols();
  Mat<T> out = Mat<T>::Zero(Eigen::Index(segments), cols);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(segments * std::size_t(cols), -1);
  const auto& v = values.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const std::int32_t s = (*segment)[std::size_t(i)];
    if (s < 0 || std::size_t(s) >= segments) throw ShapeError("segment_max: segment id out of range");
    for (Eigen::Index c = 0; c < cols; ++c) {
      auto& am = (*argmax)[std::size_t(s) * std::size_t(cols) + std::size_t(c)];
      if (am == -1 || v(i, c) > out(s, c)) {
        am = static_cast<std::int32_t>(i);
        out(s, c) = v(i, c);
      }
    }
  }
  return make_result<T>(std::move(out), {values}, [argmax, cols](Node<T>& self) {
    auto& dv = self.parents[0]->grad_buffer();
    for (Eigen::Index s = 0; s < self.grad.rows(); ++s) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        const std::int32_t src = (*argmax)[std::size_t(s) * std::size_t(cols) + std::size_t(c)];
        if (src >= 0) dv(src, c) += self.grad(s, c);
      }
    }
  }, "segment_max");
}

/// out_r = sum_j (w(r,j) + delta(r,j)) * values[idx(r,j)], absent indices skipped.
/// `delta` may be undefined, in which case it is treated as zero.
template <class T>
Tensor<T> weighted_gather(const Tensor<T>& values, std::shared_ptr<const InterpTable> table, const Tensor<T>& delta) {
  const bool has_delta = delta.defined();
  const int w = table->width;
  const Eigen::Index out_rows = Eigen::Index(table->out_rows);
  if (has_delta && (delta.rows() != out_rows || delta.cols() != w)) throw ShapeError("weighted_gather: delta shape mismatch");
  const auto& xv = values.value();
  Mat<T> out = Mat<T>::Zero(out_rows, xv.cols());
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    for (int j = 0; j < w; ++j) {
      const std::size_t slot = std::size_t(r) * std::size_t(w) + std::size_t(j);
      const std::int32_t src = table->index[slot];
      if (src == -1) continue;
      if (src >= xv.rows()) throw ShapeError("weighted_gather: index out of range");
      T coeff = static_cast<T>(table->weight[slot]);
      if (has_delta) coeff += delta.value()(r, j);
      out.row(r) += coeff * xv.row(src);
    }
  }
  auto backward = [table, has_delta](Node<T>& self) {
    const int w = table->width;
    const auto& xv = self.parents[0]->value;
    const bool want_x = self.parents[0]->requires_grad;
    const bool want_d = has_delta && self.parents[1]->requires_grad;
    Mat<T>* dx = want_x ? &self.parents[0]->grad_buffer() : nullptr;
    Mat<T>* dd = want_d ? &self.parents[1]->grad_buffer() : nullptr;
    for (std::size_t r = 0; r < table->out_rows; ++r) {
      for (int j = 0; j < w; ++j) {
        const std::size_t slot = r * std::size_t(w) + std::size_t(j);
        const std::int32_t src = table->index[slot];
        if (src == -1) continue;
        if (dx) {
          T coeff = static_cast<T>(table->weight[slot]);
          if (has_delta) coeff += self.parents[1]->value(Eigen::Index(r), j);
          dx->row(src) += coeff * self.grad.row(Eigen::Index(r));
        }
        if (dd) (*dd)(Eigen::Index(r), j) += self.grad.row(Eigen::Index(r)).dot(xv.row(src));
      }
    }
  };
  if (has_delta) return make_result<T>(std::move(out), {values, delta}, backward, "weighted_gather");
  return make_result<T>(std::move(out), {values}, backward, "weighted_gather");
}

/// Concatenates the rows values[idx(r,0)], ..., values[idx(r,w-1)] into one
/// row of width w*cols; absent indices yield zero blocks.
template <class T>
Tensor<T> gather_concat(const Tensor<T>& values, std::shared_ptr<const InterpTable> table) {
  const int w = table->width;
  const Eigen::Index c = values.cols();
  Mat<T> out = Mat<T>::Zero(Eigen::Index(table->out_rows), w * c);
  for (std::size_t r = 0; r < table->out_rows; ++r) {
    for (int j = 0; j < w; ++j) {
      const std::int32_t src = table->index[r * std::size_t(w) + std::size_t(j)];
      if (src == -1) continue;
      out.block(Eigen::Index(r), j * c, 1, c) = values.value().row(src);
    }
  }
  return make_result<T>(std::move(out), {values}, [table, c](Node<T>& self) {
    auto& dv = self.parents[0]->grad_buffer();
    const int w = table->width;
    for (std::size_t r = 0; r < table->out_rows; ++r) {
      for (int j = 0; j < w; ++j) {
        const std::int32_t src = table->index[r * std::size_t(w) + std::size_t(j)];
        if (src == -1) continue;
        dv.row(src) += self.grad.block(Eigen::Index(r), j * c, 1, c);
      }
    }
  }, "gather_concat");
}

/// Neighbor-weighted aggregation used by Abstract Flow:
///   w_i = (alpha - min(|x_v - h_i|, alpha)) * beta,   l_v = sum_i w_i h_i
/// over the present neighbors i of v listed in `neighbors` (taps = 2(d+1)).
template <class T>
Tensor<T> flow_aggregate(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& alpha, const Tensor<T>& beta,
                         std::shared_ptr<const GatherTable> neighbors) {
  detail::check_same_shape(x.rows(), x.cols(), h_prev.rows(), h_prev.cols(), "flow_aggregate");
  if (alpha.rows() != 1 || alpha.cols() != 1 || beta.rows() != 1 || beta.cols() != 1) {
    throw ShapeError("flow_aggregate: alpha and beta must be scalars");
  }
  if (static_cast<Eigen::Index>(neighbors->out_rows) != x.rows()) throw ShapeError("flow_aggregate: neighbor table rows differ");
  const T a = alpha.item();
  const T b = beta.item();
  const auto& xv = x.value();
  const auto& hv = h_prev.value();
  const int taps = neighbors->taps;
  Mat<T> out = Mat<T>::Zero(x.rows(), x.cols());
  for (Eigen::Index v = 0; v < x.rows(); ++v) {
    if (!neighbors->active[std::size_t(v)]) continue;
    for (int t = 0; t < taps; ++t) {
      const std::int32_t i = neighbors->at(std::size_t(v), t);
      if (i == -1) continue;
      const T dist = (xv.row(v) - hv.row(i)).norm();
      const T w = (a - std::min(dist, a)) * b;
      if (w != T(0)) out.row(v) += w * hv.row(i);
    }
  }
  return make_result<T>(std::move(out), {x, h_prev, alpha, beta}, [neighbors](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& hv = self.parents[1]->value;
    const T a = self.parents[2]->value(0, 0);
    const T b = self.parents[3]->value(0, 0);
    const bool want_x = self.parents[0]->requires_grad;
    const bool want_h = self.parents[1]->requires_grad;
    Mat<T>* dx = want_x ? &self.parents[0]->grad_buffer() : nullptr;
    Mat<T>* dh = want_h ? &self.parents[1]->grad_buffer() : nullptr;
    T da = T(0), db = T(0);
    for (Eigen::Index v = 0; v < xv.rows(); ++v) {
      if (!neighbors->active[std::size_t(v)]) continue;
      const auto g = self.grad.row(v);
      for (int t = 0; t < neighbors->taps; ++t) {
        const std::int32_t i = neighbors->at(std::size_t(v), t);
        if (i == -1) continue;
        const auto diff = (xv.row(v) - hv.row(i)).eval();
        const T dist = diff.norm();
        const T w = (a - std::min(dist, a)) * b;
        if (dh && w != T(0)) dh->row(i) += w * g;
        if (!(dist < a)) continue;  // clamped: weight is identically zero
        const T dw = g.dot(hv.row(i));
        da += dw * b;
        db += dw * (a - dist);
        if (dist > T(0)) {
          const auto ddist = ((-b * dw / dist) * diff).eval();
          if (dx) dx->row(v) += ddist;
          if (dh) dh->row(i) -= ddist;
        }
      }
    }
    if (self.parents[2]->requires_grad) self.parents[2]->grad_buffer()(0, 0) += da;
    if (self.parents[3]->requires_grad) self.parents[3]->grad_buffer()(0, 0) += db;
  }, "flow_aggregate");
}

/// Mean (optionally class-weighted) softmax cross-entropy over rows whose
/// label is not `ignore_label`. Returns an undefined tensor when every row is ignored.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels, std::int32_t ignore_label,
                        std::span<const double> class_weights = {}) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) throw ShapeError("cross_entropy: label count differs from logits rows");
  const Eigen::Index k = logits.cols();
  if (!class_weights.empty() && static_cast<Eigen::Index>(class_weights.size()) != k) {
    throw ShapeError("cross_entropy: class weight count differs from class count");
  }
  const auto& z = logits.value();
  Mat<T> probs(z.rows(), k);
  auto row_weight = std::make_shared<std::vector<T>>(labels.size(), T(0));
  auto targets = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  T total_weight = T(0);
  T loss = T(0);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const std::int32_t y = labels[std::size_t(r)];
    const T m = z.row(r).maxCoeff();
    const auto e = (z.row(r).array() - m).exp().eval();
    const T s = e.sum();
    probs.row(r) = (e / s).matrix();
    if (y == ignore_label) continue;
    if (y < 0 || y >= k) throw UserError("cross_entropy: label " + std::to_string(y) + " out of range");
    const T w = class_weights.empty() ? T(1) : static_cast<T>(class_weights[std::size_t(y)]);
    (*row_weight)[std::size_t(r)] = w;
    total_weight += w;
    loss += w * (std::log(s) + m - z(r, y));
  }
  if (total_weight <= T(0)) return Tensor<T>();
  Mat<T> value(1, 1);
  value(0, 0) = loss / total_weight;
  return make_result<T>(std::move(value), {logits},
                        [probs = std::move(probs), row_weight, targets, total_weight](Node<T>& self) {
    const T g = self.grad(0, 0) / total_weight;
    Mat<T> d = Mat<T>::Zero(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const T w = (*row_weight)[std::size_t(r)];
      if (w == T(0)) continue;
      d.row(r) = probs.row(r) * (w * g);
      d(r, (*targets)[std::size_t(r)]) -= w * g;
    }
    detail::accumulate<T>(self, 0, d);
  }, "cross_entropy");
}

}  // namespace ad
}  // namespace tlnet
