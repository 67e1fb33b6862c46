#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <ostream>
#include <vector>

#include "tlnet/binary_io.hpp"
#include "tlnet/error.hpp"
#include "tlnet/tensor.hpp"

namespace tlnet {

inline constexpr double kDefaultLearningRate = 1e-3;
inline constexpr double kDefaultWeightDecay = 1e-4;
inline constexpr double kDefaultRestartEpochs = 3.0;

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * progress / period)) / 2 for
/// progress in [0, period]; larger progress wraps around (warm restart).
inline double cosine_lr(double progress, double lr_max, double lr_min, double period) {
  if (!(period > 0.0)) throw UserError("cosine_lr: period must be positive");
  if (progress < 0.0) throw UserError("cosine_lr: progress must be non-negative");
  if (progress > period) progress = std::fmod(progress, period);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress / period));
}

/// Cosine annealing with warm restarts every `period_epochs` epochs.
struct CosineWarmRestarts {
  double lr_max = kDefaultLearningRate;
  double lr_min = 0.0;
  double period_epochs = kDefaultRestartEpochs;

  /// `epoch` is fractional: completed epochs plus progress through the current one.
  double lr_at(double epoch) const {
    const double progress = epoch - period_epochs * std::floor(epoch / period_epochs);
    return cosine_lr(progress, lr_max, lr_min, period_epochs);
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = kDefaultWeightDecay;
};

template <class T>
struct OptimState {
  std::vector<Mat<T>> first_moment;
  std::vector<Mat<T>> second_moment;
  std::uint64_t step = 0;
  std::uint64_t rejected_steps = 0;
  double epoch = 0.0;
};

/// Adam with decoupled weight decay:
///   p <- p - lr * wd * p,  then the bias-corrected Adam update.
/// A non-finite gradient anywhere rejects the whole step.
template <class T>
class Adam {
 public:
  explicit Adam(std::vector<ad::Tensor<T>> params, AdamConfig config = {})
      : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      state_.first_moment.push_back(Mat<T>::Zero(p.rows(), p.cols()));
      state_.second_moment.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    }
  }

  const AdamConfig& config() const { return config_; }
  OptimState<T>& state() { return state_; }
  const OptimState<T>& state() const { return state_; }
  std::vector<ad::Tensor<T>>& params() { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Returns false (and counts a rejection) when a gradient is non-finite.
  bool step(double lr) {
    for (const auto& p : params_) {
      if (p.has_grad() && !p.grad().allFinite()) {
        ++state_.rejected_steps;
        return false;
      }
    }
    ++state_.step;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(state_.step));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(state_.step));
    const T b1 = T(config_.beta1), b2 = T(config_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      Mat<T>& value = p.mutable_value();
      if (config_.weight_decay != 0.0) value *= T(1.0 - lr * config_.weight_decay);
      const Mat<T> g = p.grad();
      auto& m = state_.first_moment[i];
      auto& v = state_.second_moment[i];
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      const auto m_hat = (m.array() / T(bc1)).eval();
      const auto v_hat = (v.array() / T(bc2)).eval();
      value.array() -= T(lr) * m_hat / (v_hat.sqrt() + T(config_.eps));
    }
    return true;
  }

  void save_state(std::ostream& out) const {
    binary::put_u64(out, state_.step);
    binary::put_u64(out, state_.rejected_steps);
    binary::put_f64(out, state_.epoch);
    binary::put_u64(out, state_.first_moment.size());
    for (std::size_t i = 0; i < state_.first_moment.size(); ++i) {
      write_matrix(out, state_.first_moment[i]);
      write_matrix(out, state_.second_moment[i]);
    }
  }

  void load_state(std::istream& in) {
    OptimState<T> s;
    s.step = binary::get_u64(in, "optimizer step");
    s.rejected_steps = binary::get_u64(in, "optimizer rejected steps");
    s.epoch = binary::get_f64(in, "optimizer epoch");
    const auto count = binary::get_u64(in, "optimizer tensor count");
    if (count != params_.size()) throw FormatError("optimizer state has a different parameter count");
    for (std::size_t i = 0; i < count; ++i) {
      s.first_moment.push_back(read_matrix(in));
      s.second_moment.push_back(read_matrix(in));
      if (s.first_moment.back().rows() != params_[i].rows() || s.first_moment.back().cols() != params_[i].cols()) {
        throw FormatError("optimizer state moment shape differs from parameter " + std::to_string(i));
      }
    }
    state_ = std::move(s);
  }

 private:
  // Moments are stored at full double precision so a round-trip is exact for T=float and T=double.
  static void write_matrix(std::ostream& out, const Mat<T>& m) {
    binary::put_u64(out, std::uint64_t(m.rows()));
    binary::put_u64(out, std::uint64_t(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) binary::put_f64(out, double(m.data()[i]));
  }
  static Mat<T> read_matrix(std::istream& in) {
    const auto rows = binary::get_u64(in, "moment rows");
    const auto cols = binary::get_u64(in, "moment cols");
    if (rows * cols > (std::uint64_t(1) << 32)) throw FormatError("optimizer moment too large");
    Mat<T> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(binary::get_f64(in, "moment value"));
    return m;
  }

  std::vector<ad::Tensor<T>> params_;
  AdamConfig config_;
  OptimState<T> state_;
};

}  // namespace tlnet
