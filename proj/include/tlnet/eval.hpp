#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tlnet/data_io.hpp"
#include "tlnet/error.hpp"
#include "tlnet/point_cloud.hpp"

namespace tlnet {

/// K x K counts, rows = ground truth, cols = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0) : k_(num_classes), counts_(std::size_t(num_classes) * std::size_t(num_classes), 0) {
    if (num_classes < 0) throw UserError("confusion matrix: negative class count");
  }

  int num_classes() const { return k_; }
  std::uint64_t at(int truth, int pred) const { return counts_[index(truth, pred)]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Ground-truth kIgnoreLabel points are skipped; any other out-of-range id is rejected.
  void accumulate(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
    if (predictions.size() != labels.size()) {
      throw ShapeError("accumulate: " + std::to_string(predictions.size()) + " predictions for " +
                       std::to_string(labels.size()) + " labels");
    }
    // validate first so a bad id leaves the matrix untouched
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kIgnoreLabel) continue;
      if (labels[i] < 0 || labels[i] >= k_) {
        throw UserError("accumulate: label " + std::to_string(labels[i]) + " out of range at index " + std::to_string(i));
      }
      if (predictions[i] < 0 || predictions[i] >= k_) {
        throw UserError("accumulate: prediction " + std::to_string(predictions[i]) + " out of range at index " +
                        std::to_string(i));
      }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kIgnoreLabel) continue;
      ++counts_[index(labels[i], predictions[i])];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t true_positives(int c) const { return at(c, c); }
  std::uint64_t false_positives(int c) const {
    std::uint64_t s = 0;
    for (int t = 0; t < k_; ++t) {
      if (t != c) s += at(t, c);
    }
    return s;
  }
  std::uint64_t false_negatives(int c) const {
    std::uint64_t s = 0;
    for (int p = 0; p < k_; ++p) {
      if (p != c) s += at(c, p);
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (int t = 0; t < k_; ++t) {
      std::vector<std::uint64_t> row(counts_.begin() + std::ptrdiff_t(t) * k_, counts_.begin() + std::ptrdiff_t(t + 1) * k_);
      rows.push_back(row);
    }
    return rows;
  }

 private:
  std::size_t index(int truth, int pred) const {
    if (truth < 0 || truth >= k_ || pred < 0 || pred >= k_) throw UserError("confusion matrix: class id out of range");
    return std::size_t(truth) * std::size_t(k_) + std::size_t(pred);
  }

  int k_;
  std::vector<std::uint64_t> counts_;
};

struct IouReport {
  std::vector<std::optional<double>> per_class;  // nullopt: absent (zero denominator)
  std::optional<double> mean;                    // nullopt: every class absent

  std::size_t present() const {
    std::size_t n = 0;
    for (const auto& v : per_class) n += v.has_value();
    return n;
  }
};

inline IouReport iou(const ConfusionMatrix& cm) {
  IouReport r;
  double sum = 0.0;
  std::size_t n = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const std::uint64_t tp = cm.true_positives(c);
    const std::uint64_t denom = tp + cm.false_positives(c) + cm.false_negatives(c);
    if (denom == 0) {
      r.per_class.push_back(std::nullopt);
      continue;
    }
    const double v = double(tp) / double(denom);
    r.per_class.push_back(v);
    sum += v;
    ++n;
  }
  if (n > 0) r.mean = sum / double(n);
  return r;
}

struct GroupReport {
  std::vector<std::string> names;
  std::vector<bool> moving;
  IouReport iou;
  std::optional<double> static_mean;
  std::optional<double> moving_mean;
  std::size_t static_classes = 0;
  std::size_t moving_classes = 0;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t c = 0; c < names.size(); ++c) {
      classes.push_back({{"name", names[c]}, {"moving", bool(moving[c])}, {"iou", opt(iou.per_class[c])}});
    }
    return {{"classes", classes},
            {"miou", opt(iou.mean)},
            {"static_miou", opt(static_mean)},
            {"moving_miou", opt(moving_mean)},
            {"static_classes", static_classes},
            {"moving_classes", moving_classes}};
  }

  std::string to_text() const {
    std::size_t width = 7;
    for (const auto& n : names) width = std::max(width, n.size());
    auto fmt = [](const std::optional<double>& v) {
      if (!v) return std::string("absent");
      std::ostringstream s;
      s << std::fixed << std::setprecision(1) << 100.0 * *v;
      return s.str();
    };
    std::ostringstream out;
    out << std::left << std::setw(int(width)) << "class" << "  " << std::setw(6) << "group" << "  " << std::right
        << std::setw(6) << "IoU" << '\n';
    for (std::size_t c = 0; c < names.size(); ++c) {
      out << std::left << std::setw(int(width)) << names[c] << "  " << std::setw(6) << (moving[c] ? "moving" : "static")
          << "  " << std::right << std::setw(6) << fmt(iou.per_class[c]) << '\n';
    }
    out << std::left << std::setw(int(width)) << "static" << "  " << std::setw(6) << "mean" << "  " << std::right
        << std::setw(6) << (static_classes ? fmt(static_mean) : std::string("empty")) << '\n';
    out << std::left << std::setw(int(width)) << "moving" << "  " << std::setw(6) << "mean" << "  " << std::right
        << std::setw(6) << (moving_classes ? fmt(moving_mean) : std::string("empty")) << '\n';
    out << std::left << std::setw(int(width)) << "all" << "  " << std::setw(6) << "mIoU" << "  " << std::right
        << std::setw(6) << fmt(iou.mean) << '\n';
    return out.str();
  }
};

/// Static / moving / overall means. Absent classes are left out of every mean;
/// `static_classes`/`moving_classes` count group members by metadata.
inline GroupReport moving_static_report(const ConfusionMatrix& cm, const std::vector<ClassInfo>& classes) {
  if (int(classes.size()) != cm.num_classes()) throw ShapeError("moving_static_report: metadata size differs from class count");
  GroupReport r;
  r.iou = iou(cm);
  double sums[2] = {0.0, 0.0};
  std::size_t present[2] = {0, 0};
  for (std::size_t c = 0; c < classes.size(); ++c) {
    r.names.push_back(classes[c].name);
    r.moving.push_back(classes[c].moving);
    const int g = classes[c].moving ? 1 : 0;
    (g ? r.moving_classes : r.static_classes) += 1;
    if (r.iou.per_class[c]) {
      sums[g] += *r.iou.per_class[c];
      ++present[g];
    }
  }
  if (present[0]) r.static_mean = sums[0] / double(present[0]);
  if (present[1]) r.moving_mean = sums[1] / double(present[1]);
  return r;
}

/// Moving-vs-static agreement restricted to points whose ground-truth class is
/// in `restrict_to` (all non-ignored points when empty).
struct BinaryCount {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

inline void accumulate_moving_static(BinaryCount& count, std::span<const std::int32_t> predictions,
                                     std::span<const std::int32_t> labels, const std::vector<ClassInfo>& classes,
                                     const std::vector<int>& restrict_to = {}) {
  if (predictions.size() != labels.size()) throw ShapeError("binary accuracy: length mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = labels[i];
    if (y == kIgnoreLabel) continue;
    if (y < 0 || std::size_t(y) >= classes.size()) throw UserError("binary accuracy: label out of range at index " + std::to_string(i));
    if (!restrict_to.empty() && std::find(restrict_to.begin(), restrict_to.end(), y) == restrict_to.end()) continue;
    const auto p = predictions[i];
    if (p < 0 || std::size_t(p) >= classes.size()) throw UserError("binary accuracy: prediction out of range at index " + std::to_string(i));
    count.correct += classes[std::size_t(y)].moving == classes[std::size_t(p)].moving;
    ++count.total;
  }
}

}  // namespace tlnet
