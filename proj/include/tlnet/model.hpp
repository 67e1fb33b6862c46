#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tlnet/binary_io.hpp"
#include "tlnet/lattice_ops.hpp"
#include "tlnet/optim.hpp"
#include "tlnet/temporal.hpp"

namespace tlnet {

// ---------------------------------------------------------------------------
// Fusion spec: four hyphen-separated slots (early, middle, bottleneck, late).
// ---------------------------------------------------------------------------

enum FusionSite : int { kEarly = 0, kMiddle = 1, kBottleneck = 2, kLate = 3 };
inline constexpr int kFusionSites = 4;

struct FusionSpec {
  std::array<FusionKind, kFusionSites> slots{FusionKind::kNone, FusionKind::kNone, FusionKind::kNone, FusionKind::kNone};

  static FusionSpec parse(std::string_view text) {
    FusionSpec spec;
    std::vector<std::string_view> tokens;
    std::size_t start = 0;
    while (true) {
      const std::size_t dash = text.find('-', start);
      tokens.push_back(text.substr(start, dash == std::string_view::npos ? std::string_view::npos : dash - start));
      if (dash == std::string_view::npos) break;
      start = dash + 1;
    }
    if (tokens.size() != kFusionSites) {
      throw UserError("fusion spec '" + std::string(text) + "' must have 4 hyphen-separated slots, got " +
                      std::to_string(tokens.size()));
    }
    for (int i = 0; i < kFusionSites; ++i) {
      const auto kind = parse_fusion_kind(tokens[std::size_t(i)]);
      if (!kind) {
        throw UserError("fusion spec '" + std::string(text) + "': unknown cell '" + std::string(tokens[std::size_t(i)]) +
                        "' (expected GRU, LSTM, AFlow or /)");
      }
      spec.slots[std::size_t(i)] = *kind;
    }
    return spec;
  }

  FusionKind operator[](int site) const { return slots[std::size_t(site)]; }
  bool any() const {
    for (auto k : slots) {
      if (k != FusionKind::kNone) return true;
    }
    return false;
  }

  std::string str() const {
    std::string out;
    for (int i = 0; i < kFusionSites; ++i) {
      if (i) out += '-';
      out += fusion_name(slots[std::size_t(i)]);
    }
    return out;
  }
};

struct ModelConfig {
  int dim = 3;
  int feature_dim = 1;
  int num_classes = 6;
  std::array<int, 3> widths{16, 32, 64};
  int slice_hidden = 16;
  std::uint64_t seed = 0;
  FusionSpec fusion = FusionSpec::parse("GRU-GRU-AFlow-GRU");

  nlohmann::json to_json() const {
    return {{"dim", dim},
            {"feature_dim", feature_dim},
            {"num_classes", num_classes},
            {"widths", widths},
            {"slice_hidden", slice_hidden},
            {"seed", seed},
            {"fusion", fusion.str()}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.at("dim").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.widths = j.at("widths").get<std::array<int, 3>>();
    c.slice_hidden = j.at("slice_hidden").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.fusion = FusionSpec::parse(j.at("fusion").get<std::string>());
    return c;
  }
};

template <class T>
struct FusionParams {
  FusionKind kind = FusionKind::kNone;
  GruParams<T> gru;
  LstmParams<T> lstm;
  AFlowParams<T> aflow;
};

/// Per-sequence recurrent state: the shared lattices of all three levels,
/// the coarse key maps, and one hidden state per fusion site.
template <class T>
struct SequenceState {
  std::string sequence_id;
  std::size_t timestep = 0;
  std::array<SparseLattice, 3> lattices;
  std::vector<std::int32_t> map01, map12;
  std::array<TemporalState<T>, kFusionSites> sites;
  std::array<Mat<double>, 3> centroids;  // latest known centroid per vertex

  explicit SequenceState(int dim = 3) : lattices{SparseLattice(dim), SparseLattice(dim), SparseLattice(dim)} {}
  bool empty() const { return timestep == 0; }
};

/// Optional per-step diagnostics.
struct StepTrace {
  std::array<std::size_t, 3> vertex_counts{};
  std::array<std::size_t, 3> active_counts{};
  /// Site -> (previous-count at fusion, current count); recorded only when fusion ran.
  std::array<std::optional<std::pair<std::size_t, std::size_t>>, kFusionSites> alignment{};
  /// Per-vertex AFlow directions for AFlow sites, with their centroids (scaled units).
  std::array<Mat<double>, kFusionSites> flow_direction;
  std::array<Mat<double>, kFusionSites> flow_origin;
  std::array<ActiveMask, kFusionSites> flow_active;
  Mat<double> last_point_features;
};

template <class T>
class Model {
 public:
  explicit Model(ModelConfig config) : config_(std::move(config)) { init(); }

  const ModelConfig& config() const { return config_; }

  std::vector<std::pair<std::string, ad::Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, ad::Tensor<T>>> out;
    auto lin = [&](const std::string& name, const LinearParams<T>& p) {
      out.emplace_back(name + ".weight", p.weight);
      out.emplace_back(name + ".bias", p.bias);
    };
    auto conv = [&](const std::string& name, const ConvParams<T>& p) {
      out.emplace_back(name + ".weight", p.weight);
      out.emplace_back(name + ".bias", p.bias);
    };
    auto res = [&](const std::string& name, const ResnetParams<T>& p) {
      conv(name + ".conv1", p.conv1);
      conv(name + ".conv2", p.conv2);
    };
    lin("pointnet", pointnet_);
    static constexpr const char* kSiteNames[] = {"fusion_early", "fusion_middle", "fusion_bottleneck", "fusion_late"};
    for (int s = 0; s < kFusionSites; ++s) {
      const auto& f = fusion_[std::size_t(s)];
      const std::string name = kSiteNames[s];
      switch (f.kind) {
        case FusionKind::kGru:
          lin(name + ".gates", f.gru.gates);
          lin(name + ".candidate", f.gru.candidate);
          break;
        case FusionKind::kLstm:
          lin(name + ".gates", f.lstm.gates);
          break;
        case FusionKind::kAFlow:
          out.emplace_back(name + ".alpha", f.aflow.alpha);
          out.emplace_back(name + ".beta", f.aflow.beta);
          lin(name + ".fuse", f.aflow.fuse);
          break;
        case FusionKind::kNone:
          break;
      }
    }
    res("res0a", res0a_);
    res("res0b", res0b_);
    conv("down1", down1_);
    res("res1", res1_);
    conv("down2", down2_);
    res("res2", res2_);
    lin("reduce1", reduce1_);
    res("res_up1", res_up1_);
    lin("reduce0", reduce0_);
    res("res_late", res_late_);
    lin("deform_slice.hidden", deform_.hidden);
    lin("deform_slice.offsets", deform_.offsets);
    lin("classifier", classifier_);
    return out;
  }

  std::vector<ad::Tensor<T>> parameters() const {
    std::vector<ad::Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::vector<std::pair<std::string, ad::Tensor<T>>> fusion_parameters() const {
    std::vector<std::pair<std::string, ad::Tensor<T>>> out;
    for (auto& [name, t] : named_parameters()) {
      if (name.rfind("fusion_", 0) == 0) out.emplace_back(name, t);
    }
    return out;
  }

  /// Processes one cloud against the running state. Returns logits for its
  /// points when `want_logits` is set, otherwise stops after the last
  /// enabled fusion site.
  ad::Tensor<T> step(SequenceState<T>& state, const PointCloud& cloud, bool want_logits, StepTrace* trace = nullptr) const {
    if (cloud.size() > 0 && cloud.dim() != config_.dim) throw ShapeError("model: cloud dimension differs from model");
    if (cloud.feature_dim() != config_.feature_dim && !(cloud.size() == 0)) {
      throw ShapeError("model: cloud has " + std::to_string(cloud.feature_dim()) + " feature channels, model expects " +
                       std::to_string(config_.feature_dim));
    }
    auto& L0 = state.lattices[0];
    auto& L1 = state.lattices[1];
    auto& L2 = state.lattices[2];
    const Distribution dist = distribute(cloud, L0);
    extend_coarse(L0, L1, state.map01);
    extend_coarse(L1, L2, state.map12);
    const ActiveMask& active0 = dist.active;
    const ActiveMask active1 = coarse_active(state.map01, active0, L1.size());
    const ActiveMask active2 = coarse_active(state.map12, active1, L2.size());
    const std::array<const ActiveMask*, 3> active{&active0, &active1, &active2};

    std::array<Mat<double>, 3> previous_centroids;
    update_centroids(state, dist, active1, active2, previous_centroids);

    if (trace) {
      for (int l = 0; l < 3; ++l) {
        trace->vertex_counts[std::size_t(l)] = state.lattices[std::size_t(l)].size();
        trace->active_counts[std::size_t(l)] = count_active(*active[std::size_t(l)]);
      }
    }

    int last_site = -1;
    for (int s = 0; s < kFusionSites; ++s) {
      if (config_.fusion[s] != FusionKind::kNone) last_site = s;
    }
    auto done = [&](int site) { return !want_logits && site >= last_site; };

    const auto conv0 = conv_table(L0, &active0);
    auto mask0 = std::make_shared<const ActiveMask>(active0);

    auto fuse = [&](int site, const ad::Tensor<T>& x, int level) -> ad::Tensor<T> {
      return fuse_site(state, site, x, state.lattices[std::size_t(level)], *active[std::size_t(level)],
                       previous_centroids[std::size_t(level)], trace);
    };

    ad::Tensor<T> x0 = pointnet_aggregate(dist, pointnet_);
    x0 = fuse(kEarly, x0, 0);
    if (done(kEarly)) return finish(state);
    x0 = resnet_block(x0, res0a_, conv0);
    x0 = resnet_block(x0, res0b_, conv0);
    x0 = fuse(kMiddle, x0, 0);
    if (done(kMiddle)) return finish(state);
    const ad::Tensor<T> skip0 = x0;

    ad::Tensor<T> x1 = downsample(x0, down1_, downsample_table(L0, L1, &active0, &active1));
    const auto conv1 = conv_table(L1, &active1);
    x1 = resnet_block(x1, res1_, conv1);
    const ad::Tensor<T> skip1 = x1;

    ad::Tensor<T> x2 = downsample(x1, down2_, downsample_table(L1, L2, &active1, &active2));
    x2 = resnet_block(x2, res2_, conv_table(L2, &active2));
    x2 = fuse(kBottleneck, x2, 2);
    if (done(kBottleneck)) return finish(state);

    auto mask1 = std::make_shared<const ActiveMask>(active1);
    ad::Tensor<T> u1 = upsample(x2, upsample_table(L2, L1.keys(), &active2, &active1));
    x1 = ad::mask_rows(reduce1_(ad::relu(ad::concat_cols(u1, skip1))), mask1);
    x1 = resnet_block(x1, res_up1_, conv1);

    ad::Tensor<T> u0 = upsample(x1, upsample_table(L1, L0.keys(), &active1, &active0));
    x0 = ad::mask_rows(reduce0_(ad::relu(ad::concat_cols(u0, skip0))), mask0);
    x0 = fuse(kLate, x0, 0);
    if (done(kLate)) return finish(state);
    x0 = resnet_block(x0, res_late_, conv0);

    auto point_features = deform_slice(x0, slice_table(dist), deform_);
    if (trace) trace->last_point_features = point_features.value().template cast<double>();
    auto logits = classifier_(point_features);
    finish(state);
    return logits;
  }

  /// Logits for the last cloud of a sequence processed from an empty state.
  ad::Tensor<T> forward_sequence(std::span<const PointCloud> clouds, SequenceState<T>* final_state = nullptr,
                                 StepTrace* last_trace = nullptr) const {
    if (clouds.empty()) throw UserError("forward_sequence: empty cloud list");
    SequenceState<T> state(config_.dim);
    ad::Tensor<T> logits;
    for (std::size_t t = 0; t < clouds.size(); ++t) {
      const bool last = t + 1 == clouds.size();
      logits = step(state, clouds[t], last, last ? last_trace : nullptr);
    }
    if (final_state) *final_state = std::move(state);
    return logits;
  }

  /// One recursive inference step: consumes `cloud`, returns its logits and
  /// leaves detached hidden states in `state`.
  ad::Tensor<T> infer_step(SequenceState<T>& state, const PointCloud& cloud, const std::string& sequence_id = {},
                           StepTrace* trace = nullptr) const {
    if (!state.empty() && state.sequence_id != sequence_id) {
      throw UserError("infer_step: state belongs to sequence '" + state.sequence_id + "', got '" + sequence_id + "'");
    }
    state.sequence_id = sequence_id;
    auto logits = step(state, cloud, true, trace);
    for (auto& site : state.sites) {
      if (site.hidden.defined()) site.hidden = site.hidden.detach();
      if (site.cell.defined()) site.cell = site.cell.detach();
    }
    return logits.detach();
  }

  // ---- checkpoints --------------------------------------------------------
  //
  // Layout: "TLNC" | u64 manifest length | manifest JSON | parameter blobs.
  // Each blob: u64 rows, u64 cols, rows*cols f32 row-major (little-endian).

  void save(std::ostream& out, const nlohmann::json& extra = {}) const {
    nlohmann::json manifest;
    manifest["format"] = "tlnet-checkpoint";
    manifest["version"] = 1;
    manifest["fusion"] = config_.fusion.str();
    manifest["config"] = config_.to_json();
    if (!extra.is_null()) manifest["extra"] = extra;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : named_parameters()) {
      manifest["params"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
      offset += 16 + 4 * std::uint64_t(t.rows() * t.cols());
    }
    const std::string text = manifest.dump();
    out.write("TLNC", 4);
    binary::put_u64(out, text.size());
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, t] : named_parameters()) {
      binary::put_u64(out, std::uint64_t(t.rows()));
      binary::put_u64(out, std::uint64_t(t.cols()));
      for (Eigen::Index i = 0; i < t.value().size(); ++i) binary::put_f32(out, float(t.value().data()[i]));
    }
  }

  void save(const std::string& path, const nlohmann::json& extra = {}) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UserError("cannot write checkpoint " + path);
    save(out, extra);
  }

  static nlohmann::json read_manifest(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string_view(magic, 4) != "TLNC") throw FormatError("not a tlnet checkpoint (bad magic)");
    const auto len = binary::get_u64(in, "checkpoint manifest length");
    if (len > (1u << 26)) throw FormatError("checkpoint manifest too large");
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    if (!in) throw FormatError("truncated checkpoint manifest");
    return nlohmann::json::parse(text);
  }

  static Model load(std::istream& in, nlohmann::json* manifest_out = nullptr) {
    const auto manifest = read_manifest(in);
    Model model(ModelConfig::from_json(manifest.at("config")));
    auto params = model.named_parameters();
    const auto& listed = manifest.at("params");
    if (listed.size() != params.size()) throw FormatError("checkpoint parameter count differs from the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      if (listed[i].at("name").get<std::string>() != name) throw FormatError("checkpoint parameter order differs at " + name);
      const auto rows = binary::get_u64(in, "parameter rows");
      const auto cols = binary::get_u64(in, "parameter cols");
      if (Eigen::Index(rows) != t.rows() || Eigen::Index(cols) != t.cols()) throw FormatError("checkpoint shape mismatch for " + name);
      for (Eigen::Index k = 0; k < t.value().size(); ++k) t.mutable_value().data()[k] = T(binary::get_f32(in, "parameter value"));
    }
    if (manifest_out) *manifest_out = manifest;
    return model;
  }

  static Model load(const std::string& path, nlohmann::json* manifest_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UserError("cannot open checkpoint " + path);
    return load(in, manifest_out);
  }

 private:
  void init() {
    if (config_.num_classes < 1) throw UserError("model: num_classes must be positive");
    for (int w : config_.widths) {
      if (w < 1) throw UserError("model: channel widths must be positive");
    }
    std::mt19937_64 rng(config_.seed);
    const int d = config_.dim;
    const int taps = conv_taps(d);
    const auto [c0, c1, c2] = config_.widths;
    pointnet_ = LinearParams<T>::init(d + config_.feature_dim, c0, rng);
    const std::array<int, kFusionSites> site_width{c0, c0, c2, c0};
    for (int s = 0; s < kFusionSites; ++s) {
      auto& f = fusion_[std::size_t(s)];
      f.kind = config_.fusion[s];
      const int c = site_width[std::size_t(s)];
      if (f.kind == FusionKind::kGru) f.gru = GruParams<T>::init(c, rng);
      if (f.kind == FusionKind::kLstm) f.lstm = LstmParams<T>::init(c, rng);
      if (f.kind == FusionKind::kAFlow) f.aflow = AFlowParams<T>::init(c, rng);
    }
    res0a_ = ResnetParams<T>::init(taps, c0, rng);
    res0b_ = ResnetParams<T>::init(taps, c0, rng);
    down1_ = ConvParams<T>::init(taps, c0, c1, rng);
    res1_ = ResnetParams<T>::init(taps, c1, rng);
    down2_ = ConvParams<T>::init(taps, c1, c2, rng);
    res2_ = ResnetParams<T>::init(taps, c2, rng);
    reduce1_ = LinearParams<T>::init(c2 + c1, c1, rng);
    res_up1_ = ResnetParams<T>::init(taps, c1, rng);
    reduce0_ = LinearParams<T>::init(c1 + c0, c0, rng);
    res_late_ = ResnetParams<T>::init(taps, c0, rng);
    deform_ = DeformSliceParams<T>::init(d + 1, c0, config_.slice_hidden, rng);
    classifier_ = LinearParams<T>::init(c0, config_.num_classes, rng, 0.5);
  }

  static std::size_t count_active(const ActiveMask& m) {
    std::size_t n = 0;
    for (auto a : m) n += a;
    return n;
  }

  ad::Tensor<T> finish(SequenceState<T>& state) const {
    ++state.timestep;
    return {};
  }

  void update_centroids(SequenceState<T>& state, const Distribution& dist, const ActiveMask& active1,
                        const ActiveMask& active2, std::array<Mat<double>, 3>& previous) const {
    const int d = config_.dim;
    std::array<Mat<double>, 3> current;
    current[0] = dist.centroids;
    auto pool = [&](const Mat<double>& fine, const ActiveMask& fine_active, const std::vector<std::int32_t>& map,
                    std::size_t coarse_size) {
      Mat<double> out = Mat<double>::Zero(Eigen::Index(coarse_size), d);
      std::vector<int> counts(coarse_size, 0);
      for (std::size_t r = 0; r < fine_active.size(); ++r) {
        if (!fine_active[r]) continue;
        out.row(map[r]) += fine.row(Eigen::Index(r));
        ++counts[std::size_t(map[r])];
      }
      for (std::size_t c = 0; c < coarse_size; ++c) {
        if (counts[c]) out.row(Eigen::Index(c)) /= double(counts[c]);
      }
      return out;
    };
    current[1] = pool(current[0], dist.active, state.map01, state.lattices[1].size());
    current[2] = pool(current[1], active1, state.map12, state.lattices[2].size());
    const std::array<const ActiveMask*, 3> active{&dist.active, &active1, &active2};
    for (std::size_t l = 0; l < 3; ++l) {
      Mat<double>& latest = state.centroids[l];
      const Eigen::Index old_rows = latest.rows();
      Mat<double> grown = Mat<double>::Zero(current[l].rows(), d);
      if (old_rows > 0) grown.topRows(old_rows) = latest;
      previous[l] = grown;
      for (Eigen::Index r = 0; r < grown.rows(); ++r) {
        if ((*active[l])[std::size_t(r)]) grown.row(r) = current[l].row(r);
      }
      latest = std::move(grown);
    }
  }

  ad::Tensor<T> fuse_site(SequenceState<T>& state, int site, const ad::Tensor<T>& x, const SparseLattice& lattice,
                          const ActiveMask& active, const Mat<double>& previous_centroids, StepTrace* trace) const {
    const auto& params = fusion_[std::size_t(site)];
    if (params.kind == FusionKind::kNone) return x;
    auto& st = state.sites[std::size_t(site)];
    const std::size_t k = lattice.size();
    ad::Tensor<T> hidden, cell;
    if (st.empty()) {
      hidden = x;
      if (params.kind == FusionKind::kLstm) cell = ad::Tensor<T>::zeros(x.rows(), x.cols());
    } else {
      const ad::Tensor<T> h_prev = align_states(st, k);
      if (trace) trace->alignment[std::size_t(site)] = std::make_pair(st.vertex_count_at_write, k);
      switch (params.kind) {
        case FusionKind::kGru:
          hidden = gru_fuse(h_prev, x, params.gru);
          break;
        case FusionKind::kLstm: {
          auto out = lstm_fuse(h_prev, align_cell(st, k), x, params.lstm);
          hidden = out.hidden;
          cell = out.cell;
          break;
        }
        case FusionKind::kAFlow: {
          auto neighbors = flow_neighbor_table(lattice, st.vertex_count_at_write);
          hidden = aflow_fuse(h_prev, x, params.aflow, neighbors);
          if (trace) {
            trace->flow_direction[std::size_t(site)] =
                aflow_direction(*neighbors, h_prev.value(), x.value(), state.centroids[level_of(site)], previous_centroids);
            trace->flow_origin[std::size_t(site)] = state.centroids[level_of(site)];
            trace->flow_active[std::size_t(site)] = active;
          }
          break;
        }
        case FusionKind::kNone:
          break;
      }
    }
    st.hidden = hidden;
    st.cell = cell;
    st.vertex_count_at_write = k;
    return ad::mask_rows(hidden, std::make_shared<const ActiveMask>(active));
  }

  static std::size_t level_of(int site) { return site == kBottleneck ? 2 : 0; }

  ModelConfig config_;
  LinearParams<T> pointnet_;
  std::array<FusionParams<T>, kFusionSites> fusion_;
  ResnetParams<T> res0a_, res0b_, res1_, res2_, res_up1_, res_late_;
  ConvParams<T> down1_, down2_;
  LinearParams<T> reduce1_, reduce0_;
  DeformSliceParams<T> deform_;
  LinearParams<T> classifier_;
};

/// Row-wise argmax.
template <class T>
std::vector<std::int32_t> predict_labels(const Mat<T>& logits) {
  std::vector<std::int32_t> out(std::size_t(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best;
    logits.row(r).maxCoeff(&best);
    out[std::size_t(r)] = static_cast<std::int32_t>(best);
  }
  return out;
}

struct TrainStepResult {
  double loss = 0.0;
  bool skipped = false;
  bool rejected = false;
};

/// BPTT over all clouds, cross-entropy on the last cloud's labels, one optimizer step.
template <class T>
TrainStepResult training_step(const Model<T>& model, Adam<T>& optimizer, std::span<const PointCloud> clouds, double lr,
                              std::span<const double> class_weights = {}) {
  if (clouds.empty()) throw UserError("training_step: empty cloud list");
  const auto& labels = clouds.back().labels;
  if (labels.size() != clouds.back().size()) throw ShapeError("training_step: last cloud needs one label per point");
  TrainStepResult result;
  optimizer.zero_grad();
  auto logits = model.forward_sequence(clouds);
  auto loss = ad::cross_entropy(logits, labels, kIgnoreLabel, class_weights);
  if (!loss.defined()) {
    std::cerr << "warning: training step skipped, every point of the last cloud is ignored\n";
    result.skipped = true;
    return result;
  }
  result.loss = double(loss.item());
  ad::backward(loss);
  result.rejected = !optimizer.step(lr);
  return result;
}

}  // namespace tlnet
