#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tlnet/data_io.hpp"
#include "tlnet/eval.hpp"
#include "tlnet/fixtures.hpp"
#include "tlnet/gradcheck.hpp"
#include "tlnet/model.hpp"
#include "tlnet/optim.hpp"
#include "tlnet/ply.hpp"

namespace tlnet::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInvariant = 2;

struct RunConfig {
  std::string subcommand;
  std::string data;
  std::string out = "run";
  std::string fusion = "GRU-GRU-AFlow-GRU";
  int n = 4;
  int s = 3;
  double sigma = 0.6;
  std::array<int, 3> widths{16, 32, 64};
  int slice_hidden = 16;
  int epochs = 10;
  std::uint64_t seed = 0;
  bool use_reflectance = true;
  std::string checkpoint;
  double lr = kDefaultLearningRate;
  double weight_decay = kDefaultWeightDecay;
  double restart_epochs = kDefaultRestartEpochs;
  bool augment = true;
  double translation = 2.0;
  double noise = 0.01;
  int steps_per_epoch = 0;  // 0: one pass over the training split
  int max_val_samples = 0;  // 0: whole split
  std::vector<std::string> train_sequences;
  std::vector<std::string> val_sequences;
  std::vector<double> class_weights;
  std::string predictions;
  int reset_every = 0;
  bool export_ply = false;
  bool export_flow = false;

  nlohmann::json to_json() const {
    return {{"subcommand", subcommand},
            {"data", data},
            {"out", out},
            {"fusion", fusion},
            {"n", n},
            {"s", s},
            {"sigma", sigma},
            {"widths", widths},
            {"slice_hidden", slice_hidden},
            {"epochs", epochs},
            {"seed", seed},
            {"use_reflectance", use_reflectance},
            {"checkpoint", checkpoint},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"restart_epochs", restart_epochs},
            {"augment", augment},
            {"translation", translation},
            {"noise", noise},
            {"steps_per_epoch", steps_per_epoch},
            {"max_val_samples", max_val_samples},
            {"train_sequences", train_sequences},
            {"val_sequences", val_sequences},
            {"class_weights", class_weights},
            {"predictions", predictions},
            {"reset_every", reset_every},
            {"export_ply", export_ply},
            {"export_flow", export_flow}};
  }

  /// Overwrites fields present in `j`; unknown keys are rejected.
  void merge(const nlohmann::json& j) {
    if (!j.is_object()) throw UserError("config file must hold a JSON object");
    const nlohmann::json known = to_json();
    for (auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw UserError("config file: unknown key '" + key + "'");
    }
    try {
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
      };
      get("data", data);
      get("out", out);
      get("fusion", fusion);
      get("n", n);
      get("s", s);
      get("sigma", sigma);
      get("widths", widths);
      get("slice_hidden", slice_hidden);
      get("epochs", epochs);
      get("seed", seed);
      get("use_reflectance", use_reflectance);
      get("checkpoint", checkpoint);
      get("lr", lr);
      get("weight_decay", weight_decay);
      get("restart_epochs", restart_epochs);
      get("augment", augment);
      get("translation", translation);
      get("noise", noise);
      get("steps_per_epoch", steps_per_epoch);
      get("max_val_samples", max_val_samples);
      get("train_sequences", train_sequences);
      get("val_sequences", val_sequences);
      get("class_weights", class_weights);
      get("predictions", predictions);
      get("reset_every", reset_every);
      get("export_ply", export_ply);
      get("export_flow", export_flow);
    } catch (const nlohmann::json::exception& e) {
      throw UserError(std::string("config file: ") + e.what());
    }
  }

  SequenceConfig sequence() const {
    SequenceConfig c;
    c.n = n;
    c.s = s;
    c.sigma = sigma;
    c.use_reflectance = use_reflectance;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string epoch_name(int epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
  return s.str();
}

inline nlohmann::json checkpoint_extra(const RunConfig& rc, const Dataset* ds) {
  nlohmann::json extra = {{"n", rc.n}, {"s", rc.s}, {"sigma", rc.sigma}, {"use_reflectance", rc.use_reflectance}};
  if (ds) {
    extra["label_map"] = ds->label_map.to_json();
    for (const auto& c : ds->classes) extra["classes"].push_back({{"name", c.name}, {"moving", c.moving}});
  }
  return extra;
}

inline std::vector<ClassInfo> classes_from_json(const nlohmann::json& j) {
  std::vector<ClassInfo> out;
  for (const auto& c : j) out.push_back({c.at("name"), c.at("moving")});
  return out;
}

struct SampleRef {
  std::size_t sequence;
  std::size_t anchor;
};

inline std::vector<SampleRef> sample_refs(const std::vector<SequenceFiles>& split, const SequenceConfig& seq, std::size_t* skipped) {
  std::vector<SampleRef> refs;
  std::size_t missing = 0;
  for (std::size_t q = 0; q < split.size(); ++q) {
    for (std::size_t t = 0; t < split[q].scans.size(); ++t) {
      if (sequence_indices(t, seq.n, seq.s)) {
        refs.push_back({q, t});
      } else {
        ++missing;
      }
    }
  }
  if (skipped) *skipped = missing;
  return refs;
}

/// Confusion matrix of `model` on up to `limit` samples of `split`.
inline ConfusionMatrix evaluate_split(const Model<float>& model, const Dataset& ds, const std::vector<SequenceFiles>& split,
                                      const SequenceConfig& seq, int limit) {
  ConfusionMatrix cm(ds.num_classes());
  auto refs = sample_refs(split, seq, nullptr);
  if (limit > 0 && refs.size() > std::size_t(limit)) {
    // evenly spaced subset, deterministic
    std::vector<SampleRef> picked;
    for (int i = 0; i < limit; ++i) picked.push_back(refs[refs.size() * std::size_t(i) / std::size_t(limit)]);
    refs = std::move(picked);
  }
  ad::NoGradGuard guard;
  for (const auto& r : refs) {
    auto sample = ds.sample(split[r.sequence], r.anchor, seq);
    if (!sample || sample->clouds.back().labels.empty()) continue;
    auto logits = model.forward_sequence(std::span<const PointCloud>(sample->clouds));
    cm.accumulate(predict_labels(logits.value()), sample->clouds.back().labels);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int cmd_train(const RunConfig& rc) {
  if (rc.data.empty()) throw UserError("train: --data is required");
  if (rc.epochs < 0) throw UserError("train: --epochs must be >= 0");
  const SequenceConfig seq = rc.sequence();
  const Dataset ds = Dataset::open(rc.data, rc.train_sequences, rc.val_sequences);
  if (!rc.class_weights.empty() && int(rc.class_weights.size()) != ds.num_classes()) {
    throw UserError("train: class_weights needs " + std::to_string(ds.num_classes()) + " entries");
  }
  const fs::path out(rc.out);
  fs::create_directories(out / "checkpoints");

  ModelConfig mc;
  mc.feature_dim = rc.use_reflectance ? 1 : 0;
  mc.num_classes = ds.num_classes();
  mc.widths = rc.widths;
  mc.slice_hidden = rc.slice_hidden;
  mc.seed = rc.seed;
  mc.fusion = FusionSpec::parse(rc.fusion);
  Model<float> model(mc);

  nlohmann::json run = rc.to_json();
  run["model"] = mc.to_json();
  write_json(out / "run_config.json", run);
  const nlohmann::json extra = checkpoint_extra(rc, &ds);
  model.save((out / "checkpoints" / (epoch_name(0) + ".tlnc")).string(), extra);
  if (rc.epochs == 0) {
    std::cerr << "epochs = 0: wrote the initial checkpoint only\n";
    return kExitOk;
  }

  std::size_t skipped_windows = 0;
  const auto refs = sample_refs(ds.train, seq, &skipped_windows);
  if (refs.empty()) throw UserError("train: no complete (n, s) window in the training split");
  if (skipped_windows) std::cerr << "skipped " << skipped_windows << " incomplete windows at sequence starts\n";

  AdamConfig ac;
  ac.weight_decay = rc.weight_decay;
  Adam<float> opt(model.parameters(), ac);
  CosineWarmRestarts sched;
  sched.lr_max = rc.lr;
  sched.period_epochs = rc.restart_epochs;
  AugmentConfig aug;
  aug.translation_range = rc.translation;
  aug.noise_std = rc.noise;
  std::mt19937_64 rng(rc.seed ^ 0x5eed5eedULL);
  const std::size_t steps = rc.steps_per_epoch > 0 ? std::size_t(rc.steps_per_epoch) : refs.size();
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw UserError("cannot write metrics log in " + out.string());

  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = refs.size();
  for (int epoch = 0; epoch < rc.epochs; ++epoch) {
    double loss_sum = 0.0, lr = 0.0;
    std::size_t used = 0, skipped = 0, rejected = 0;
    for (std::size_t i = 0; i < steps; ++i) {
      if (cursor == refs.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const SampleRef r = refs[order[cursor++]];
      auto sample = ds.sample(ds.train[r.sequence], r.anchor, seq);
      if (rc.augment) augment(*sample, aug, rng);
      lr = sched.lr_at(double(epoch) + double(i) / double(steps));
      const auto result = training_step(model, opt, std::span<const PointCloud>(sample->clouds), lr, rc.class_weights);
      if (result.skipped) {
        ++skipped;
        continue;
      }
      rejected += result.rejected;
      loss_sum += result.loss;
      ++used;
    }
    opt.state().epoch = double(epoch + 1);
    const std::string name = epoch_name(epoch + 1);
    model.save((out / "checkpoints" / (name + ".tlnc")).string(), extra);
    {
      std::ofstream os(out / "checkpoints" / (name + ".optim"), std::ios::binary);
      opt.save_state(os);
    }
    nlohmann::json line = {{"epoch", epoch + 1},
                           {"steps", used},
                           {"loss", used ? loss_sum / double(used) : 0.0},
                           {"lr", lr},
                           {"skipped", skipped},
                           {"rejected", rejected}};
    if (!ds.val.empty()) {
      const auto cm = evaluate_split(model, ds, ds.val, seq, rc.max_val_samples);
      const auto report = moving_static_report(cm, ds.classes);
      auto opt_json = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
      line["val_miou"] = opt_json(report.iou.mean);
      line["val_static_miou"] = opt_json(report.static_mean);
      line["val_moving_miou"] = opt_json(report.moving_mean);
    }
    metrics << line.dump() << '\n';
    metrics.flush();
    std::cerr << line.dump() << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer: recursive, one cloud per step; clouds s apart form one chain
// ---------------------------------------------------------------------------

struct InferInput {
  std::string id;
  std::vector<fs::path> scans;
  std::vector<Eigen::Matrix4d> poses;
};

/// Accepts a dataset root (sequences/<id>/velodyne), a single sequence
/// directory (velodyne/) or a plain directory of .bin scans.
inline std::vector<InferInput> find_infer_inputs(const fs::path& root, const std::vector<std::string>& ids) {
  if (!fs::is_directory(root)) throw UserError("infer: input directory " + root.string() + " does not exist");
  std::vector<InferInput> out;
  auto from_sequence = [](const SequenceFiles& f) { return InferInput{f.id, f.scans, f.poses}; };
  if (fs::is_directory(root / "sequences")) {
    std::vector<std::string> list = ids;
    if (list.empty()) {
      for (const auto& e : fs::directory_iterator(root / "sequences")) {
        if (fs::is_directory(e.path() / "velodyne")) list.push_back(e.path().filename().string());
      }
      std::sort(list.begin(), list.end());
    }
    for (const auto& id : list) out.push_back(from_sequence(open_sequence(root, id)));
  } else if (fs::is_directory(root / "velodyne")) {
    auto f = open_sequence(root.parent_path().parent_path(), root.filename().string());
    out.push_back(from_sequence(f));
  } else {
    InferInput in{root.filename().string(), {}, {}};
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.path().extension() == ".bin") in.scans.push_back(e.path());
    }
    std::sort(in.scans.begin(), in.scans.end());
    in.poses.assign(in.scans.size(), Eigen::Matrix4d::Identity());
    if (!in.scans.empty()) out.push_back(std::move(in));
  }
  out.erase(std::remove_if(out.begin(), out.end(), [](const InferInput& i) { return i.scans.empty(); }), out.end());
  return out;
}

inline int cmd_infer(RunConfig rc, const std::vector<std::string>& explicit_flags) {
  if (rc.checkpoint.empty()) throw UserError("infer: --checkpoint is required");
  if (!fs::exists(rc.checkpoint)) throw UserError("infer: checkpoint " + rc.checkpoint + " not found");
  if (rc.data.empty()) throw UserError("infer: --data is required");
  nlohmann::json manifest;
  const Model<float> model = Model<float>::load(rc.checkpoint, &manifest);
  const nlohmann::json extra = manifest.value("extra", nlohmann::json::object());
  auto flagged = [&](const std::string& f) { return std::find(explicit_flags.begin(), explicit_flags.end(), f) != explicit_flags.end(); };
  if (!flagged("s") && extra.contains("s")) rc.s = extra.at("s");
  if (!flagged("sigma") && extra.contains("sigma")) rc.sigma = extra.at("sigma");
  rc.use_reflectance = model.config().feature_dim > 0;
  const LabelMap map = extra.contains("label_map") ? LabelMap::from_json(extra.at("label_map")) : LabelMap::identity(model.config().num_classes);
  if (rc.s < 1) throw UserError("infer: s must be >= 1");
  if (!(rc.sigma > 0.0)) throw UserError("infer: sigma must be positive");

  const auto inputs = find_infer_inputs(rc.data, rc.val_sequences);
  if (inputs.empty()) {
    std::cerr << "warning: no scans found under " << rc.data << "; nothing to do\n";
    return kExitOk;
  }
  const fs::path out(rc.out);
  ad::NoGradGuard guard;
  std::size_t written = 0;
  for (const auto& input : inputs) {
    const fs::path dir = out / "sequences" / input.id;
    fs::create_directories(dir / "predictions");
    if (rc.export_ply) fs::create_directories(dir / "ply");
    if (rc.export_flow) fs::create_directories(dir / "flow");
    // one chain per residue class modulo s; each chain keeps the frame of its first cloud
    struct Chain {
      SequenceState<float> state{3};
      Eigen::Matrix4d frame_inv = Eigen::Matrix4d::Identity();
      int steps = 0;
    };
    std::vector<Chain> chains(std::size_t(rc.s));
    for (std::size_t i = 0; i < input.scans.size(); ++i) {
      Chain& chain = chains[i % std::size_t(rc.s)];
      if (chain.steps == 0 || (rc.reset_every > 0 && chain.steps % rc.reset_every == 0)) {
        chain.state = SequenceState<float>(3);
        chain.frame_inv = input.poses[i].inverse();
      }
      PointCloud cloud = read_scan(input.scans[i].string());
      transform_positions(cloud.positions, chain.frame_inv * input.poses[i]);
      cloud.positions /= rc.sigma;
      if (!rc.use_reflectance) cloud.features.resize(cloud.positions.rows(), 0);
      StepTrace trace;
      const auto logits = model.infer_step(chain.state, cloud, input.id, rc.export_flow ? &trace : nullptr);
      ++chain.steps;
      const auto pred = predict_labels(logits.value());
      std::vector<std::uint32_t> raw(pred.size());
      for (std::size_t p = 0; p < pred.size(); ++p) raw[p] = map.to_raw(pred[p]);
      const std::string stem = input.scans[i].stem().string();
      write_raw_labels((dir / "predictions" / (stem + ".label")).string(), raw);
      ++written;
      if (rc.export_ply) ply::write_labeled_points((dir / "ply" / (stem + ".ply")).string(), Mat<double>(cloud.positions * rc.sigma), pred);
      if (rc.export_flow) {
        for (int site = 0; site < kFusionSites; ++site) {
          if (model.config().fusion[site] != FusionKind::kAFlow || trace.flow_direction[std::size_t(site)].rows() == 0) continue;
          const auto& active = trace.flow_active[std::size_t(site)];
          const auto& dir_m = trace.flow_direction[std::size_t(site)];
          const auto& origin = trace.flow_origin[std::size_t(site)];
          std::vector<Eigen::Index> rows;
          for (Eigen::Index r = 0; r < dir_m.rows(); ++r) {
            if (active[std::size_t(r)] && dir_m.row(r).squaredNorm() > 0.0) rows.push_back(r);
          }
          Mat<double> o(Eigen::Index(rows.size()), 3), d(Eigen::Index(rows.size()), 3);
          for (std::size_t k = 0; k < rows.size(); ++k) {
            o.row(Eigen::Index(k)) = origin.row(rows[k]) * rc.sigma;
            d.row(Eigen::Index(k)) = dir_m.row(rows[k]) * rc.sigma;
          }
          const char* site_name[] = {"early", "middle", "bottleneck", "late"};
          ply::write_arrows((dir / "flow" / (stem + "_" + site_name[site] + ".ply")).string(), o, d);
        }
      }
    }
  }
  std::cerr << "wrote " << written << " label files under " << out.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval: prediction files against ground truth, or a checkpoint on a split
// ---------------------------------------------------------------------------

inline int cmd_eval(const RunConfig& rc) {
  if (rc.data.empty()) throw UserError("eval: --data is required");
  const fs::path out(rc.out);
  ConfusionMatrix cm;
  std::vector<ClassInfo> classes;
  if (!rc.predictions.empty()) {
    const Dataset ds = Dataset::open(rc.data, rc.train_sequences, rc.val_sequences);
    classes = ds.classes;
    cm = ConfusionMatrix(ds.num_classes());
    std::size_t files = 0;
    for (const auto& seq : ds.val) {
      if (seq.labels.empty()) throw UserError("eval: sequence " + seq.id + " has no ground-truth labels");
      for (std::size_t i = 0; i < seq.scans.size(); ++i) {
        const fs::path pred = fs::path(rc.predictions) / "sequences" / seq.id / "predictions" / (seq.scans[i].stem().string() + ".label");
        if (!fs::exists(pred)) continue;
        const auto truth = read_labels(seq.labels[i].string(), ds.label_map);
        const auto predicted = read_labels(pred.string(), ds.label_map, truth.size());
        std::vector<std::int32_t> p(predicted.size());
        for (std::size_t k = 0; k < p.size(); ++k) p[k] = predicted[k] == kIgnoreLabel ? 0 : predicted[k];
        cm.accumulate(p, truth);
        ++files;
      }
    }
    if (files == 0) std::cerr << "warning: no prediction files matched the evaluation split\n";
  } else {
    if (rc.checkpoint.empty()) throw UserError("eval: give --predictions or --checkpoint");
    nlohmann::json manifest;
    const Model<float> model = Model<float>::load(rc.checkpoint, &manifest);
    const Dataset ds = Dataset::open(rc.data, rc.train_sequences, rc.val_sequences);
    classes = ds.classes;
    RunConfig local = rc;
    const auto extra = manifest.value("extra", nlohmann::json::object());
    local.n = extra.value("n", rc.n);
    local.s = extra.value("s", rc.s);
    local.sigma = extra.value("sigma", rc.sigma);
    local.use_reflectance = model.config().feature_dim > 0;
    if (model.config().num_classes != ds.num_classes()) throw UserError("eval: checkpoint class count differs from the dataset");
    cm = evaluate_split(model, ds, ds.val, local.sequence(), rc.max_val_samples);
  }
  const auto report = moving_static_report(cm, classes);
  fs::create_directories(out);
  nlohmann::json j = report.to_json();
  j["confusion"] = cm.to_json();
  j["points"] = cm.total();
  write_json(out / "eval.json", j);
  std::ofstream(out / "eval.txt") << report.to_text();
  std::cout << report.to_text();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline int cmd_synth(const RunConfig& rc, SynthSceneConfig sc, int val_scenes) {
  sc.seed = rc.seed;
  if (sc.scenes < 1 || sc.frames < 1) throw UserError("synth: scenes and frames must be >= 1");
  if (sc.min_speed < 0 || sc.max_speed < sc.min_speed) throw UserError("synth: need 0 <= min-speed <= max-speed");
  write_synth_dataset(rc.out, sc, val_scenes);
  std::cerr << "wrote " << sc.scenes << " synthetic sequences to " << rc.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// selfcheck: gradient registry plus lattice invariants
// ---------------------------------------------------------------------------

struct InvariantResult {
  std::string name;
  bool passed;
  std::string detail;
};

inline std::vector<InvariantResult> lattice_invariants(std::uint64_t seed) {
  std::vector<InvariantResult> out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  // barycentric weights sum to one and reconstruct the point
  {
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
      std::array<double, 3> p{u(rng), u(rng), u(rng)};
      const Eigen::VectorXd e = elevate_scaled(std::span<const double>(p.data(), 3));
      const auto c = enclosing_simplex(std::span<const double>(e.data(), 4));
      double sum = 0.0;
      Eigen::VectorXd rec = Eigen::VectorXd::Zero(4);
      for (int r = 0; r < c.count; ++r) {
        sum += c.weights[r];
        for (int k = 0; k < 4; ++k) rec[k] += c.weights[r] * c.keys[r][k];
      }
      worst = std::max({worst, std::abs(sum - 1.0), (rec - e).cwiseAbs().maxCoeff()});
    }
    out.push_back({"barycentric_partition", worst < 1e-9, "max error " + std::to_string(worst)});
  }
  // every key sums to zero, neighbors are symmetric
  {
    SparseLattice lattice(3);
    PointCloud c;
    c.positions = gradcheck::detail::random_mat(50, 3, rng, -3.0, 3.0);
    c.features = Mat<double>::Zero(50, 0);
    distribute(c, lattice);
    bool ok = true;
    for (const auto& k : lattice.keys()) {
      ok &= k.sum() == 0;
      for (int slot = 0; slot < neighbor_count(3); ++slot) ok &= neighbor_slot_key(neighbor_slot_key(k, slot), slot ^ 1) == k;
    }
    out.push_back({"key_sum_and_neighbor_symmetry", ok, std::to_string(lattice.size()) + " vertices"});
    std::vector<std::int32_t> map;
    const auto coarse = downsample_keys(lattice, &map);
    out.push_back({"coarse_not_larger", coarse.size() <= lattice.size(),
                   std::to_string(coarse.size()) + " <= " + std::to_string(lattice.size())});
    std::stringstream buf;
    write_snapshot(buf, lattice);
    const auto back = read_snapshot(buf);
    out.push_back({"snapshot_round_trip", back.keys() == lattice.keys(), ""});
  }
  return out;
}

inline int cmd_selfcheck(const RunConfig& rc, const std::string& corrupt, const std::string& export_dir) {
  gradcheck::CheckOptions opt;
  opt.corrupt_op = corrupt;
  opt.seed = 1234 + rc.seed;
  const auto ops = gradcheck::registry();
  bool ok = true;
  std::size_t checked = 0;
  for (const auto& op : ops) {
    const auto r = gradcheck::check_op(op, opt);
    ++checked;
    ok &= r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << "grad " << r.name << " fixtures=" << r.fixtures
              << " max_rel_err=" << r.max_rel_error << (r.passed ? "" : " worst_input=" + r.worst_input) << '\n';
  }
  std::cout << "checked " << checked << " of " << ops.size() << " registered ops\n";
  for (const auto& inv : lattice_invariants(rc.seed)) {
    ok &= inv.passed;
    std::cout << (inv.passed ? "PASS " : "FAIL ") << "invariant " << inv.name << ' ' << inv.detail << '\n';
  }
  if (!export_dir.empty()) {
    fixtures::export_operator_fixtures(fs::path(rc.out) / export_dir, rc.seed);
    std::cout << "exported operator fixtures to " << (fs::path(rc.out) / export_dir).string() << '\n';
  }
  std::cout << (ok ? "selfcheck passed" : "selfcheck FAILED") << '\n';
  return ok ? kExitOk : kExitInvariant;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"Temporal lattice network for moving/static point cloud segmentation"};
  app.require_subcommand(1);
  RunConfig rc;
  std::string config_file;
  std::string widths_text;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON config; command-line flags override its values");
    sub->add_option("--data", rc.data, "dataset root");
    sub->add_option("--out", rc.out, "output directory");
    sub->add_option("--seed", rc.seed, "random seed");
  };
  auto add_sequence = [&](CLI::App* sub) {
    sub->add_option("--fusion", rc.fusion, "fusion spec, e.g. GRU-GRU-AFlow-GRU ('/' disables a site)");
    sub->add_option("--n", rc.n, "sequence length");
    sub->add_option("--s", rc.s, "cloud scope (dataset stride)");
    sub->add_option("--sigma", rc.sigma, "lattice scale in meters");
    sub->add_option("--use-reflectance", rc.use_reflectance, "feed reflectance as point feature (true/false)");
    sub->add_option("--train-seqs", rc.train_sequences, "training sequence ids");
    sub->add_option("--val-seqs", rc.val_sequences, "validation / inference sequence ids");
  };

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train);
  add_sequence(train);
  train->add_option("--widths", widths_text, "channel widths c0,c1,c2");
  train->add_option("--epochs", rc.epochs, "epochs");
  train->add_option("--lr", rc.lr, "peak learning rate");
  train->add_option("--weight-decay", rc.weight_decay, "decoupled weight decay");
  train->add_option("--restart-epochs", rc.restart_epochs, "epochs between warm restarts");
  train->add_option("--augment", rc.augment, "apply augmentation (true/false)");
  train->add_option("--translation", rc.translation, "translation augmentation range, meters");
  train->add_option("--noise", rc.noise, "per-point noise std, meters");
  train->add_option("--steps-per-epoch", rc.steps_per_epoch, "optimizer steps per epoch (0: one pass)");
  train->add_option("--max-val-samples", rc.max_val_samples, "cap on validation samples per epoch (0: all)");

  auto* infer = app.add_subcommand("infer", "recursive inference, one label file per cloud");
  add_common(infer);
  add_sequence(infer);
  infer->add_option("--checkpoint", rc.checkpoint, "model checkpoint");
  infer->add_option("--reset-every", rc.reset_every, "restart the recurrent state every k steps (0: never)");
  infer->add_flag("--export-ply", rc.export_ply, "write colored PLY per cloud");
  infer->add_flag("--export-flow", rc.export_flow, "write AFlow direction arrows as PLY line segments");

  auto* eval = app.add_subcommand("eval", "IoU report on the validation split");
  add_common(eval);
  add_sequence(eval);
  eval->add_option("--checkpoint", rc.checkpoint, "evaluate this checkpoint");
  eval->add_option("--predictions", rc.predictions, "directory written by infer");
  eval->add_option("--max-val-samples", rc.max_val_samples, "cap on evaluated samples (0: all)");

  SynthSceneConfig sc;
  int val_scenes = 1;
  auto* synth = app.add_subcommand("synth", "generate a synthetic moving/static dataset");
  synth->add_option("--config", config_file, "JSON config");
  synth->add_option("--out", rc.out, "output directory");
  synth->add_option("--seed", rc.seed, "random seed");
  synth->add_option("--scenes", sc.scenes, "number of sequences");
  synth->add_option("--val-scenes", val_scenes, "sequences reserved for validation");
  synth->add_option("--frames", sc.frames, "frames per sequence");
  synth->add_option("--static-structures", sc.static_structures, "buildings per scene");
  synth->add_option("--static-objects", sc.static_objects, "parked cars and standing pedestrians per scene");
  synth->add_option("--moving-objects", sc.moving_objects, "moving cars and pedestrians per scene");
  synth->add_option("--min-speed", sc.min_speed, "minimum car speed, m/frame");
  synth->add_option("--max-speed", sc.max_speed, "maximum car speed, m/frame");
  synth->add_option("--noise", sc.noise_std, "per-point noise std, meters");

  std::string corrupt, export_dir;
  auto* self = app.add_subcommand("selfcheck", "gradient checks and lattice invariants");
  self->add_option("--out", rc.out, "output directory for exported fixtures");
  self->add_option("--seed", rc.seed, "fixture seed");
  self->add_option("--corrupt", corrupt, "test hook: corrupt the analytic gradient of this op");
  self->add_option("--export-fixtures", export_dir, "also write operator fixtures to <out>/<dir>");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    CLI::App* active = app.get_subcommands().front();
    rc.subcommand = active->get_name();
    std::vector<std::string> explicit_flags;
    for (const auto* opt : active->get_options()) {
      if (opt->count() > 0) explicit_flags.push_back(opt->get_name(false, true));
    }
    for (auto& f : explicit_flags) f.erase(0, f.find_first_not_of('-'));
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw UserError("cannot open config file " + config_file);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw UserError("config file " + config_file + ": " + e.what());
      }
      // re-apply explicit flags after the merge so they win
      RunConfig flags = rc;
      rc.merge(j);
      auto keep = [&](const char* flag, auto& dst, const auto& src) {
        if (std::find(explicit_flags.begin(), explicit_flags.end(), flag) != explicit_flags.end()) dst = src;
      };
      keep("data", rc.data, flags.data);
      keep("out", rc.out, flags.out);
      keep("seed", rc.seed, flags.seed);
      keep("fusion", rc.fusion, flags.fusion);
      keep("n", rc.n, flags.n);
      keep("s", rc.s, flags.s);
      keep("sigma", rc.sigma, flags.sigma);
      keep("use-reflectance", rc.use_reflectance, flags.use_reflectance);
      keep("train-seqs", rc.train_sequences, flags.train_sequences);
      keep("val-seqs", rc.val_sequences, flags.val_sequences);
      keep("epochs", rc.epochs, flags.epochs);
      keep("lr", rc.lr, flags.lr);
      keep("weight-decay", rc.weight_decay, flags.weight_decay);
      keep("restart-epochs", rc.restart_epochs, flags.restart_epochs);
      keep("augment", rc.augment, flags.augment);
      keep("translation", rc.translation, flags.translation);
      keep("noise", rc.noise, flags.noise);
      keep("steps-per-epoch", rc.steps_per_epoch, flags.steps_per_epoch);
      keep("max-val-samples", rc.max_val_samples, flags.max_val_samples);
      keep("checkpoint", rc.checkpoint, flags.checkpoint);
      keep("predictions", rc.predictions, flags.predictions);
      keep("reset-every", rc.reset_every, flags.reset_every);
      keep("export-ply", rc.export_ply, flags.export_ply);
      keep("export-flow", rc.export_flow, flags.export_flow);
    }
    if (!widths_text.empty()) {
      std::array<int, 3> w{};
      char c1 = 0, c2 = 0;
      std::istringstream ss(widths_text);
      if (!(ss >> w[0] >> c1 >> w[1] >> c2 >> w[2]) || c1 != ',' || c2 != ',' || w[0] < 1 || w[1] < 1 || w[2] < 1) {
        throw UserError("--widths expects three positive integers, e.g. 16,32,64");
      }
      rc.widths = w;
    }
    if (rc.subcommand == "train") return cmd_train(rc);
    if (rc.subcommand == "infer") return cmd_infer(rc, explicit_flags);
    if (rc.subcommand == "eval") return cmd_eval(rc);
    if (rc.subcommand == "synth") return cmd_synth(rc, sc, val_scenes);
    if (rc.subcommand == "selfcheck") return cmd_selfcheck(rc, corrupt, export_dir);
    throw UserError("unknown subcommand " + rc.subcommand);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const Error& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInvariant;
  }
}

}  // namespace tlnet::cli
