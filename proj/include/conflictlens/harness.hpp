// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Pipeline stages over a run directory, with dependency checks, atomic
// outputs and a manifest of content digests.

#pragma once

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "conflictlens/actcache.hpp"
#include "conflictlens/config.hpp"
#include "conflictlens/conflictgen.hpp"
#include "conflictlens/curriculum.hpp"
#include "conflictlens/intervene.hpp"
#include "conflictlens/model.hpp"
#include "conflictlens/plant.hpp"
#include "conflictlens/probelab.hpp"
#include "conflictlens/report.hpp"
#include "conflictlens/saliencelab.hpp"

namespace conflictlens {

inline constexpr const char* kCodeVersion = "conflictlens 0.1.0";

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string run_id(const ExperimentConfig& cfg) { return sha256_hex(cfg.canonical()).substr(0, 16); }

enum class Stage : std::uint8_t { Gen, Train, Behave, Probe, Cluster, Sweep, Classify, Transfer, Report };

inline const std::vector<std::pair<Stage, std::string>>& stage_names() {
  static const std::vector<std::pair<Stage, std::string>> v = {
      {Stage::Gen, "gen"},     {Stage::Train, "train"},       {Stage::Behave, "behave"},
      {Stage::Probe, "probe"}, {Stage::Cluster, "cluster"},   {Stage::Sweep, "sweep"},
      {Stage::Classify, "classify"}, {Stage::Transfer, "transfer"}, {Stage::Report, "report"}};
  return v;
}

inline std::string to_string(Stage s) {
  for (const auto& [st, name] : stage_names())
    if (st == s) return name;
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (const auto& [st, name] : stage_names())
    if (name == s) return st;
  throw ConfigError("unknown stage '" + s + "'");
}

// Files each stage writes, relative to the run directory.
inline std::vector<std::string> stage_outputs(Stage s, const ExperimentConfig& cfg) {
  switch (s) {
    case Stage::Gen: {
      std::vector<std::string> v = {"config.json", "data/train.cgen", "data/eval.cgen"};
      for (const auto& d : cfg.transfer_datasets()) v.push_back("data/transfer_" + d.name + ".cgen");
      return v;
    }
    case Stage::Train: return {"model.tvlm", "train.json"};
    case Stage::Behave: return {"behave.csv"};
    case Stage::Probe: return {"activations/probe.actv", "probes.csv"};
    case Stage::Cluster:
      return {"activations/cluster_image.actv", "activations/cluster_caption.actv", "salience.csv", "gap_accuracy.csv"};
    case Stage::Sweep: return {"sweep/curves.csv"};
    case Stage::Classify: return {"heads.json"};
    case Stage::Transfer: return {"transfer.csv", "gap_shift.csv"};
    case Stage::Report: return {"report/summary.txt"};
  }
  return {};
}

// Upstream stages whose outputs must exist.
inline std::vector<Stage> stage_dependencies(Stage s) {
  switch (s) {
    case Stage::Gen: return {};
    case Stage::Train: return {Stage::Gen};
    case Stage::Behave:
    case Stage::Probe:
    case Stage::Cluster:
    case Stage::Sweep: return {Stage::Gen, Stage::Train};
    case Stage::Classify: return {Stage::Sweep};
    case Stage::Transfer: return {Stage::Gen, Stage::Train, Stage::Classify};
    case Stage::Report: return {Stage::Behave};
  }
  return {};
}

struct StageResult {
  Stage stage = Stage::Gen;
  std::vector<std::filesystem::path> outputs;
  double wall_seconds = 0.0;
};

struct RunOptions {
  std::size_t threads = 1;
  std::ostream* log = nullptr;
};

namespace detail {

struct StageIO {
  const ExperimentConfig& cfg;
  std::filesystem::path dir;
  RunOptions opt;
  std::vector<std::string> inputs;

  std::filesystem::path path(const std::string& rel) const { return dir / rel; }

  std::string read(const std::string& rel) {
    inputs.push_back(rel);
    return binio::read_file(path(rel));
  }
  void write(const std::string& rel, std::string_view contents) const {
    binio::write_file_atomic(path(rel), contents);
  }
  void note(const std::string& msg) const {
    if (opt.log) *opt.log << msg << '\n';
  }
};

inline Rng root_rng(const ExperimentConfig& cfg) { return Rng(cfg.seed()); }

inline std::vector<LabeledImage> load_images(StageIO& io, const std::string& rel) {
  auto f = deserialize_dataset(io.read(rel));
  if (f.n_classes != io.cfg.get<std::size_t>("dataset.n_classes"))
    throw ConfigError("dataset '" + rel + "' has " + std::to_string(f.n_classes) + " classes; config expects " +
                      std::to_string(io.cfg.get<std::size_t>("dataset.n_classes")));
  return std::move(f.images);
}

inline TinyVLM load_model(StageIO& io) {
  io.inputs.push_back("model.tvlm");
  auto m = load_checkpoint(io.path("model.tvlm"));
  if (!(m.config.n_layers == io.cfg.model().n_layers && m.config.d_model == io.cfg.model().d_model &&
        m.config.n_heads == io.cfg.model().n_heads && m.config.n_classes == io.cfg.model().n_classes))
    throw ConfigError("model.tvlm does not match the configured model shape; rerun `conflictlens train`");
  return m;
}

inline std::span<const LabeledImage> take(const std::vector<LabeledImage>& v, std::size_t n) {
  return std::span<const LabeledImage>(v).subspan(0, std::min(n, v.size()));
}

inline SweepSets conflict_sets(std::span<const LabeledImage> imgs, const ExperimentConfig& cfg, Rng& rng) {
  const auto fmt = cfg.prompt_format();
  const std::size_t C = cfg.model().n_classes;
  const auto answers = single_token_answers(fmt.vocab);
  SweepSets s;
  for (Modality t : {Modality::Image, Modality::Caption}) {
    auto pairs = filter_first_token_collisions(make_pairs(imgs, C, PairMode::Inconsistent, t, rng), answers);
    EvalSet e;
    for (const auto& p : pairs) {
      e.pairs.push_back(p);
      e.prompts.push_back(build_prompt(p, fmt, rng));
    }
    s[static_cast<std::size_t>(t)] = std::move(e);
  }
  return s;
}

inline std::vector<ForwardTrace> capture(const TinyVLM& model, std::span<const EncodedPrompt> prompts) {
  std::vector<ForwardTrace> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts)
    out.push_back(*forward(model, p, std::span<const HeadInterventionSpec>{}, CaptureFlags{true, false}).trace);
  return out;
}

inline std::string behave_row(const std::string& cond, Modality t, const BehavioralBreakdown& b) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << cond << ',' << to_string(t) << ',' << b.total() << ',' << b.accuracy() << ','
     << b.fraction(Behavior::Misled) << ',' << b.fraction(Behavior::InOptionIncorrect) << ','
     << b.fraction(Behavior::OutOfOption) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen(StageIO& io) {
  const auto& cfg = io.cfg;
  const std::size_t C = cfg.get<std::size_t>("dataset.n_classes"), G = cfg.get<std::size_t>("dataset.grid"),
                    P = cfg.get<std::size_t>("dataset.patch_dim");
  const std::size_t n_train = cfg.get<std::size_t>("dataset.n_train"), n_eval = cfg.get<std::size_t>("dataset.n_eval");
  Rng root = root_rng(cfg);
  std::vector<LabeledImage> train, eval;
  std::vector<LabeledImage> cifar_test;
  if (cfg.get<std::string>("dataset.kind") == "shapes") {
    Rng r = root.substream("data");
    train = generate_shapes_grid(cfg.shapes(), n_train, r);
    eval = generate_shapes_grid(cfg.shapes(), n_eval, r);
  } else {
    auto load = [&](const std::string& key) {
      const auto p = cfg.get<std::string>(key);
      if (p.empty()) throw ConfigError("config: " + key + " must name a CIFAR-10 binary file");
      std::string bytes;
      try {
        bytes = binio::read_file(p);
      } catch (const Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
      return parse_cifar10_binary(bytes, P);
    };
    train = load("dataset.cifar_train");
    cifar_test = load("dataset.cifar_test");
    if (train.size() > n_train) train.resize(n_train);
    eval.assign(cifar_test.begin(), cifar_test.begin() + static_cast<std::ptrdiff_t>(std::min(n_eval, cifar_test.size())));
  }
  io.write("config.json", cfg.tree.dump(2) + "\n");
  io.write("data/train.cgen", serialize_dataset(train, C, G, P));
  io.write("data/eval.cgen", serialize_dataset(eval, C, G, P));
  const std::size_t n_transfer = cfg.get<std::size_t>("eval.n_sweep");
  for (const auto& d : cfg.transfer_datasets()) {
    Rng r(d.seed);
    std::vector<LabeledImage> imgs;
    if (cfg.get<std::string>("dataset.kind") == "shapes") {
      auto spec = cfg.shapes();
      spec.noise = d.noise;
      imgs = generate_shapes_grid(spec, n_transfer, r);
    } else {
      auto perm = r.permutation(cifar_test.size());
      for (std::size_t i = 0; i < std::min(n_transfer, perm.size()); ++i) imgs.push_back(cifar_test[perm[i]]);
    }
    io.write("data/transfer_" + d.name + ".cgen", serialize_dataset(imgs, C, G, P));
  }
  io.note("gen: " + std::to_string(train.size()) + " train / " + std::to_string(eval.size()) + " eval images");
}

inline void stage_train(StageIO& io) {
  const auto& cfg = io.cfg;
  auto train_imgs = load_images(io, "data/train.cgen");
  Rng root = root_rng(cfg);
  Rng cr = root.substream("curriculum");
  auto data = make_training_set(train_imgs, cfg.model().n_classes, cfg.curriculum(), cfg.prompt_format(), cr);
  Rng ir = root.substream("init");
  TinyVLM model = TinyVLM::random(cfg.model(), ir);
  auto sched = cfg.schedule();
  sched.seed = root.substream("sampling").seed();
  const bool plant = cfg.get<bool>("plant.enabled");
  const std::size_t pl = cfg.get<std::size_t>("plant.layer"), ph = cfg.get<std::size_t>("plant.head");
  if (plant) sched.frozen_heads.emplace_back(pl, ph);
  auto rep = train(model, data, sched);
  nlohmann::json j{{"loss_curve", rep.loss_curve}, {"final_accuracy", rep.final_accuracy}, {"steps", rep.steps},
                   {"n_examples", data.size()}};
  if (plant) {
    Rng pr = root.substream("plant");
    const auto n = cfg.get<std::size_t>("plant.n_calibration");
    auto sets = conflict_sets(take(train_imgs, n), cfg, pr);
    std::vector<ConflictPair> pairs;
    std::vector<EncodedPrompt> prompts;
    for (const auto& s : sets) {
      pairs.insert(pairs.end(), s.pairs.begin(), s.pairs.end());
      prompts.insert(prompts.end(), s.prompts.begin(), s.prompts.end());
    }
    PlantOptions po;
    po.strength = cfg.get<double>("plant.strength");
    auto prep = plant_pathway_head(model, pl, ph, modality_from_string(cfg.get<std::string>("plant.modality")), pairs,
                                   prompts, po);
    j["plant"] = {{"layer", pl}, {"head", ph}, {"fit_accuracy", prep.fit_accuracy}, {"output_scale", prep.output_scale}};
  }
  bool finite = true;
  model.for_each_param([&](const std::string&, const Mat& w) { finite = finite && w.all_finite(); });
  if (!finite) throw TrainingError("train: non-finite parameters after training", rep.steps);
  io.write("model.tvlm", serialize_checkpoint(model));
  io.write("train.json", j.dump(2) + "\n");
  io.note("train: final accuracy " + std::to_string(rep.final_accuracy));
}

inline void stage_behave(StageIO& io) {
  const auto& cfg = io.cfg;
  auto model = load_model(io);
  auto eval = load_images(io, "data/eval.cgen");
  const auto imgs = take(eval, cfg.get<std::size_t>("eval.n_behave"));
  const bool strict = cfg.get<bool>("eval.strict");
  Rng root = root_rng(cfg);
  std::string csv = "condition,target_modality,n,accuracy,misled,in_option_incorrect,out_of_option\n";
  const std::size_t C = cfg.model().n_classes;
  const auto fmt = cfg.prompt_format();
  std::uint64_t idx = 0;
  for (Modality t : {Modality::Image, Modality::Caption}) {
    Rng r = root.substream("behave", idx++);
    auto uni = make_eval_set(imgs, C, t == Modality::Image ? PairMode::UnimodalImage : PairMode::UnimodalCaption, t, fmt, r);
    csv += behave_row("unimodal", t, evaluate_behavior(model, uni, {}, strict));
  }
  for (auto [mode, name] : {std::pair{PairMode::Inconsistent, "inconsistent"}, {PairMode::Consistent, "consistent"}}) {
    for (Modality t : {Modality::Image, Modality::Caption}) {
      Rng r = root.substream("behave", idx++);
      auto set = make_eval_set(imgs, C, mode, t, fmt, r);
      csv += behave_row(name, t, evaluate_behavior(model, set, {}, strict));
    }
  }
  io.write("behave.csv", csv);
}

inline void stage_probe(StageIO& io) {
  const auto& cfg = io.cfg;
  auto model = load_model(io);
  auto eval = load_images(io, "data/eval.cgen");
  const auto imgs = take(eval, cfg.get<std::size_t>("eval.n_probe"));
  const std::size_t half = imgs.size() / 2, C = cfg.model().n_classes;
  Rng root = root_rng(cfg);
  Rng pr = root.substream("probe_pairs");
  std::vector<ConflictPair> pairs;
  std::vector<EncodedPrompt> prompts;
  for (Modality t : {Modality::Image, Modality::Caption}) {
    for (PairMode mode : {PairMode::Consistent, PairMode::Inconsistent}) {
      auto part = imgs.subspan(mode == PairMode::Consistent ? 0 : half, half);
      auto s = make_eval_set(part, C, mode, t, cfg.prompt_format(), pr);
      pairs.insert(pairs.end(), s.pairs.begin(), s.pairs.end());
      prompts.insert(prompts.end(), s.prompts.begin(), s.prompts.end());
    }
  }
  auto traces = capture(model, prompts);
  io.write("activations/probe.actv",
           serialize_activations(ActivationCache::from_traces(traces, model.config.n_layers, model.config.d_model, 0)));
  Rng sr = root.substream("probe");
  auto uni = unimodal_probe_suite(traces, pairs, C, sr, cfg.probe());
  Rng fr = root.substream("folds");
  auto folds = make_class_folds(C, fr);
  auto con = consistency_probe_suite(traces, pairs, folds, sr, cfg.probe());
  uni.insert(uni.end(), con.begin(), con.end());
  io.write("probes.csv", probe_report_csv(uni));
}

inline void stage_cluster(StageIO& io) {
  const auto& cfg = io.cfg;
  auto model = load_model(io);
  auto eval = load_images(io, "data/eval.cgen");
  const auto imgs = take(eval, cfg.get<std::size_t>("eval.n_cluster"));
  const std::size_t C = cfg.model().n_classes;
  Rng root = root_rng(cfg);
  std::string salience;
  std::vector<GapAccuracyPoint> points;
  const std::string rho = cfg.tree.at("curriculum").at("rho").dump();
  for (Modality t : {Modality::Image, Modality::Caption}) {
    Rng r = root.substream("cluster_pairs", static_cast<std::uint64_t>(t));
    auto set = make_eval_set(imgs, C, PairMode::Inconsistent, t, cfg.prompt_format(), r);
    auto traces = capture(model, set.prompts);
    io.write("activations/cluster_" + std::string(to_string(t)) + ".actv",
             serialize_activations(ActivationCache::from_traces(traces, model.config.n_layers, model.config.d_model,
                                                                static_cast<std::uint32_t>(t) + 1)));
    Rng kr = root.substream("kmeans", static_cast<std::uint64_t>(t));
    auto prof = salience_profile(traces, set.pairs, C, kr, cfg.get<std::size_t>("salience.n_seeds"));
    const std::string cond = "rho=" + rho + "/target=" + std::string(to_string(t));
    auto csv = salience_report_csv(prof, cond);
    salience += salience.empty() ? csv : csv.substr(csv.find('\n') + 1);
    points.push_back({cond, prof.back().gap(t), evaluate_behavior(model, set, {}, cfg.get<bool>("eval.strict")).accuracy()});
  }
  io.write("salience.csv", salience);
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "condition,gap,accuracy\n";
  for (const auto& p : points) os << p.condition << ',' << p.gap << ',' << p.accuracy << '\n';
  try {
    auto c = correlate_gap_accuracy(points);
    os << "# r," << c.r << "\n# p," << std::scientific << c.p_value << '\n';
  } catch (const DegenerateDataError&) {
    os << "# r,undefined (needs at least 3 conditions across runs)\n";
  }
  io.write("gap_accuracy.csv", os.str());
}

inline SweepOptions sweep_options(const ExperimentConfig& cfg, std::size_t threads) {
  SweepOptions o;
  o.positions = cfg.get<std::string>("sweep.positions") == "all" ? InterventionPositions::All : InterventionPositions::Answer;
  o.threads = threads;
  o.strict = cfg.get<bool>("eval.strict");
  return o;
}

inline void stage_sweep(StageIO& io) {
  const auto& cfg = io.cfg;
  auto model = load_model(io);
  auto eval = load_images(io, "data/eval.cgen");
  Rng root = root_rng(cfg);
  Rng r = root.substream("sweep_pairs");
  auto sets = conflict_sets(take(eval, cfg.get<std::size_t>("eval.n_sweep")), cfg, r);
  AlphaGrid grid{cfg.alpha_grid()};
  auto curves = sweep_all_heads(model, sets, grid, sweep_options(cfg, io.opt.threads));
  io.write("sweep/curves.csv", curves_csv(curves));
}

inline std::vector<HeadCurve> parse_curves(const std::string& text) {
  auto t = parse_csv(text);
  const auto li = t.column("layer"), hi = t.column("head"), ti = t.column("target_modality"), ai = t.column("alpha"),
             pt = t.column("portion_target"), pn = t.column("portion_nontarget"), po = t.column("portion_other");
  std::map<std::pair<std::size_t, std::size_t>, HeadCurve> by;
  for (const auto& r : t.rows) {
    const std::pair<std::size_t, std::size_t> id{std::stoul(r[li]), std::stoul(r[hi])};
    auto& c = by[id];
    c.layer = id.first;
    c.head = id.second;
    const Modality m = modality_from_string(r[ti]);
    const double a = std::stod(r[ai]);
    if (m == Modality::Image) c.alphas.push_back(a);
    c.of(m).push_back({std::stod(r[pt]), std::stod(r[pn]), std::stod(r[po])});
  }
  std::vector<HeadCurve> out;
  for (auto& [id, c] : by) {
    for (std::size_t t2 = 0; t2 < 2; ++t2)
      for (std::size_t i = 0; i < c.alphas.size(); ++i)
        if (c.alphas[i] == 1.0 && i < c.by_target[t2].size()) c.baseline[t2] = c.by_target[t2][i].target;
    out.push_back(std::move(c));
  }
  return out;
}

inline void stage_classify(StageIO& io) {
  const auto& cfg = io.cfg;
  auto curves = parse_curves(io.read("sweep/curves.csv"));
  const double eps = cfg.get<double>("sweep.epsilon");
  std::vector<HeadClassification> cls;
  for (const auto& c : curves) cls.push_back(classify_head(c, eps));
  auto ranking = rank_heads(cls, curves);
  io.write("heads.json", ranking_json(cls, ranking, eps).dump(2) + "\n");
}

inline void stage_transfer(StageIO& io) {
  const auto& cfg = io.cfg;
  auto model = load_model(io);
  auto heads = nlohmann::json::parse(io.read("heads.json"));
  std::size_t layer = 0, head = 0;
  HeadType type = HeadType::Unclassified;
  auto type_of = [&](std::size_t l, std::size_t h) {
    for (const auto& e : heads.at("heads"))
      if (e.at("layer") == l && e.at("head") == h) {
        const auto s = e.at("type").get<std::string>();
        for (HeadType t : {HeadType::Router, HeadType::ImagePromotion, HeadType::CaptionPromotion})
          if (s == to_string(t)) return t;
      }
    return HeadType::Unclassified;
  };
  const auto& choice = cfg.tree.at("transfer").at("head");
  if (choice.is_array()) {
    layer = choice[0].get<std::size_t>();
    head = choice[1].get<std::size_t>();
  } else {
    // Strongest trend among classified heads; routers first.
    bool found = false;
    for (HeadType t : {HeadType::Router, HeadType::CaptionPromotion, HeadType::ImagePromotion}) {
      const auto& rk = heads.at("rankings");
      const std::string key(to_string(t));
      if (!rk.contains(key)) continue;
      const auto& lst = rk.at(key).at("top_delta2");
      if (!lst.empty()) {
        layer = lst[0][0].get<std::size_t>();
        head = lst[0][1].get<std::size_t>();
        found = true;
        break;
      }
    }
    if (!found) io.note("transfer: no classified head; using L0H0");
  }
  type = type_of(layer, head);
  const double alpha = cfg.get<double>("transfer.alpha");
  std::vector<TransferDataset> ds;
  for (const auto& spec : cfg.transfer_datasets()) {
    auto imgs = load_images(io, "data/transfer_" + spec.name + ".cgen");
    Rng r = Rng(spec.seed).substream("transfer_pairs");
    ds.push_back({spec.name, conflict_sets(imgs, cfg, r)});
  }
  auto opt = sweep_options(cfg, io.opt.threads);
  auto cells = transfer_eval(model, layer, head, type, ds, alpha, opt);
  std::ostringstream hdr;
  hdr << "# head,L" << layer << "H" << head << "," << to_string(type) << ",alpha=" << alpha << '\n';
  io.write("transfer.csv", transfer_csv(cells) + hdr.str());
  Rng sr = root_rng(cfg).substream("post_salience");
  auto shifts = post_intervention_salience(model, layer, head, ds, sr, alpha, opt.positions);
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "dataset,target_modality,gap_before,gap_after,delta\n";
  for (const auto& g : shifts)
    os << g.dataset << ',' << to_string(g.target) << ',' << g.gap_before << ',' << g.gap_after << ',' << g.delta << '\n';
  io.write("gap_shift.csv", os.str());
}

inline void stage_report(StageIO& io) {
  auto files = emit_report(io.dir);
  for (const auto& s : files.absent) io.note("report: " + s + " outputs absent");
}

inline nlohmann::json load_manifest(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(binio::read_file(p));
  } catch (const nlohmann::json::exception&) {
    return nlohmann::json::object();
  }
}

}  // namespace detail

// Runs one stage against `cfg.output_dir()`, enforcing the stage DAG and
// recording digests and wall-clock time in manifest.json.
inline StageResult run_stage(Stage stage, const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.output_dir();
  for (Stage dep : stage_dependencies(stage))
    for (const auto& rel : stage_outputs(dep, cfg))
      if (!fs::exists(dir / rel)) throw DependencyError(to_string(stage), to_string(dep));

  detail::StageIO io{cfg, dir, opt, {}};
  const auto t0 = std::chrono::steady_clock::now();
  switch (stage) {
    case Stage::Gen: detail::stage_gen(io); break;
    case Stage::Train: detail::stage_train(io); break;
    case Stage::Behave: detail::stage_behave(io); break;
    case Stage::Probe: detail::stage_probe(io); break;
    case Stage::Cluster: detail::stage_cluster(io); break;
    case Stage::Sweep: detail::stage_sweep(io); break;
    case Stage::Classify: detail::stage_classify(io); break;
    case Stage::Transfer: detail::stage_transfer(io); break;
    case Stage::Report: detail::stage_report(io); break;
  }
  StageResult res;
  res.stage = stage;
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  auto manifest = detail::load_manifest(dir / "manifest.json");
  manifest["code_version"] = kCodeVersion;
  manifest["config_hash"] = sha256_hex(cfg.canonical());
  manifest["run_id"] = run_id(cfg);
  nlohmann::json entry;
  entry["config_hash"] = manifest["config_hash"];
  entry["wall_seconds"] = res.wall_seconds;
  nlohmann::json ins = nlohmann::json::object(), outs = nlohmann::json::object();
  for (const auto& rel : io.inputs) ins[rel] = sha256_hex(binio::read_file(dir / rel));
  std::vector<std::string> out_rel = stage_outputs(stage, cfg);
  if (stage == Stage::Report) {
    out_rel.clear();
    for (const auto& e : fs::directory_iterator(dir / "report"))
      out_rel.push_back("report/" + e.path().filename().string());
    std::sort(out_rel.begin(), out_rel.end());
  }
  for (const auto& rel : out_rel) {
    if (!fs::exists(dir / rel)) continue;
    outs[rel] = sha256_hex(binio::read_file(dir / rel));
    res.outputs.push_back(dir / rel);
  }
  entry["inputs"] = ins;
  entry["outputs"] = outs;
  manifest["stages"][to_string(stage)] = entry;
  manifest["prompt_template_index"] = cfg.get<std::size_t>("prompt.template_index");
  if (stage == Stage::Cluster) manifest["definitions"]["cluster_preprocessing"] = "raw activations, no normalization";
  if (stage == Stage::Classify)
    manifest["definitions"]["delta2"] = "max minus min over alpha of the trait-direction accuracy";
  binio::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return res;
}

}  // namespace conflictlens
