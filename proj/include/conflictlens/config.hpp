// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: a JSON tree with defaults, dotted-key overrides
// and a run id derived from its canonical serialization.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "conflictlens/binio.hpp"
#include "conflictlens/curriculum.hpp"
#include "conflictlens/errors.hpp"
#include "conflictlens/model.hpp"
#include "conflictlens/probelab.hpp"

namespace conflictlens {

using nlohmann::json;

inline json default_config_tree() {
  return json{
      {"seed", 1},
      {"output_dir", "runs/default"},
      {"model", {{"n_layers", 4}, {"n_heads", 8}, {"d_model", 64}, {"n_image_tokens", 16}, {"max_seq", 32}}},
      {"dataset",
       {{"kind", "shapes"},
        {"n_classes", 10},
        {"grid", 4},
        {"patch_dim", 8},
        {"noise", 0.05},
        {"signal", 1.0},
        {"n_train", 6000},
        {"n_eval", 1000},
        {"cifar_train", ""},
        {"cifar_test", ""}}},
      {"prompt", {{"template_index", 2}, {"n_options", 5}}},
      {"curriculum",
       {{"rho", 0.5},
        {"frac_unimodal_image", 0.25},
        {"frac_unimodal_caption", 0.25},
        {"frac_consistent", 0.47},
        {"frac_inconsistent", 0.03}}},
      {"train",
       {{"epochs", 3},
        {"batch_size", 32},
        {"lr", 3e-3},
        {"clip_norm", 1.0},
        {"warmup_steps", 50},
        {"match_weight", 1.0},
        {"frozen_heads", json::array()}}},
      {"plant",
       {{"enabled", false},
        {"layer", 3},
        {"head", 7},
        {"modality", "caption"},
        {"strength", 0.03},
        {"n_calibration", 1000}}},
      {"eval", {{"n_behave", 500}, {"n_probe", 2000}, {"n_cluster", 500}, {"n_sweep", 100}, {"strict", false}}},
      {"probe", {{"epochs", 1000}, {"batch_size", 256}, {"lr", 1e-3}, {"val_fraction", 0.2}, {"test_fraction", 0.2}}},
      {"salience", {{"n_seeds", 3}}},
      {"sweep", {{"alpha_min", -10.0}, {"alpha_max", 10.0}, {"alpha_step", 1.0}, {"epsilon", 0.05}, {"positions", "answer"}}},
      {"transfer",
       {{"alpha", 10.0},
        {"head", "auto"},
        {"datasets",
         json::array({json{{"name", "toyB"}, {"seed", 1001}, {"noise", 0.05}},
                      json{{"name", "toyC"}, {"seed", 2002}, {"noise", 0.08}}})}}},
  };
}

namespace detail {

// Recursively overlays `over` onto `base`; unknown keys are rejected so
// typos surface as config errors.
inline void overlay(json& base, const json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it->is_object())
      overlay(slot, *it, key);
    else
      slot = *it;
  }
}

inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);  // bare strings need no quotes on the command line
  }
}

}  // namespace detail

struct TransferDatasetSpec {
  std::string name;
  std::uint64_t seed = 0;
  double noise = 0.05;
};

struct ExperimentConfig {
  json tree = default_config_tree();

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    detail::overlay(c.tree, j, "");
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = binio::read_file(path);
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  // key=value with a dotted key, e.g. curriculum.rho=0.9.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("config: override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    json* node = &tree;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part)) throw ConfigError("config: unknown key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = detail::parse_override_value(assignment.substr(eq + 1));
    validate();
  }

  // CONFLICTLENS_SEED, when set, replaces the root seed.
  void apply_environment() {
    if (const char* s = std::getenv("CONFLICTLENS_SEED")) {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(s, &end, 10);
      if (end == s || *end != '\0') throw ConfigError("CONFLICTLENS_SEED must be an unsigned integer");
      tree["seed"] = static_cast<std::uint64_t>(v);
    }
  }

  std::string canonical() const { return tree.dump(); }  // object keys are sorted

  template <class T>
  T get(const std::string& dotted) const {
    const json* node = &tree;
    std::size_t start = 0;
    while (true) {
      const auto dot = dotted.find('.', start);
      node = &node->at(dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    try {
      return node->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: '" + dotted + "' has the wrong type: " + e.what());
    }
  }

  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }
  std::filesystem::path output_dir() const { return get<std::string>("output_dir"); }

  ModelConfig model() const {
    ModelConfig m;
    m.n_layers = get<std::size_t>("model.n_layers");
    m.n_heads = get<std::size_t>("model.n_heads");
    m.d_model = get<std::size_t>("model.d_model");
    m.n_image_tokens = get<std::size_t>("model.n_image_tokens");
    m.max_seq = get<std::size_t>("model.max_seq");
    m.n_classes = get<std::size_t>("dataset.n_classes");
    m.patch_dim = get<std::size_t>("dataset.patch_dim");
    return m;
  }

  ShapesGridSpec shapes() const {
    ShapesGridSpec s;
    s.n_classes = get<std::size_t>("dataset.n_classes");
    s.grid = get<std::size_t>("dataset.grid");
    s.patch_dim = get<std::size_t>("dataset.patch_dim");
    s.noise = get<double>("dataset.noise");
    s.signal = get<double>("dataset.signal");
    return s;
  }

  PromptFormat prompt_format() const {
    return PromptFormat{model().vocab(), get<std::size_t>("prompt.template_index"),
                        get<std::size_t>("prompt.n_options")};
  }

  CurriculumSpec curriculum() const {
    CurriculumSpec c;
    c.rho = get<double>("curriculum.rho");
    c.frac_unimodal_image = get<double>("curriculum.frac_unimodal_image");
    c.frac_unimodal_caption = get<double>("curriculum.frac_unimodal_caption");
    c.frac_consistent = get<double>("curriculum.frac_consistent");
    c.frac_inconsistent = get<double>("curriculum.frac_inconsistent");
    return c;
  }

  TrainSchedule schedule() const {
    TrainSchedule s;
    s.epochs = get<std::size_t>("train.epochs");
    s.batch_size = get<std::size_t>("train.batch_size");
    s.lr = get<double>("train.lr");
    s.clip_norm = get<double>("train.clip_norm");
    s.warmup_steps = get<std::size_t>("train.warmup_steps");
    s.match_weight = get<double>("train.match_weight");
    for (const auto& fh : tree.at("train").at("frozen_heads")) {
      if (!fh.is_array() || fh.size() != 2) throw ConfigError("config: train.frozen_heads entries must be [layer, head]");
      s.frozen_heads.emplace_back(fh[0].get<std::size_t>(), fh[1].get<std::size_t>());
    }
    return s;
  }

  ProbeSuiteConfig probe() const {
    ProbeSuiteConfig p;
    p.probe.epochs = get<std::size_t>("probe.epochs");
    p.probe.batch_size = get<std::size_t>("probe.batch_size");
    p.probe.lr = get<double>("probe.lr");
    p.probe.val_fraction = get<double>("probe.val_fraction");
    p.test_fraction = get<double>("probe.test_fraction");
    return p;
  }

  std::vector<double> alpha_grid() const {
    const double lo = get<double>("sweep.alpha_min"), hi = get<double>("sweep.alpha_max"),
                 step = get<double>("sweep.alpha_step");
    std::vector<double> v;
    const auto n = static_cast<long long>(std::llround((hi - lo) / step));
    for (long long i = 0; i <= n; ++i) v.push_back(lo + static_cast<double>(i) * step);
    return v;
  }

  std::vector<TransferDatasetSpec> transfer_datasets() const {
    std::vector<TransferDatasetSpec> out;
    for (const auto& d : tree.at("transfer").at("datasets"))
      out.push_back({d.at("name").get<std::string>(), d.at("seed").get<std::uint64_t>(), d.at("noise").get<double>()});
    return out;
  }

  void validate() const {
    try {
      model().validate();
      const auto kind = get<std::string>("dataset.kind");
      if (kind != "shapes" && kind != "cifar10") throw ConfigError("config: dataset.kind must be 'shapes' or 'cifar10'");
      if (kind == "cifar10" && get<std::size_t>("dataset.n_classes") != 10)
        throw ConfigError("config: cifar10 requires dataset.n_classes = 10");
      if (kind == "cifar10" && get<std::size_t>("dataset.grid") != 4)
        throw ConfigError("config: cifar10 requires dataset.grid = 4");
      const std::size_t g = get<std::size_t>("dataset.grid");
      if (g * g != get<std::size_t>("model.n_image_tokens"))
        throw ConfigError("config: model.n_image_tokens must equal dataset.grid squared");
      if (get<std::size_t>("prompt.template_index") >= kCaptionTemplates.size())
        throw ConfigError("config: prompt.template_index out of range");
      const double rho = get<double>("curriculum.rho");
      if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("config: curriculum.rho must lie in [0, 1]");
      if (!(get<double>("sweep.alpha_step") > 0.0)) throw ConfigError("config: sweep.alpha_step must be positive");
      auto grid = alpha_grid();
      if (std::find(grid.begin(), grid.end(), 1.0) == grid.end())
        throw ConfigError("config: the alpha grid must contain 1");
      const auto pos = get<std::string>("sweep.positions");
      if (pos != "answer" && pos != "all") throw ConfigError("config: sweep.positions must be 'answer' or 'all'");
      (void)modality_from_string(get<std::string>("plant.modality"));
      schedule();
      transfer_datasets();
      const auto& head = tree.at("transfer").at("head");
      if (!(head == "auto" || (head.is_array() && head.size() == 2)))
        throw ConfigError("config: transfer.head must be \"auto\" or [layer, head]");
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

}  // namespace conflictlens
