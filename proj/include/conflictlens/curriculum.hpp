// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Training mixtures that induce a controlled modality preference, and
// behavioral evaluation of a model over prompt sets.

#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "conflictlens/conflictgen.hpp"
#include "conflictlens/model.hpp"

namespace conflictlens {

// Each image becomes one training prompt whose kind is drawn from the four
// fractions. Conflicting prompts are supervised with the favored modality's
// label (caption when rho > 0.5, image when rho < 0.5) with probability
// |2 rho - 1| and with the target label otherwise, so that a fraction rho of
// all conflicting prompts carry the caption label.
struct CurriculumSpec {
  double rho = 0.5;
  double frac_unimodal_image = 0.25;
  double frac_unimodal_caption = 0.25;
  double frac_consistent = 0.47;
  double frac_inconsistent = 0.03;
};

inline std::size_t curriculum_label(const ConflictPair& pair, double rho, Rng& rng) {
  if (pair.consistent || pair.segments != Segments::Both) return pair.target_label();
  const double bias = std::abs(2.0 * rho - 1.0);
  if (bias > 0.0 && rng.uniform() < bias)
    return pair.label(rho > 0.5 ? Modality::Caption : Modality::Image);
  return pair.target_label();
}

inline std::vector<TrainExample> make_training_set(std::span<const LabeledImage> images,
                                                   std::size_t n_classes,
                                                   const CurriculumSpec& spec,
                                                   const PromptFormat& fmt, Rng& rng) {
  if (spec.rho < 0.0 || spec.rho > 1.0) throw ConfigError("curriculum: rho must lie in [0, 1]");
  const double total = spec.frac_unimodal_image + spec.frac_unimodal_caption +
                       spec.frac_consistent + spec.frac_inconsistent;
  if (!(total > 0.0)) throw ConfigError("curriculum: mixture fractions must sum to > 0");
  std::vector<TrainExample> out;
  out.reserve(images.size());
  for (const auto& im : images) {
    const double u = rng.uniform() * total;
    PairMode mode = PairMode::Inconsistent;
    if (u < spec.frac_unimodal_image) {
      mode = PairMode::UnimodalImage;
    } else if (u < spec.frac_unimodal_image + spec.frac_unimodal_caption) {
      mode = PairMode::UnimodalCaption;
    } else if (u < spec.frac_unimodal_image + spec.frac_unimodal_caption + spec.frac_consistent) {
      mode = PairMode::Consistent;
    }
    const Modality target = rng.uniform_int(2) == 0 ? Modality::Image : Modality::Caption;
    auto pairs = make_pairs(std::span<const LabeledImage>(&im, 1), n_classes, mode, target, rng);
    const std::size_t label = curriculum_label(pairs[0], spec.rho, rng);
    std::optional<bool> consistent;
    if (pairs[0].segments == Segments::Both) consistent = pairs[0].consistent;
    out.push_back({build_prompt(pairs[0], fmt, rng), label, consistent});
  }
  return out;
}

struct EvalSet {
  std::vector<ConflictPair> pairs;
  std::vector<EncodedPrompt> prompts;
};

inline EvalSet make_eval_set(std::span<const LabeledImage> images, std::size_t n_classes,
                             PairMode mode, Modality target, const PromptFormat& fmt, Rng& rng) {
  EvalSet s;
  s.pairs = make_pairs(images, n_classes, mode, target, rng);
  for (const auto& p : s.pairs) s.prompts.push_back(build_prompt(p, fmt, rng));
  return s;
}

inline BehavioralBreakdown evaluate_behavior(const TinyVLM& model, const EvalSet& set,
                                             std::span<const HeadInterventionSpec> specs = {},
                                             bool strict = false) {
  BehavioralBreakdown b;
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    auto pred = predict_answer(model, set.prompts[i], specs, strict);
    b.add(classify_prediction(pred.cls, set.pairs[i], set.prompts[i].options));
  }
  return b;
}

}  // namespace conflictlens
