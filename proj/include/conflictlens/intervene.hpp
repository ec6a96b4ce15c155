// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Per-head alpha sweeps, head-type classification, ranking, and transfer of
// a chosen head to other datasets.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "conflictlens/conflictgen.hpp"
#include "conflictlens/curriculum.hpp"
#include "conflictlens/model.hpp"
#include "conflictlens/parallel.hpp"
#include "conflictlens/saliencelab.hpp"

namespace conflictlens {

struct AlphaGrid {
  std::vector<double> values;

  static AlphaGrid standard() {
    AlphaGrid g;
    for (int a = -10; a <= 10; ++a) g.values.push_back(static_cast<double>(a));
    return g;
  }

  std::size_t size() const { return values.size(); }

  // Index of alpha = 1 (the uninterfered baseline).
  std::size_t baseline_index() const {
    for (std::size_t i = 0; i < values.size(); ++i)
      if (values[i] == 1.0) return i;
    throw ConfigError("AlphaGrid: grid must contain alpha = 1");
  }
};

// Evaluation pairs for both target conditions, indexed by Modality.
using SweepSets = std::array<EvalSet, 2>;

struct Portions {
  double target = 0.0;
  double nontarget = 0.0;
  double other = 0.0;
};

inline Portions portions_of(const BehavioralBreakdown& b) {
  return {b.accuracy(), b.fraction(Behavior::Misled),
          b.fraction(Behavior::InOptionIncorrect) + b.fraction(Behavior::OutOfOption)};
}

struct HeadCurve {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> alphas;
  std::array<std::vector<Portions>, 2> by_target;  // [modality][alpha]
  std::array<double, 2> baseline{0.0, 0.0};        // target portion at alpha = 1

  const std::vector<Portions>& of(Modality m) const { return by_target[static_cast<std::size_t>(m)]; }
  std::vector<Portions>& of(Modality m) { return by_target[static_cast<std::size_t>(m)]; }

  // Portion answering with `answer` modality's label under `target`.
  std::vector<double> answer_portion(Modality target, Modality answer) const {
    std::vector<double> out;
    for (const auto& p : of(target)) out.push_back(answer == target ? p.target : p.nontarget);
    return out;
  }
};

enum class InterventionPositions : std::uint8_t { Answer, All };

struct SweepOptions {
  InterventionPositions positions = InterventionPositions::Answer;
  std::size_t threads = 1;
  bool strict = false;
};

namespace detail {

// One baseline forward per prompt, reused across every head and alpha.
struct SweepContext {
  const TinyVLM* model;
  const SweepSets* sets;
  std::array<std::vector<AnswerRowEvaluator<float>>, 2> evals;

  SweepContext(const TinyVLM& m, const SweepSets& s) : model(&m), sets(&s) {
    for (std::size_t t = 0; t < 2; ++t) {
      evals[t].reserve(s[t].prompts.size());
      for (const auto& p : s[t].prompts) evals[t].emplace_back(m, p);
    }
  }
};

inline std::vector<HeadInterventionSpec> specs_for(const EncodedPrompt& prompt, std::size_t layer,
                                                   std::size_t head, double alpha,
                                                   InterventionPositions mode) {
  std::vector<HeadInterventionSpec> specs;
  if (mode == InterventionPositions::Answer) {
    specs.push_back({layer, head, alpha, prompt.answer_position()});
  } else {
    for (std::size_t p = 0; p < prompt.length(); ++p) specs.push_back({layer, head, alpha, p});
  }
  return specs;
}

inline HeadCurve sweep_with_context(const SweepContext& ctx, std::size_t layer, std::size_t head,
                                    const AlphaGrid& grid, const SweepOptions& opt) {
  const auto& model = *ctx.model;
  HeadCurve curve;
  curve.layer = layer;
  curve.head = head;
  curve.alphas = grid.values;
  const Vocabulary vocab = model.vocab();
  for (std::size_t t = 0; t < 2; ++t) {
    const auto& set = (*ctx.sets)[t];
    for (double alpha : grid.values) {
      BehavioralBreakdown b;
      for (std::size_t i = 0; i < set.prompts.size(); ++i) {
        const auto& prompt = set.prompts[i];
        auto specs = specs_for(prompt, layer, head, alpha, opt.positions);
        std::vector<float> logits;
        if (opt.positions == InterventionPositions::Answer)
          logits = ctx.evals[t][i].logits(specs);
        else
          logits = forward(model, prompt, specs).logits;
        auto pred = predict_from_logits<float>(vocab, std::span<const float>(logits), opt.strict);
        b.add(classify_prediction(pred.cls, set.pairs[i], prompt.options));
      }
      curve.by_target[t].push_back(portions_of(b));
    }
    curve.baseline[t] = curve.by_target[t][grid.baseline_index()].target;
  }
  return curve;
}

}  // namespace detail

inline HeadCurve sweep_head(const TinyVLM& model, const SweepSets& sets, std::size_t layer,
                            std::size_t head, const AlphaGrid& grid = AlphaGrid::standard(),
                            const SweepOptions& opt = {}) {
  if (layer >= model.config.n_layers || head >= model.config.n_heads)
    throw IndexError("sweep_head: head (" + std::to_string(layer) + ", " + std::to_string(head) +
                     ") out of range");
  detail::SweepContext ctx(model, sets);
  return detail::sweep_with_context(ctx, layer, head, grid, opt);
}

// Layer-major over every head.
inline std::vector<HeadCurve> sweep_all_heads(const TinyVLM& model, const SweepSets& sets,
                                              const AlphaGrid& grid = AlphaGrid::standard(),
                                              const SweepOptions& opt = {}) {
  detail::SweepContext ctx(model, sets);
  const std::size_t H = model.config.n_heads, n = model.config.n_layers * H;
  std::vector<HeadCurve> out(n);
  parallel_for(n, opt.threads, [&](std::size_t i) {
    out[i] = detail::sweep_with_context(ctx, i / H, i % H, grid, opt);
  });
  return out;
}

// No-intervention evaluation with the same tallying as the sweep.
inline std::array<Portions, 2> baseline_portions(const TinyVLM& model, const SweepSets& sets,
                                                 bool strict = false) {
  std::array<Portions, 2> out;
  for (std::size_t t = 0; t < 2; ++t) out[t] = portions_of(evaluate_behavior(model, sets[t], {}, strict));
  return out;
}

// ---------------------------------------------------------------------------
// Classification

enum class HeadType : std::uint8_t { Router, ImagePromotion, CaptionPromotion, Unclassified };

inline std::string_view to_string(HeadType t) {
  switch (t) {
    case HeadType::Router: return "router";
    case HeadType::ImagePromotion: return "image_promotion";
    case HeadType::CaptionPromotion: return "caption_promotion";
    case HeadType::Unclassified: return "unclassified";
  }
  return "?";
}

// Default net change a trend must show end to end. Kept separate from eps so
// that shrinking eps only ever tightens the drop tolerance.
inline constexpr double kMinTrend = 0.05;

// Increasing up to local drops: no value falls more than eps below the running
// maximum, and the series ends more than min_trend above where it started.
inline bool eps_increasing(std::span<const double> xs, double eps, double min_trend = kMinTrend) {
  if (xs.size() < 2) return false;
  double run_max = xs[0];
  for (double x : xs) {
    run_max = std::max(run_max, x);
    if (run_max - x > eps) return false;
  }
  return xs.back() - xs.front() > min_trend;
}

inline bool eps_decreasing(std::span<const double> xs, double eps, double min_trend = kMinTrend) {
  std::vector<double> neg(xs.begin(), xs.end());
  for (double& v : neg) v = -v;
  return eps_increasing(neg, eps, min_trend);
}

// Under one target condition: wherever the image-answer or caption-answer
// portion falls by more than eps between adjacent alphas, the other must rise
// by at least half of that fall.
inline bool complementary(std::span<const double> img, std::span<const double> cap, double eps) {
  for (std::size_t i = 1; i < img.size(); ++i) {
    const double di = img[i] - img[i - 1], dc = cap[i] - cap[i - 1];
    if (-di > eps && dc < -di / 2.0) return false;
    if (-dc > eps && di < -dc / 2.0) return false;
  }
  return true;
}

struct HeadClassification {
  std::size_t layer = 0;
  std::size_t head = 0;
  HeadType type = HeadType::Unclassified;
  double epsilon = 0.05;
  bool complementarity = false;
};

inline HeadClassification classify_head(const HeadCurve& curve, double epsilon = 0.05,
                                        double min_trend = kMinTrend) {
  HeadClassification c{curve.layer, curve.head, HeadType::Unclassified, epsilon, false};
  const auto ti = curve.answer_portion(Modality::Image, Modality::Image);
  const auto tc = curve.answer_portion(Modality::Caption, Modality::Caption);
  c.complementarity = true;
  for (Modality t : {Modality::Image, Modality::Caption}) {
    const auto img = curve.answer_portion(t, Modality::Image);
    const auto cap = curve.answer_portion(t, Modality::Caption);
    if (!complementary(img, cap, epsilon)) c.complementarity = false;
  }
  if (!c.complementarity) return c;
  const bool inc_i = eps_increasing(ti, epsilon, min_trend), inc_c = eps_increasing(tc, epsilon, min_trend);
  if (inc_i && inc_c) {
    c.type = HeadType::Router;
  } else if (inc_i && eps_decreasing(tc, epsilon, min_trend)) {
    c.type = HeadType::ImagePromotion;
  } else if (inc_c && eps_decreasing(ti, epsilon, min_trend)) {
    c.type = HeadType::CaptionPromotion;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Ranking

// The accuracy series a head type is judged on: mean target accuracy for
// routers and unclassified heads, the promoted modality's target accuracy
// for promotion heads.
inline std::vector<double> trait_series(const HeadCurve& curve, HeadType type) {
  const auto ti = curve.answer_portion(Modality::Image, Modality::Image);
  const auto tc = curve.answer_portion(Modality::Caption, Modality::Caption);
  if (type == HeadType::ImagePromotion) return ti;
  if (type == HeadType::CaptionPromotion) return tc;
  std::vector<double> m(ti.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (ti[i] + tc[i]);
  return m;
}

struct HeadScore {
  std::size_t layer = 0;
  std::size_t head = 0;
  HeadType type = HeadType::Unclassified;
  double delta1 = 0.0;  // best accuracy over alpha minus baseline
  double delta2 = 0.0;  // max minus min of the trait series over alpha
  double best_alpha = 1.0;
};

inline HeadScore score_head(const HeadCurve& curve, HeadType type) {
  HeadScore s{curve.layer, curve.head, type, 0.0, 0.0, 1.0};
  const auto series = trait_series(curve, type);
  std::size_t base = 0;
  for (std::size_t i = 0; i < curve.alphas.size(); ++i)
    if (curve.alphas[i] == 1.0) base = i;
  std::size_t best = base;
  for (std::size_t i = 0; i < series.size(); ++i)
    if (series[i] > series[best]) best = i;
  s.delta1 = series[best] - series[base];
  s.best_alpha = curve.alphas[best];
  auto [mn, mx] = std::minmax_element(series.begin(), series.end());
  s.delta2 = *mx - *mn;
  return s;
}

struct TypeRanking {
  HeadType type = HeadType::Unclassified;
  std::vector<HeadScore> top_delta1;
  std::vector<HeadScore> top_delta2;
  std::vector<std::pair<std::size_t, std::size_t>> overlap;  // in both lists
};

struct HeadRanking {
  std::vector<HeadScore> scores;  // one per head, layer-major
  std::vector<TypeRanking> by_type;

  const TypeRanking* of(HeadType t) const {
    for (const auto& r : by_type)
      if (r.type == t) return &r;
    return nullptr;
  }
};

inline HeadRanking rank_heads(std::span<const HeadClassification> classes, std::span<const HeadCurve> curves,
                              std::size_t top_k = 5) {
  if (classes.size() != curves.size()) throw DimensionError("rank_heads: classifications/curves mismatch");
  HeadRanking r;
  for (std::size_t i = 0; i < curves.size(); ++i) r.scores.push_back(score_head(curves[i], classes[i].type));
  for (HeadType t : {HeadType::Router, HeadType::ImagePromotion, HeadType::CaptionPromotion}) {
    TypeRanking tr;
    tr.type = t;
    std::vector<HeadScore> members;
    for (const auto& s : r.scores)
      if (s.type == t) members.push_back(s);
    auto top = [&](auto key) {
      auto v = members;
      std::stable_sort(v.begin(), v.end(), [&](const HeadScore& a, const HeadScore& b) { return key(a) > key(b); });
      if (v.size() > top_k) v.resize(top_k);
      return v;
    };
    tr.top_delta1 = top([](const HeadScore& s) { return s.delta1; });
    tr.top_delta2 = top([](const HeadScore& s) { return s.delta2; });
    for (const auto& a : tr.top_delta1)
      for (const auto& b : tr.top_delta2)
        if (a.layer == b.layer && a.head == b.head) tr.overlap.emplace_back(a.layer, a.head);
    r.by_type.push_back(std::move(tr));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Transfer

struct TransferDataset {
  std::string name;
  SweepSets sets;
};

struct TransferCell {
  std::string dataset;
  Modality target = Modality::Image;
  double original = 0.0;
  double intervened = 0.0;
  double delta = 0.0;
  int expected_sign = 0;  // +1, -1, or 0 when the head type has no expectation
  bool sign_matches = false;
};

inline int expected_delta_sign(HeadType type, Modality target) {
  switch (type) {
    case HeadType::Router: return 1;
    case HeadType::ImagePromotion: return target == Modality::Image ? 1 : -1;
    case HeadType::CaptionPromotion: return target == Modality::Caption ? 1 : -1;
    case HeadType::Unclassified: return 0;
  }
  return 0;
}

inline int sign_of(double v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); }

inline std::vector<TransferCell> transfer_eval(const TinyVLM& model, std::size_t layer, std::size_t head,
                                               HeadType type, std::span<const TransferDataset> datasets,
                                               double alpha = 10.0, const SweepOptions& opt = {}) {
  std::vector<TransferCell> out;
  AlphaGrid g;
  g.values = {1.0, alpha};
  for (const auto& ds : datasets) {
    auto curve = sweep_head(model, ds.sets, layer, head, g, opt);
    for (Modality t : {Modality::Image, Modality::Caption}) {
      TransferCell c;
      c.dataset = ds.name;
      c.target = t;
      c.original = curve.of(t)[0].target;
      c.intervened = curve.of(t)[1].target;
      c.delta = c.intervened - c.original;
      c.expected_sign = expected_delta_sign(type, t);
      c.sign_matches = c.expected_sign != 0 && sign_of(c.delta) == c.expected_sign;
      out.push_back(c);
    }
  }
  return out;
}

inline std::string transfer_csv(std::span<const TransferCell> cells) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed << "dataset,target_modality,original,intervened,delta,expected_sign,sign_matches\n";
  for (const auto& c : cells)
    os << c.dataset << ',' << to_string(c.target) << ',' << c.original * 100 << ',' << c.intervened * 100 << ','
       << c.delta * 100 << ',' << c.expected_sign << ',' << (c.sign_matches ? 1 : 0) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Salience under a standing intervention

struct GapShift {
  std::string dataset;
  Modality target = Modality::Image;
  double gap_before = 0.0;
  double gap_after = 0.0;
  double delta = 0.0;
};

// Answer-position traces of every conflicting prompt in `set`, with the head
// scaled by alpha (alpha = 1 is the plain forward).
inline std::vector<ForwardTrace> intervened_traces(const TinyVLM& model, const EvalSet& set, std::size_t layer,
                                                   std::size_t head, double alpha,
                                                   InterventionPositions mode = InterventionPositions::Answer) {
  std::vector<ForwardTrace> out;
  for (const auto& prompt : set.prompts) {
    auto specs = alpha == 1.0 ? std::vector<HeadInterventionSpec>{}
                              : detail::specs_for(prompt, layer, head, alpha, mode);
    if (mode == InterventionPositions::Answer) {
      AnswerRowEvaluator<float> ev(model, prompt);
      ForwardTrace tr;
      ev.logits(specs, &tr);
      out.push_back(std::move(tr));
    } else {
      out.push_back(*forward(model, prompt, specs, CaptureFlags{true, false}).trace);
    }
  }
  return out;
}

inline std::vector<GapShift> post_intervention_salience(const TinyVLM& model, std::size_t layer, std::size_t head,
                                                        std::span<const TransferDataset> datasets, Rng& rng,
                                                        double alpha = 10.0,
                                                        InterventionPositions mode = InterventionPositions::Answer) {
  std::vector<GapShift> out;
  const std::size_t C = model.config.n_classes;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& ds = datasets[d];
    for (Modality t : {Modality::Image, Modality::Caption}) {
      const auto& set = ds.sets[static_cast<std::size_t>(t)];
      std::vector<ConflictPair> pairs;
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < set.pairs.size(); ++i)
        if (!set.pairs[i].consistent) keep.push_back(i);
      EvalSet conflicting;
      for (std::size_t i : keep) {
        conflicting.pairs.push_back(set.pairs[i]);
        conflicting.prompts.push_back(set.prompts[i]);
      }
      // Same clustering seeds before and after, so alpha = 1 gives a zero shift.
      const std::uint64_t cell = d * 2 + static_cast<std::size_t>(t);
      Rng r0 = rng.substream("post_salience", cell), r1 = rng.substream("post_salience", cell);
      auto before = salience_profile(intervened_traces(model, conflicting, layer, head, 1.0, mode),
                                     conflicting.pairs, C, r0);
      auto after = salience_profile(intervened_traces(model, conflicting, layer, head, alpha, mode),
                                    conflicting.pairs, C, r1);
      GapShift g;
      g.dataset = ds.name;
      g.target = t;
      g.gap_before = before.back().gap(t);
      g.gap_after = after.back().gap(t);
      g.delta = g.gap_after - g.gap_before;
      out.push_back(g);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string curves_csv(std::span<const HeadCurve> curves) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "layer,head,target_modality,alpha,portion_target,portion_nontarget,portion_other\n";
  for (const auto& c : curves)
    for (Modality t : {Modality::Image, Modality::Caption})
      for (std::size_t i = 0; i < c.alphas.size(); ++i) {
        const auto& p = c.of(t)[i];
        os << c.layer << ',' << c.head << ',' << to_string(t) << ',' << c.alphas[i] << ',' << p.target << ','
           << p.nontarget << ',' << p.other << '\n';
      }
  return os.str();
}

inline nlohmann::json ranking_json(std::span<const HeadClassification> classes, const HeadRanking& ranking,
                                   double epsilon) {
  using nlohmann::json;
  json j;
  j["epsilon"] = epsilon;
  j["delta2_definition"] = "max minus min over alpha of the trait-direction accuracy";
  json heads = json::array();
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto& s = ranking.scores.at(i);
    heads.push_back({{"layer", s.layer},
                     {"head", s.head},
                     {"type", to_string(classes[i].type)},
                     {"complementarity", classes[i].complementarity},
                     {"delta1", s.delta1},
                     {"delta2", s.delta2},
                     {"best_alpha", s.best_alpha}});
  }
  j["heads"] = heads;
  json types = json::object();
  for (const auto& tr : ranking.by_type) {
    auto ids = [](const std::vector<HeadScore>& v) {
      json a = json::array();
      for (const auto& s : v) a.push_back({s.layer, s.head});
      return a;
    };
    json ov = json::array();
    for (auto [l, h] : tr.overlap) ov.push_back({l, h});
    types[std::string(to_string(tr.type))] = {
        {"top_delta1", ids(tr.top_delta1)}, {"top_delta2", ids(tr.top_delta2)}, {"overlap", ov}};
  }
  j["rankings"] = types;
  return j;
}

}  // namespace conflictlens
