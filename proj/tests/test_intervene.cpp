// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include <gtest/gtest.h>

#include "conflictlens/intervene.hpp"
#include "conflictlens/plant.hpp"
#include "fixtures.hpp"

using namespace conflictlens;

namespace {

SweepSets micro_sets(std::size_t n, std::uint64_t seed) {
  return {fixtures::micro_prompts(n, PairMode::Inconsistent, Modality::Image, seed),
          fixtures::micro_prompts(n, PairMode::Inconsistent, Modality::Caption, seed + 1)};
}

TinyVLM micro_model(std::size_t n_layers, std::uint64_t seed) {
  Rng rng(seed);
  auto m = TinyVLM::random(fixtures::micro_config(n_layers), rng);
  fixtures::perturb(m, rng, 0.3);
  return m;
}

// Synthetic curve on the standard grid: target accuracy series per target,
// the rest of the answers going to the non-target label.
HeadCurve make_curve(const std::vector<double>& ti, const std::vector<double>& tc, std::size_t l = 0,
                     std::size_t h = 0) {
  HeadCurve c;
  c.layer = l;
  c.head = h;
  c.alphas = AlphaGrid::standard().values;
  for (std::size_t i = 0; i < c.alphas.size(); ++i) {
    c.of(Modality::Image).push_back({ti[i], 1.0 - ti[i], 0.0});
    c.of(Modality::Caption).push_back({tc[i], 1.0 - tc[i], 0.0});
  }
  c.baseline = {ti[11], tc[11]};
  return c;
}

std::vector<double> ramp(double from, double to, double noise = 0.0, Rng* rng = nullptr) {
  std::vector<double> v(21);
  for (std::size_t i = 0; i < 21; ++i) {
    v[i] = from + (to - from) * static_cast<double>(i) / 20.0;
    if (rng) v[i] += noise * (2.0 * rng->uniform() - 1.0);
    v[i] = std::clamp(v[i], 0.0, 1.0);
  }
  return v;
}

}  // namespace

TEST(Sweep, AlphaOneMatchesBaselineBitExact) {
  auto model = micro_model(2, 1);
  auto sets = micro_sets(60, 2);
  auto base = baseline_portions(model, sets);
  auto curves = sweep_all_heads(model, sets);
  ASSERT_EQ(curves.size(), 4u);
  const std::size_t b = AlphaGrid::standard().baseline_index();
  for (const auto& c : curves)
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_EQ(c.by_target[t][b].target, base[t].target);
      EXPECT_EQ(c.by_target[t][b].nontarget, base[t].nontarget);
      EXPECT_EQ(c.by_target[t][b].other, base[t].other);
      EXPECT_EQ(c.baseline[t], base[t].target);
    }
}

TEST(Sweep, AlphaZeroMatchesAblatedHead) {
  auto model = micro_model(1, 3);
  auto sets = micro_sets(80, 4);
  AlphaGrid g;
  g.values = {0.0, 1.0};
  for (std::size_t h = 0; h < 2; ++h) {
    auto curve = sweep_head(model, sets, 0, h, g);
    auto ablated = model;
    zero_head_output(ablated, 0, h);
    auto ref = baseline_portions(ablated, sets);
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_NEAR(curve.by_target[t][0].target, ref[t].target, 1e-6);
      EXPECT_NEAR(curve.by_target[t][0].nontarget, ref[t].nontarget, 1e-6);
    }
  }
}

TEST(Sweep, AllPositionsModeAlsoHitsBaseline) {
  auto model = micro_model(1, 5);
  auto sets = micro_sets(30, 6);
  AlphaGrid g;
  g.values = {-2.0, 1.0, 3.0};
  SweepOptions opt;
  opt.positions = InterventionPositions::All;
  auto c = sweep_head(model, sets, 0, 1, g, opt);
  auto base = baseline_portions(model, sets);
  for (std::size_t t = 0; t < 2; ++t) EXPECT_EQ(c.by_target[t][1].target, base[t].target);
  // Non-answer positions of the last layer never reach the logits.
  auto a = sweep_head(model, sets, 0, 1, g);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(a.by_target[t][k].target, c.by_target[t][k].target);
}

TEST(Sweep, FourByEightGivesThirtyTwoDeterministicCurves) {
  ModelConfig cfg = fixtures::micro_config(4);
  cfg.n_heads = 8;
  cfg.d_model = 16;
  Rng rng(7);
  auto model = TinyVLM::random(cfg, rng);
  fixtures::perturb(model, rng, 0.3);
  auto sets = micro_sets(20, 8);
  AlphaGrid g;
  g.values = {-1.0, 1.0, 4.0};
  auto a = sweep_all_heads(model, sets, g);
  SweepOptions threaded;
  threaded.threads = 3;
  auto b = sweep_all_heads(model, sets, g, threaded);
  ASSERT_EQ(a.size(), 32u);
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_EQ(a[i].layer, i / 8);
    EXPECT_EQ(a[i].head, i % 8);
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(a[i].by_target[t][k].target, b[i].by_target[t][k].target);
        EXPECT_EQ(a[i].by_target[t][k].nontarget, b[i].by_target[t][k].nontarget);
      }
  }
}

TEST(Sweep, BadArguments) {
  auto model = micro_model(1, 9);
  auto sets = micro_sets(10, 10);
  EXPECT_THROW(sweep_head(model, sets, 1, 0), IndexError);
  EXPECT_THROW(sweep_head(model, sets, 0, 2), IndexError);
  AlphaGrid g;
  g.values = {0.0, 2.0};
  EXPECT_THROW(sweep_head(model, sets, 0, 0, g), ConfigError);
}

TEST(Sweep, PortionsPartitionEachCell) {
  auto model = micro_model(1, 11);
  auto sets = micro_sets(40, 12);
  for (const auto& c : sweep_all_heads(model, sets))
    for (std::size_t t = 0; t < 2; ++t)
      for (const auto& p : c.by_target[t]) EXPECT_NEAR(p.target + p.nontarget + p.other, 1.0, 1e-12);
}

TEST(Classify, RouterFixture) {
  auto c = classify_head(make_curve(ramp(0.3, 0.9), ramp(0.2, 0.8)));
  EXPECT_EQ(c.type, HeadType::Router);
  EXPECT_TRUE(c.complementarity);
}

TEST(Classify, PromotionFixtures) {
  EXPECT_EQ(classify_head(make_curve(ramp(0.2, 0.9), ramp(0.9, 0.2))).type, HeadType::ImagePromotion);
  EXPECT_EQ(classify_head(make_curve(ramp(0.9, 0.2), ramp(0.2, 0.9))).type, HeadType::CaptionPromotion);
}

TEST(Classify, FlatNoisyCurveIsUnclassified) {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    auto c = classify_head(make_curve(ramp(0.5, 0.5, 0.3, &rng), ramp(0.5, 0.5, 0.3, &rng)));
    EXPECT_EQ(c.type, HeadType::Unclassified);
  }
}

TEST(Classify, FlatCleanCurveIsUnclassified) {
  EXPECT_EQ(classify_head(make_curve(ramp(0.7, 0.7), ramp(0.7, 0.7))).type, HeadType::Unclassified);
}

TEST(Classify, NonComplementaryFallIsUnclassified) {
  auto c = make_curve(ramp(0.3, 0.9), ramp(0.2, 0.8));
  // Image-target accuracy collapses to "other" answers at one alpha.
  auto& p = c.of(Modality::Image);
  p[15] = {0.0, p[14].nontarget, 1.0 - p[14].nontarget};
  auto r = classify_head(c);
  EXPECT_FALSE(r.complementarity);
  EXPECT_EQ(r.type, HeadType::Unclassified);
}

TEST(Classify, EpsIncreasingDefinition) {
  std::vector<double> dip = {0.1, 0.3, 0.27, 0.5};
  EXPECT_TRUE(eps_increasing(dip, 0.05));
  EXPECT_FALSE(eps_increasing(dip, 0.01));
  std::vector<double> tiny_trend = {0.50, 0.52, 0.53};
  EXPECT_FALSE(eps_increasing(tiny_trend, 0.05));
  EXPECT_TRUE(eps_decreasing(std::vector<double>{0.9, 0.6, 0.62, 0.1}, 0.05));
  EXPECT_FALSE(eps_increasing(std::vector<double>{0.5}, 0.05));
}

TEST(ClassifyProperty, ShrinkingEpsilonOnlyGrowsUnclassified) {
  Rng rng(14);
  const std::vector<double> eps = {0.2, 0.1, 0.05, 0.02, 0.01, 0.0};
  for (int t = 0; t < 300; ++t) {
    auto c = make_curve(ramp(rng.uniform(), rng.uniform(), 0.1, &rng), ramp(rng.uniform(), rng.uniform(), 0.1, &rng));
    for (std::size_t i = 1; i < eps.size(); ++i) {
      auto loose = classify_head(c, eps[i - 1]), tight = classify_head(c, eps[i]);
      if (tight.type != HeadType::Unclassified) {
        EXPECT_EQ(tight.type, loose.type);
      }
    }
  }
}

TEST(Rank, SingleHeadTopsBothLists) {
  std::vector<HeadCurve> curves = {make_curve(ramp(0.3, 0.9), ramp(0.2, 0.8), 2, 5)};
  std::vector<HeadClassification> cls = {classify_head(curves[0])};
  auto r = rank_heads(cls, curves);
  const auto* router = r.of(HeadType::Router);
  ASSERT_NE(router, nullptr);
  ASSERT_EQ(router->top_delta1.size(), 1u);
  EXPECT_EQ(router->top_delta1[0].layer, 2u);
  EXPECT_EQ(router->top_delta2[0].head, 5u);
  EXPECT_EQ(router->overlap.size(), 1u);
  EXPECT_TRUE(r.of(HeadType::ImagePromotion)->top_delta1.empty());
}

TEST(Rank, BestAtBaselineGivesZeroDelta1) {
  std::vector<double> peak(21, 0.4);
  peak[11] = 0.8;
  auto s = score_head(make_curve(peak, peak), HeadType::Unclassified);
  EXPECT_EQ(s.delta1, 0.0);
  EXPECT_EQ(s.best_alpha, 1.0);
  EXPECT_NEAR(s.delta2, 0.4, 1e-12);
}

TEST(Rank, StrongHeadBeforeWeak) {
  std::vector<HeadCurve> curves = {make_curve(ramp(0.9, 0.8), ramp(0.4, 0.5), 0, 0),
                                   make_curve(ramp(0.9, 0.5), ramp(0.4, 0.8), 1, 3)};
  std::vector<HeadClassification> cls = {classify_head(curves[0]), classify_head(curves[1])};
  ASSERT_EQ(cls[0].type, HeadType::CaptionPromotion);
  ASSERT_EQ(cls[1].type, HeadType::CaptionPromotion);
  auto r = rank_heads(cls, curves);
  const auto& top = r.of(HeadType::CaptionPromotion)->top_delta2;
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].layer, 1u);
  EXPECT_NEAR(top[0].delta2, 0.4, 1e-12);
  EXPECT_NEAR(top[1].delta2, 0.1, 1e-12);
}

TEST(Rank, MismatchedInputs) {
  std::vector<HeadCurve> curves(2, make_curve(ramp(0, 1), ramp(0, 1)));
  std::vector<HeadClassification> cls(1);
  EXPECT_THROW(rank_heads(cls, curves), DimensionError);
}

TEST(Transfer, ExpectedSigns) {
  EXPECT_EQ(expected_delta_sign(HeadType::Router, Modality::Image), 1);
  EXPECT_EQ(expected_delta_sign(HeadType::Router, Modality::Caption), 1);
  EXPECT_EQ(expected_delta_sign(HeadType::ImagePromotion, Modality::Caption), -1);
  EXPECT_EQ(expected_delta_sign(HeadType::CaptionPromotion, Modality::Image), -1);
  EXPECT_EQ(expected_delta_sign(HeadType::CaptionPromotion, Modality::Caption), 1);
  EXPECT_EQ(expected_delta_sign(HeadType::Unclassified, Modality::Image), 0);
}

TEST(Transfer, RouterImageCellArithmetic) {
  // Router row, first image column of the published transfer table.
  TransferCell c;
  c.dataset = "voc";
  c.original = 0.917;
  c.intervened = 0.952;
  c.delta = c.intervened - c.original;
  c.expected_sign = expected_delta_sign(HeadType::Router, Modality::Image);
  c.sign_matches = sign_of(c.delta) == c.expected_sign;
  EXPECT_NEAR(c.delta * 100, 3.5, 1e-9);
  EXPECT_EQ(transfer_csv(std::span<const TransferCell>(&c, 1)),
            "dataset,target_modality,original,intervened,delta,expected_sign,sign_matches\n"
            "voc,image,91.7000,95.2000,3.5000,1,1\n");
}

TEST(Transfer, AlphaOneGivesZeroDelta) {
  auto model = micro_model(1, 15);
  std::vector<TransferDataset> ds = {{"a", micro_sets(40, 16)}};
  auto cells = transfer_eval(model, 0, 1, HeadType::Router, ds, 1.0);
  ASSERT_EQ(cells.size(), 2u);
  for (const auto& c : cells) EXPECT_EQ(c.delta, 0.0);
}

TEST(PostSalience, AlphaOneShiftIsExactlyZero) {
  auto model = micro_model(2, 17);
  std::vector<TransferDataset> ds = {{"a", micro_sets(45, 18)}, {"b", micro_sets(45, 19)}};
  Rng rng(20);
  auto shifts = post_intervention_salience(model, 1, 0, ds, rng, 1.0);
  ASSERT_EQ(shifts.size(), 4u);
  for (const auto& g : shifts) {
    EXPECT_EQ(g.delta, 0.0);
    EXPECT_EQ(g.gap_before, g.gap_after);
  }
}

TEST(PostSalience, GapShiftArithmetic) {
  // Router row, first image column of the published salience table.
  GapShift g{"voc", Modality::Image, 0.567, 0.771, 0.0};
  g.delta = g.gap_after - g.gap_before;
  EXPECT_NEAR(g.delta, 0.204, 1e-12);
}

TEST(PostSalience, InterventionChangesTraces) {
  auto model = micro_model(1, 21);
  auto sets = micro_sets(10, 22);
  auto a = intervened_traces(model, sets[0], 0, 0, 1.0);
  auto b = intervened_traces(model, sets[0], 0, 0, 10.0);
  ASSERT_EQ(a.size(), 10u);
  EXPECT_EQ(a[0].residual[0], b[0].residual[0]);  // layer input is untouched
  EXPECT_NE(a[0].residual.back(), b[0].residual.back());
}

namespace {

// Two-layer image-leaning model with one caption pathway head planted into
// a slot that was held at zero during training.
struct PlantedToy {
  TinyVLM model;
  SweepSets eval;
  static constexpr std::size_t kLayer = 1, kHead = 3;
};

const PlantedToy& planted_toy() {
  static const PlantedToy toy = [] {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.d_model = 32;
    mc.n_classes = 4;
    mc.n_image_tokens = 4;
    mc.patch_dim = 4;
    mc.max_seq = 24;
    ShapesGridSpec ss;
    ss.n_classes = 4;
    ss.grid = 2;
    ss.patch_dim = 4;
    PromptFormat fmt{mc.vocab(), 2, 4};
    Rng rng(30);
    auto imgs = generate_shapes_grid(ss, 2000, rng);
    CurriculumSpec cs;
    cs.rho = 0.1;
    auto data = make_training_set(imgs, 4, cs, fmt, rng);
    Rng ir(31);
    PlantedToy t{TinyVLM::random(mc, ir), {}};
    TrainSchedule sched;
    sched.seed = 32;
    sched.frozen_heads = {{PlantedToy::kLayer, PlantedToy::kHead}};
    sched.match_weight = 1.0;
    train(t.model, data, sched);
    auto calib = generate_shapes_grid(ss, 400, rng);
    std::vector<ConflictPair> pairs;
    std::vector<EncodedPrompt> prompts;
    for (Modality m : {Modality::Image, Modality::Caption}) {
      auto s = make_eval_set(calib, 4, PairMode::Inconsistent, m, fmt, rng);
      pairs.insert(pairs.end(), s.pairs.begin(), s.pairs.end());
      prompts.insert(prompts.end(), s.prompts.begin(), s.prompts.end());
    }
    PlantOptions po;
    po.strength = 0.05;
    plant_pathway_head(t.model, PlantedToy::kLayer, PlantedToy::kHead, Modality::Caption, pairs, prompts, po);
    auto held = generate_shapes_grid(ss, 200, rng);
    t.eval = {make_eval_set(held, 4, PairMode::Inconsistent, Modality::Image, fmt, rng),
              make_eval_set(held, 4, PairMode::Inconsistent, Modality::Caption, fmt, rng)};
    return t;
  }();
  return toy;
}

double caption_label_rate(const TinyVLM& model, const EvalSet& set, double alpha) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < set.prompts.size(); ++i) {
    std::vector<HeadInterventionSpec> specs;
    if (alpha != 1.0)
      specs.push_back({PlantedToy::kLayer, PlantedToy::kHead, alpha, set.prompts[i].answer_position()});
    auto pred = predict_answer(model, set.prompts[i], specs);
    if (pred.cls && *pred.cls == set.pairs[i].caption_class) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(set.prompts.size());
}

}  // namespace

TEST(PlantedHead, AlphaTenFlipsArgmaxTowardCaption) {
  const auto& toy = planted_toy();
  const auto& set = toy.eval[static_cast<std::size_t>(Modality::Image)];
  const double before = caption_label_rate(toy.model, set, 1.0);
  const double after = caption_label_rate(toy.model, set, 10.0);
  EXPECT_LT(before, 0.5);
  EXPECT_GT(after, 0.5);
}

TEST(PlantedHead, ClassifiedAsCaptionPromotionWithExpectedSigns) {
  const auto& toy = planted_toy();
  auto curve = sweep_head(toy.model, toy.eval, PlantedToy::kLayer, PlantedToy::kHead);
  EXPECT_EQ(classify_head(curve).type, HeadType::CaptionPromotion);
  std::vector<TransferDataset> ds = {{"held", toy.eval}};
  auto cells = transfer_eval(toy.model, PlantedToy::kLayer, PlantedToy::kHead, HeadType::CaptionPromotion, ds);
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_LT(cells[0].delta, 0.0);
  EXPECT_GT(cells[1].delta, 0.0);
  EXPECT_TRUE(cells[0].sign_matches && cells[1].sign_matches);
}

TEST(Reports, CurvesCsvAndRankingJson) {
  auto c = make_curve(ramp(0.3, 0.9), ramp(0.2, 0.8), 1, 2);
  std::vector<HeadCurve> curves = {c};
  auto csv = curves_csv(curves);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "layer,head,target_modality,alpha,portion_target,portion_nontarget,portion_other");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 21);
  EXPECT_NE(csv.find("1,2,image,-10.000000,0.300000,0.700000,0.000000\n"), std::string::npos);
  std::vector<HeadClassification> cls = {classify_head(c)};
  auto j = ranking_json(cls, rank_heads(cls, curves), 0.05);
  EXPECT_EQ(j["heads"][0]["type"], "router");
  EXPECT_EQ(j["rankings"]["router"]["top_delta2"][0], nlohmann::json::array({1, 2}));
  EXPECT_TRUE(j.contains("delta2_definition"));
}
