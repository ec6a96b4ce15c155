// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "conflictlens/probelab.hpp"

using namespace conflictlens;

namespace {

ProbeDataset blobs(std::size_t n, std::size_t k, std::size_t d, double sep, double noise, Rng& rng) {
  ProbeDataset ds;
  ds.activations = Mat(n, d);
  std::vector<std::vector<double>> centers(k, std::vector<double>(d));
  for (auto& c : centers)
    for (auto& v : c) v = sep * rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % k;
    ds.labels.push_back(y);
    for (std::size_t j = 0; j < d; ++j) ds.activations(i, j) = static_cast<float>(centers[y][j] + noise * rng.normal());
  }
  return ds;
}

ProbeConfig quick(std::size_t epochs = 200) {
  ProbeConfig c;
  c.epochs = epochs;
  c.batch_size = 64;
  c.lr = 1e-2;
  return c;
}

LabeledImage dummy_image(std::size_t cls) { return {Mat(1, 1), cls}; }

// Synthetic traces: residual[0] one-hot of the caption class, residual[1]
// one-hot of the image class, residual[2] carries the consistency bit.
void synthetic_traces(std::size_t n, std::size_t C, Rng& rng, std::vector<ForwardTrace>& traces,
                      std::vector<ConflictPair>& pairs) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ic = rng.uniform_int(C);
    const bool consistent = i % 2 == 0;
    const std::size_t cc = consistent ? ic : sample_false_label(ic, C, rng);
    ConflictPair p{dummy_image(ic), cc, consistent, i % 4 < 2 ? Modality::Image : Modality::Caption, Segments::Both};
    ForwardTrace t;
    t.residual.assign(3, std::vector<float>(C + 2, 0.0f));
    for (auto& r : t.residual)
      for (auto& v : r) v = static_cast<float>(0.05 * rng.normal());
    t.residual[0][cc] += 1.0f;
    t.residual[1][ic] += 1.0f;
    t.residual[2][C] += consistent ? 1.0f : -1.0f;
    traces.push_back(std::move(t));
    pairs.push_back(std::move(p));
  }
}

}  // namespace

TEST(TrainProbe, SeparableBlobsReachFullTestAccuracy) {
  Rng rng(1);
  auto train = blobs(200, 2, 6, 3.0, 0.1, rng);
  Rng r2(1);
  auto test = blobs(100, 2, 6, 3.0, 0.1, r2);
  Rng pr(2);
  auto p = train_probe(train, pr, quick());
  EXPECT_EQ(probe_accuracy(p, test), 1.0);
  EXPECT_EQ(p.n_train + p.n_val, 200u);
}

TEST(TrainProbe, ShuffledLabelsStayAtChance) {
  Rng rng(3);
  auto train = blobs(400, 4, 8, 0.0, 1.0, rng);
  auto test = blobs(400, 4, 8, 0.0, 1.0, rng);
  for (auto& y : train.labels) y = rng.uniform_int(4);
  for (auto& y : test.labels) y = rng.uniform_int(4);
  Rng pr(4);
  auto p = train_probe(train, pr, quick());
  EXPECT_NEAR(probe_accuracy(p, test), 0.25, 0.1);
}

TEST(TrainProbe, DuplicatedRowsGiveSameWeights) {
  Rng rng(5);
  auto ds = blobs(60, 3, 5, 1.0, 0.5, rng);
  ProbeDataset dup = ds;
  dup.activations = Mat(120, 5);
  for (std::size_t i = 0; i < 60; ++i) {
    std::copy(ds.activations.row(i).begin(), ds.activations.row(i).end(), dup.activations.row(2 * i).begin());
    std::copy(ds.activations.row(i).begin(), ds.activations.row(i).end(), dup.activations.row(2 * i + 1).begin());
  }
  dup.labels.clear();
  for (auto y : ds.labels) dup.labels.insert(dup.labels.end(), {y, y});
  ProbeConfig cfg = quick(100);
  cfg.batch_size = 1000;  // full batch: the mean gradient ignores duplication
  Rng a(6), b(6);
  auto pa = train_probe(ds, a, cfg), pb = train_probe(dup, b, cfg);
  EXPECT_EQ(pa.best_epoch, pb.best_epoch);
  for (std::size_t i = 0; i < pa.W.size(); ++i) EXPECT_NEAR(pa.W.data[i], pb.W.data[i], 1e-5);
  for (std::size_t j = 0; j < pa.b.size(); ++j) EXPECT_NEAR(pa.b[j], pb.b[j], 1e-5);
}

TEST(TrainProbe, DeterministicGivenSeed) {
  Rng rng(7);
  auto ds = blobs(150, 3, 4, 1.0, 1.0, rng);
  Rng a(8), b(8);
  auto pa = train_probe(ds, a, quick(50)), pb = train_probe(ds, b, quick(50));
  EXPECT_EQ(pa.W, pb.W);
  EXPECT_NEAR(probe_accuracy(pa, ds), probe_accuracy(pb, ds), 1e-6);
}

TEST(TrainProbe, TrainRowsScoreAtLeastValidationRows) {
  Rng rng(9);
  auto ds = blobs(80, 4, 30, 0.4, 1.0, rng);
  ProbeConfig cfg = quick(300);
  Rng split(10);
  auto [tr, va] = detail::grouped_split(ds, cfg.val_fraction, split);
  Rng pr(10);
  auto p = train_probe(ds, pr, cfg);
  EXPECT_GE(probe_accuracy(p, ds.subset(tr)), probe_accuracy(p, ds.subset(va)));
}

TEST(TrainProbe, DegenerateInputsRejected) {
  Rng rng(11);
  auto tiny = blobs(9, 2, 3, 1.0, 1.0, rng);
  EXPECT_THROW(train_probe(tiny, rng), DegenerateDataError);
  auto single = blobs(50, 2, 3, 1.0, 1.0, rng);
  std::fill(single.labels.begin(), single.labels.end(), 1);
  EXPECT_THROW(train_probe(single, rng), DegenerateDataError);
  auto bad = blobs(20, 2, 3, 1.0, 1.0, rng);
  bad.labels.pop_back();
  EXPECT_THROW(train_probe(bad, rng), DimensionError);
}

TEST(GroupedSplit, IdenticalRowsStayTogether) {
  Rng rng(12);
  auto ds = blobs(40, 2, 3, 1.0, 1.0, rng);
  auto dup = ds.subset(std::vector<std::size_t>{0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9});
  Rng sr(13);
  auto [tr, va] = detail::grouped_split(dup, 0.3, sr);
  std::set<std::size_t> vs(va.begin(), va.end());
  for (std::size_t i = 0; i < 20; i += 2) EXPECT_EQ(vs.count(i), vs.count(i + 1));
  EXPECT_EQ(tr.size() + va.size(), 20u);
}

TEST(ClassFolds, SixClassesSplitEvenly) {
  Rng rng(14);
  auto folds = make_class_folds(6, rng);
  for (const auto& s : folds[0].subsets) EXPECT_EQ(s.size(), 2u);
}

TEST(ClassFolds, TenClassesSplitFourThreeThree) {
  Rng rng(15);
  auto folds = make_class_folds(ClassSet::cifar10(), rng);
  std::multiset<std::size_t> sizes;
  for (const auto& s : folds[0].subsets) sizes.insert(s.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{3, 3, 4}));
  std::set<std::size_t> all;
  for (const auto& s : folds[0].subsets) all.insert(s.begin(), s.end());
  EXPECT_EQ(all.size(), 10u);
  for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(folds[f].held_out, f);
}

TEST(ClassFolds, TooFewClassesIsDegenerate) {
  Rng rng(16);
  EXPECT_THROW(make_class_folds(2, rng), DegenerateDataError);
}

TEST(ClassFoldsProperty, EveryPairLandsInExactlyOneRegime) {
  for (std::size_t C : {3u, 4u, 7u, 10u, 13u}) {
    Rng rng(C);
    auto folds = make_class_folds(C, rng);
    for (const auto& f : folds) {
      const auto& h = f.subsets[f.held_out];
      for (std::size_t a = 0; a < C; ++a)
        for (std::size_t b = 0; b < C; ++b) {
          const bool ha = std::count(h.begin(), h.end(), a) > 0, hb = std::count(h.begin(), h.end(), b) > 0;
          const Regime r = f.regime(a, b);
          EXPECT_EQ(r == Regime::ID, !ha && !hb);
          EXPECT_EQ(r == Regime::OOD, ha && hb);
          EXPECT_EQ(r == Regime::SID, ha != hb);
        }
    }
  }
}

TEST(UnimodalSuite, LayerWiseInformationIsFound) {
  Rng rng(17);
  std::vector<ForwardTrace> traces;
  std::vector<ConflictPair> pairs;
  synthetic_traces(400, 6, rng, traces, pairs);
  ProbeSuiteConfig cfg;
  cfg.probe = quick(150);
  Rng sr(18);
  auto res = unimodal_probe_suite(traces, pairs, 6, sr, cfg);
  EXPECT_EQ(res.size(), 3u * 2u * 2u);
  for (Modality t : {Modality::Image, Modality::Caption}) {
    EXPECT_GE(find_probe_result(res, 0, ProbeKind::CaptionLabel, t, Regime::Plain)->accuracy, 0.95);
    EXPECT_GE(find_probe_result(res, 1, ProbeKind::ImageLabel, t, Regime::Plain)->accuracy, 0.95);
    // Layer 0 holds only the caption class; image accuracy there comes from
    // the consistent half alone.
    EXPECT_LT(find_probe_result(res, 0, ProbeKind::ImageLabel, t, Regime::Plain)->accuracy, 0.8);
  }
  EXPECT_THROW(unimodal_probe_suite(traces, std::span<const ConflictPair>(pairs).subspan(1), 6, sr, cfg),
               DimensionError);
}

TEST(ConsistencySuite, RegimesAndClassBalance) {
  Rng rng(19);
  std::vector<ForwardTrace> traces;
  std::vector<ConflictPair> pairs;
  synthetic_traces(1200, 9, rng, traces, pairs);
  Rng fr(20);
  auto folds = make_class_folds(9, fr);
  ProbeSuiteConfig cfg;
  cfg.probe = quick(100);
  Rng sr(21);
  auto res = consistency_probe_suite(traces, pairs, folds, sr, cfg);
  for (Modality t : {Modality::Image, Modality::Caption}) {
    const auto* id = find_probe_result(res, 2, ProbeKind::Consistency, t, Regime::ID);
    const auto* ood = find_probe_result(res, 2, ProbeKind::Consistency, t, Regime::OOD);
    const auto* sid = find_probe_result(res, 2, ProbeKind::Consistency, t, Regime::SID);
    ASSERT_TRUE(id && ood && sid);
    EXPECT_GE(id->accuracy, 0.95);
    EXPECT_GE(ood->accuracy, 0.95);
    EXPECT_EQ(sid->consistent_fraction, 0.0);
    EXPECT_GT(sid->n, 0u);
  }
}

TEST(ProbeReport, CsvColumns) {
  std::vector<ProbeResult> rows = {{3, ProbeKind::Consistency, Modality::Caption, Regime::OOD, 0.5, 40, 0.5}};
  auto csv = probe_report_csv(rows);
  EXPECT_EQ(csv, "layer,probe_kind,target_modality,regime,accuracy,n\n3,consistency,caption,OOD,0.500000,40\n");
}
