// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Linear probes over answer-position residual activations: unimodal label
// probes and consistency probes evaluated with a 3-fold class split
// (ID / OOD / SID).

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "conflictlens/conflictgen.hpp"
#include "conflictlens/errors.hpp"
#include "conflictlens/model.hpp"
#include "conflictlens/numerics.hpp"

namespace conflictlens {

struct ProbeRowMeta {
  std::size_t image_class = 0;
  std::size_t caption_class = 0;
  Modality target = Modality::Image;
};

struct ProbeDataset {
  Mat activations;                  // n x d
  std::vector<std::size_t> labels;  // n
  std::vector<ProbeRowMeta> meta;   // n, may be empty

  std::size_t size() const { return labels.size(); }

  void check() const {
    if (activations.rows != labels.size() || (!meta.empty() && meta.size() != labels.size()))
      throw DimensionError("ProbeDataset: row counts differ across fields");
  }

  ProbeDataset subset(std::span<const std::size_t> rows) const {
    ProbeDataset out;
    out.activations = Mat(rows.size(), activations.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = activations.row(rows[i]);
      std::copy(src.begin(), src.end(), out.activations.row(i).begin());
      out.labels.push_back(labels[rows[i]]);
      if (!meta.empty()) out.meta.push_back(meta[rows[i]]);
    }
    return out;
  }
};

struct ProbeConfig {
  std::size_t epochs = 1000;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double val_fraction = 0.2;
};

struct LinearProbe {
  Mat W;               // d x n_out
  std::vector<double> b;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;

  std::size_t n_out() const { return W.cols; }

  std::vector<double> logits(std::span<const float> x) const {
    std::vector<double> z(b);
    for (std::size_t i = 0; i < W.rows; ++i) {
      const double xi = x[i];
      for (std::size_t j = 0; j < W.cols; ++j) z[j] += xi * static_cast<double>(W(i, j));
    }
    return z;
  }

  std::size_t predict(std::span<const float> x) const {
    auto z = logits(x);
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
};

namespace detail {

// Mean cross-entropy of the probe over `rows`; accumulates gradients when
// gW/gb are given.
inline double probe_loss(const LinearProbe& p, const ProbeDataset& data,
                         std::span<const std::size_t> rows, std::vector<double>* gW,
                         std::vector<double>* gb) {
  double loss = 0.0;
  const std::size_t k = p.n_out(), d = p.W.rows;
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    auto x = data.activations.row(r);
    auto z = p.logits(x);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      s += v;
    }
    const std::size_t y = data.labels[r];
    loss += -std::log(z[y] / s) * inv;
    if (gW) {
      for (std::size_t j = 0; j < k; ++j) {
        const double g = (z[j] / s - (j == y ? 1.0 : 0.0)) * inv;
        (*gb)[j] += g;
        for (std::size_t i = 0; i < d; ++i) (*gW)[i * k + j] += static_cast<double>(x[i]) * g;
      }
    }
  }
  return loss;
}

// Splits row indices into (train, val). Identical rows (same activations and
// label) are kept on the same side so duplicated data cannot leak across it.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> grouped_split(
    const ProbeDataset& data, double val_fraction, Rng& rng) {
  std::map<std::pair<std::vector<float>, std::size_t>, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < data.size(); ++r) {
    auto row = data.activations.row(r);
    auto key = std::make_pair(std::vector<float>(row.begin(), row.end()), data.labels[r]);
    auto [it, inserted] = group_of.emplace(std::move(key), groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(r);
  }
  auto order = rng.permutation(groups.size());
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(groups.size())));
  std::vector<std::size_t> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_val ? val : train;
    for (std::size_t r : groups[order[i]]) dst.push_back(r);
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

}  // namespace detail

// Multinomial logistic regression trained with Adam for a fixed number of
// epochs; returns the weights with the lowest validation loss seen.
inline LinearProbe train_probe(const ProbeDataset& data, Rng& rng, const ProbeConfig& cfg = {},
                               std::size_t n_out = 0) {
  data.check();
  if (data.size() < 10) throw DegenerateDataError("train_probe: need at least 10 rows");
  const std::size_t n_labels_seen =
      std::set<std::size_t>(data.labels.begin(), data.labels.end()).size();
  if (n_labels_seen < 2) throw DegenerateDataError("train_probe: data has a single label");
  if (n_out == 0) n_out = *std::max_element(data.labels.begin(), data.labels.end()) + 1;

  auto [train_rows, val_rows] = detail::grouped_split(data, cfg.val_fraction, rng);
  if (train_rows.empty()) throw DegenerateDataError("train_probe: empty training split");
  if (val_rows.empty()) val_rows = train_rows;

  const std::size_t d = data.activations.cols;
  LinearProbe p;
  p.W = Mat(d, n_out);
  p.b.assign(n_out, 0.0);
  p.n_train = train_rows.size();
  p.n_val = val_rows.size();
  LinearProbe best = p;
  std::vector<double> w(d * n_out, 0.0), b(n_out, 0.0);
  AdamState sw(w.size(), cfg.lr), sb(n_out, cfg.lr);
  std::vector<double> gW(w.size()), gb(n_out);
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);

  auto sync = [&] {
    for (std::size_t i = 0; i < w.size(); ++i) p.W.data[i] = static_cast<float>(w[i]);
    p.b = b;
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.permutation(train_rows.size());
    std::vector<std::size_t> batch;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
      batch.clear();
      for (std::size_t i = b0; i < std::min(order.size(), b0 + bs); ++i)
        batch.push_back(train_rows[order[i]]);
      std::sort(batch.begin(), batch.end());
      std::fill(gW.begin(), gW.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      detail::probe_loss(p, data, batch, &gW, &gb);
      adam_step(std::span<double>(w), std::span<const double>(gW), sw);
      adam_step(std::span<double>(b), std::span<const double>(gb), sb);
      sync();
    }
    const double vl = detail::probe_loss(p, data, val_rows, nullptr, nullptr);
    if (vl < best.best_val_loss) {
      best = p;
      best.best_val_loss = vl;
      best.best_epoch = epoch;
    }
  }
  return best;
}

inline double probe_accuracy(const LinearProbe& p, const ProbeDataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t ok = 0;
  for (std::size_t r = 0; r < data.size(); ++r)
    if (p.predict(data.activations.row(r)) == data.labels[r]) ++ok;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Reports

enum class ProbeKind : std::uint8_t { ImageLabel, CaptionLabel, Consistency };
enum class Regime : std::uint8_t { Plain, ID, OOD, SID };

inline std::string_view to_string(ProbeKind k) {
  switch (k) {
    case ProbeKind::ImageLabel: return "image_label";
    case ProbeKind::CaptionLabel: return "caption_label";
    case ProbeKind::Consistency: return "consistency";
  }
  return "?";
}
inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::Plain: return "plain";
    case Regime::ID: return "ID";
    case Regime::OOD: return "OOD";
    case Regime::SID: return "SID";
  }
  return "?";
}

struct ProbeResult {
  std::size_t layer = 0;
  ProbeKind kind = ProbeKind::ImageLabel;
  Modality target = Modality::Image;
  Regime regime = Regime::Plain;
  double accuracy = 0.0;
  std::size_t n = 0;
  double consistent_fraction = 0.0;  // share of consistent rows in the evaluated set
};

inline std::string probe_report_csv(std::span<const ProbeResult> rows) {
  std::ostringstream os;
  os << "layer,probe_kind,target_modality,regime,accuracy,n\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& r : rows) {
    os << r.layer << ',' << to_string(r.kind) << ',' << to_string(r.target) << ','
       << to_string(r.regime) << ',' << r.accuracy << ',' << r.n << '\n';
  }
  return os.str();
}

inline const ProbeResult* find_probe_result(std::span<const ProbeResult> rows, std::size_t layer,
                                            ProbeKind kind, Modality target, Regime regime) {
  for (const auto& r : rows)
    if (r.layer == layer && r.kind == kind && r.target == target && r.regime == regime) return &r;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Unimodal probes

struct ProbeSuiteConfig {
  ProbeConfig probe;
  double test_fraction = 0.2;
};

// For each layer and target condition, trains an image-label and a
// caption-label probe on the pairs of that condition and reports held-out
// accuracy.
inline std::vector<ProbeResult> unimodal_probe_suite(std::span<const ForwardTrace> traces,
                                                     std::span<const ConflictPair> pairs,
                                                     std::size_t n_classes, Rng& rng,
                                                     const ProbeSuiteConfig& cfg = {}) {
  if (traces.size() != pairs.size()) throw DimensionError("unimodal_probe_suite: traces/pairs size mismatch");
  std::vector<ProbeResult> out;
  if (traces.empty()) return out;
  const std::size_t n_layers = traces[0].residual.size();
  for (Modality target : {Modality::Image, Modality::Caption}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i].target == target) idx.push_back(i);
    if (idx.size() < 10) continue;
    Rng split_rng = rng.substream("unimodal_split", static_cast<std::uint64_t>(target));
    split_rng.shuffle(idx.begin(), idx.end());
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(idx.size())));
    std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> fit(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    for (std::size_t layer = 0; layer < n_layers; ++layer) {
      ProbeDataset all;
      all.activations = layer_activations(traces, layer);
      for (std::size_t i = 0; i < pairs.size(); ++i)
        all.meta.push_back({pairs[i].image.class_id, pairs[i].caption_class, pairs[i].target});
      for (ProbeKind kind : {ProbeKind::ImageLabel, ProbeKind::CaptionLabel}) {
        all.labels.clear();
        for (const auto& p : pairs)
          all.labels.push_back(kind == ProbeKind::ImageLabel ? p.image.class_id : p.caption_class);
        Rng prng = rng.substream("unimodal_probe", layer * 8 + static_cast<std::size_t>(kind) * 2 +
                                                       static_cast<std::size_t>(target));
        auto probe = train_probe(all.subset(fit), prng, cfg.probe, n_classes);
        out.push_back({layer, kind, target, Regime::Plain, probe_accuracy(probe, all.subset(test)),
                       test.size(), 0.0});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class folds

struct FoldSplit {
  std::array<std::vector<std::size_t>, 3> subsets;
  std::size_t held_out = 0;

  // ID: both labels in training subsets; OOD: both in the held-out subset;
  // SID: exactly one label in the held-out subset.
  Regime regime(std::size_t image_class, std::size_t caption_class) const {
    const auto& h = subsets[held_out];
    const bool a = std::find(h.begin(), h.end(), image_class) != h.end();
    const bool b = std::find(h.begin(), h.end(), caption_class) != h.end();
    if (a && b) return Regime::OOD;
    if (!a && !b) return Regime::ID;
    return Regime::SID;
  }
};

// Shuffles classes into three near-equal subsets (sizes differ by at most
// one) and returns the three folds that each hold one subset out.
inline std::array<FoldSplit, 3> make_class_folds(std::size_t n_classes, Rng& rng) {
  if (n_classes < 3) throw DegenerateDataError("make_class_folds: need at least 3 classes");
  auto perm = rng.permutation(n_classes);
  std::array<std::vector<std::size_t>, 3> subsets;
  for (std::size_t i = 0; i < n_classes; ++i) subsets[i % 3].push_back(perm[i]);
  for (auto& s : subsets) std::sort(s.begin(), s.end());
  std::array<FoldSplit, 3> folds;
  for (std::size_t f = 0; f < 3; ++f) folds[f] = FoldSplit{subsets, f};
  return folds;
}

inline std::array<FoldSplit, 3> make_class_folds(const ClassSet& classes, Rng& rng) {
  return make_class_folds(classes.size(), rng);
}

// ---------------------------------------------------------------------------
// Consistency probes

// Per layer and target: a binary (consistent = 1) probe trained on the ID
// composition of each fold, evaluated on held-out ID rows, OOD rows and SID
// rows. Accuracies are averaged over the three folds; n is summed.
inline std::vector<ProbeResult> consistency_probe_suite(std::span<const ForwardTrace> traces,
                                                        std::span<const ConflictPair> pairs,
                                                        const std::array<FoldSplit, 3>& folds,
                                                        Rng& rng,
                                                        const ProbeSuiteConfig& cfg = {}) {
  if (traces.size() != pairs.size()) throw DimensionError("consistency_probe_suite: traces/pairs size mismatch");
  std::vector<ProbeResult> out;
  if (traces.empty()) return out;
  const std::size_t n_layers = traces[0].residual.size();
  for (Modality target : {Modality::Image, Modality::Caption}) {
    for (std::size_t layer = 0; layer < n_layers; ++layer) {
      ProbeDataset all;
      all.activations = layer_activations(traces, layer);
      for (const auto& p : pairs) {
        all.labels.push_back(p.consistent ? 1 : 0);
        all.meta.push_back({p.image.class_id, p.caption_class, p.target});
      }
      std::map<Regime, std::array<double, 3>> acc;  // accuracy, n, consistent count
      for (std::size_t f = 0; f < 3; ++f) {
        std::vector<std::size_t> id_rows, ood, sid;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
          if (pairs[i].target != target) continue;
          switch (folds[f].regime(pairs[i].image.class_id, pairs[i].caption_class)) {
            case Regime::ID: id_rows.push_back(i); break;
            case Regime::OOD: ood.push_back(i); break;
            case Regime::SID: sid.push_back(i); break;
            default: break;
          }
        }
        Rng srng = rng.substream("consistency_split", f * 2 + static_cast<std::size_t>(target));
        srng.shuffle(id_rows.begin(), id_rows.end());
        const auto n_test = static_cast<std::size_t>(
            std::llround(cfg.test_fraction * static_cast<double>(id_rows.size())));
        std::vector<std::size_t> id_test(id_rows.begin(), id_rows.begin() + static_cast<std::ptrdiff_t>(n_test));
        std::vector<std::size_t> id_fit(id_rows.begin() + static_cast<std::ptrdiff_t>(n_test), id_rows.end());
        std::sort(id_test.begin(), id_test.end());
        std::sort(id_fit.begin(), id_fit.end());
        Rng prng = rng.substream("consistency_probe", (layer * 3 + f) * 2 + static_cast<std::size_t>(target));
        auto probe = train_probe(all.subset(id_fit), prng, cfg.probe, 2);
        for (auto [regime, rows] : {std::pair{Regime::ID, &id_test}, {Regime::OOD, &ood}, {Regime::SID, &sid}}) {
          auto sub = all.subset(*rows);
          auto& a = acc[regime];
          a[0] += probe_accuracy(probe, sub) / 3.0;
          a[1] += static_cast<double>(rows->size());
          a[2] += static_cast<double>(std::count(sub.labels.begin(), sub.labels.end(), std::size_t{1}));
        }
      }
      for (auto& [regime, a] : acc) {
        out.push_back({layer, ProbeKind::Consistency, target, regime, a[0],
                       static_cast<std::size_t>(a[1]), a[1] > 0 ? a[2] / a[1] : 0.0});
      }
    }
  }
  return out;
}

}  // namespace conflictlens
