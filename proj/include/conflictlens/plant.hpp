// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Installs a known pathway into one attention head of a trained model, so
// that head-level analyses can be checked against ground truth.
//
// The head is given uniform attention (zero query/key maps). Its value and
// output maps are fitted by ridge regression from the mean-pooled normalized
// layer input to a residual direction that raises the answer logit of the
// promoted modality's class, then factorized to rank d_head.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "conflictlens/conflictgen.hpp"
#include "conflictlens/model.hpp"

namespace conflictlens {

struct PlantOptions {
  double ridge = 1e-2;
  // Head output norm at alpha = 1, as a fraction of the mean answer-position
  // residual norm leaving the layer.
  double strength = 0.1;
};

struct PlantReport {
  double fit_accuracy = 0.0;  // argmax agreement of the fitted map on the calibration set
  double output_scale = 0.0;
};

// Residual direction whose addition before the final norm raises class c's
// answer logit relative to the other classes (first-order).
inline Eigen::VectorXd answer_push_direction(const TinyVLM& model, std::size_t cls) {
  const auto& cfg = model.config;
  const Vocabulary vocab = model.vocab();
  const std::size_t d = cfg.d_model, C = cfg.n_classes;
  Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    double mean = 0.0;
    for (std::size_t k = 0; k < C; ++k)
      mean += model.unembed(i, static_cast<std::size_t>(vocab.answer_token(k)));
    mean /= static_cast<double>(C);
    u[static_cast<Eigen::Index>(i)] =
        (model.unembed(i, static_cast<std::size_t>(vocab.answer_token(cls))) - mean) * model.lnf_g(0, i);
  }
  u.array() -= u.mean();
  const double n = u.norm();
  return n > 0 ? Eigen::VectorXd(u / n) : u;
}

inline PlantReport plant_pathway_head(TinyVLM& model, std::size_t layer, std::size_t head, Modality promoted,
                                      std::span<const ConflictPair> pairs,
                                      std::span<const EncodedPrompt> prompts, const PlantOptions& opt = {}) {
  const auto& cfg = model.config;
  if (layer >= cfg.n_layers || head >= cfg.n_heads) throw IndexError("plant_pathway_head: head out of range");
  if (pairs.size() != prompts.size() || pairs.empty())
    throw DimensionError("plant_pathway_head: need matching, nonempty pairs and prompts");
  const std::size_t d = cfg.d_model, dh = cfg.d_head(), C = cfg.n_classes;
  const auto n = static_cast<Eigen::Index>(pairs.size());
  const auto D = static_cast<Eigen::Index>(d);

  // The slot must contribute nothing while its inputs are gathered.
  zero_head_output(model, layer, head);
  std::vector<Eigen::VectorXd> push(C);
  for (std::size_t c = 0; c < C; ++c) push[c] = answer_push_direction(model, c);

  Eigen::MatrixXd X(n, D), Y(n, D);
  double resid_norm = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& prompt = prompts[static_cast<std::size_t>(r)];
    detail::ForwardCache<float> cache;
    detail::forward_impl(model, prompt, std::span<const HeadInterventionSpec>{}, prompt.answer_position(), cache);
    const auto& h1 = cache.layers[layer].h1;
    const std::size_t p = prompt.answer_position();
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t <= p; ++t) s += h1(t, i);
      X(r, static_cast<Eigen::Index>(i)) = s / static_cast<double>(p + 1);
    }
    Y.row(r) = push[pairs[static_cast<std::size_t>(r)].label(promoted)].transpose();
    const auto& out = layer + 1 < cfg.n_layers ? cache.layers[layer + 1].x_in : cache.x_final;
    double nn = 0.0;
    for (float v : out.row(p)) nn += static_cast<double>(v) * v;
    resid_norm += std::sqrt(nn) / static_cast<double>(n);
  }

  const Eigen::MatrixXd A = X.transpose() * X + opt.ridge * static_cast<double>(n) * Eigen::MatrixXd::Identity(D, D);
  Eigen::MatrixXd M = A.ldlt().solve(X.transpose() * Y);
  Eigen::MatrixXd fitted = X * M;
  const double fit_norm = fitted.rowwise().norm().mean();
  const double scale = fit_norm > 0 ? opt.strength * resid_norm / fit_norm : 0.0;
  M *= scale;

  PlantReport rep;
  rep.output_scale = scale;
  std::size_t agree = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    std::size_t best = 0;
    double bv = -1e300;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = fitted.row(r).dot(push[c]);
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    if (best == pairs[static_cast<std::size_t>(r)].label(promoted)) ++agree;
  }
  rep.fit_accuracy = static_cast<double>(agree) / static_cast<double>(n);

  // Rank-d_head factorization M ~ Wv_h * Wo_h.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto k = static_cast<Eigen::Index>(dh);
  Eigen::VectorXd sq = svd.singularValues().head(k).cwiseSqrt();
  Eigen::MatrixXd Wv = svd.matrixU().leftCols(k) * sq.asDiagonal();
  Eigen::MatrixXd Wo = sq.asDiagonal() * svd.matrixV().leftCols(k).transpose();

  auto& L = model.layers[layer];
  const std::size_t c0 = head * dh;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < dh; ++c) {
      L.wq(i, c0 + c) = 0.0f;
      L.wk(i, c0 + c) = 0.0f;
      L.wv(i, c0 + c) = static_cast<float>(Wv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
      L.wo(c0 + c, i) = static_cast<float>(Wo(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)));
    }
  }
  return rep;
}

}  // namespace conflictlens
