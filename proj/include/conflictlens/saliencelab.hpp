// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// K-Means over conflicting-input activations, V-Measure against image and
// caption labels, and the V-gap / accuracy correlation.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "conflictlens/conflictgen.hpp"
#include "conflictlens/errors.hpp"
#include "conflictlens/model.hpp"
#include "conflictlens/numerics.hpp"

namespace conflictlens {

struct ClusterModel {
  std::size_t k = 0;
  BasicMat<double> centroids;  // k x d
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::vector<double> inertia_trace;  // after each assignment step of the kept run
};

namespace detail {

inline double sq_dist(std::span<const float> x, std::span<const double> c) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - c[i];
    s += d * d;
  }
  return s;
}

inline ClusterModel kmeans_single(const Mat& pts, std::size_t k, Rng& rng, std::size_t max_iter) {
  const std::size_t n = pts.rows, d = pts.cols;
  ClusterModel m;
  m.k = k;
  m.centroids = BasicMat<double>(k, d);
  auto set_centroid = [&](std::size_t c, std::size_t row) {
    auto src = pts.row(row);
    for (std::size_t i = 0; i < d; ++i) m.centroids(c, i) = src[i];
  };

  // k-means++ seeding.
  set_centroid(0, rng.uniform_int(n));
  std::vector<double> dmin(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      dmin[r] = std::min(dmin[r], sq_dist(pts.row(r), m.centroids.row(c - 1)));
      total += dmin[r];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t r = 0; r < n; ++r) {
        u -= dmin[r];
        if (u < 0.0) {
          pick = r;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(n);
    }
    set_centroid(c, pick);
  }

  m.assignments.assign(n, k);  // sentinel: nothing assigned yet
  std::vector<double> dist(n);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_dist(pts.row(r), m.centroids.row(c));
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      dist[r] = bd;
      inertia += bd;
      if (m.assignments[r] != best) {
        m.assignments[r] = best;
        changed = true;
      }
    }
    m.inertia = inertia;
    m.inertia_trace.push_back(inertia);
    m.iterations = iter + 1;
    if (!changed) break;

    // Update step; an empty cluster takes the point farthest from its centroid.
    std::vector<std::size_t> count(k, 0);
    m.centroids.fill(0.0);
    for (std::size_t r = 0; r < n; ++r) {
      ++count[m.assignments[r]];
      auto src = pts.row(r);
      auto dst = m.centroids.row(m.assignments[r]);
      for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      for (double& v : m.centroids.row(c)) v /= static_cast<double>(count[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t r = 1; r < n; ++r)
        if (dist[r] > dist[far] && count[m.assignments[r]] > 1) far = r;
      --count[m.assignments[far]];
      ++count[c];
      set_centroid(c, far);
      dist[far] = 0.0;
      m.assignments[far] = c;
    }
  }
  return m;
}

}  // namespace detail

// Best-inertia K-Means over `n_init` k-means++ restarts.
inline ClusterModel kmeans_fit(const Mat& points, std::size_t k, Rng& rng, std::size_t n_init = 3,
                               std::size_t max_iter = 300) {
  if (k == 0) throw DimensionError("kmeans_fit: k must be positive");
  if (points.rows < k)
    throw DimensionError("kmeans_fit: " + std::to_string(points.rows) + " points < k=" + std::to_string(k));
  if (!points.all_finite()) throw DegenerateDataError("kmeans_fit: non-finite activations");
  ClusterModel best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < std::max<std::size_t>(1, n_init); ++i) {
    Rng r = rng.substream("kmeans_init", i);
    auto m = detail::kmeans_single(points, k, r, max_iter);
    m.seed = r.seed();
    if (m.inertia < best.inertia) best = std::move(m);
  }
  return best;
}

// ---------------------------------------------------------------------------
// V-Measure

struct VMeasure {
  double h = 0.0;
  double c = 0.0;
  double v = 0.0;
};

inline VMeasure v_measure(std::span<const std::size_t> assignments, std::span<const std::size_t> labels) {
  if (assignments.size() != labels.size())
    throw DimensionError("v_measure: " + std::to_string(assignments.size()) + " assignments vs " +
                         std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw DimensionError("v_measure: empty input");
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> joint;
  std::map<std::size_t, std::uint64_t> nk, nc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++joint[{labels[i], assignments[i]}];
    ++nc[labels[i]];
    ++nk[assignments[i]];
  }
  const double n = static_cast<double>(labels.size());
  auto entropy = [&](const std::map<std::size_t, std::uint64_t>& m) {
    double h = 0.0;
    for (const auto& [_, v] : m) {
      const double p = static_cast<double>(v) / n;
      h -= p * std::log(p);
    }
    return h;
  };
  const double h_c = entropy(nc), h_k = entropy(nk);
  double h_c_given_k = 0.0, h_k_given_c = 0.0;
  for (const auto& [key, v] : joint) {
    const double nv = static_cast<double>(v);
    h_c_given_k -= nv / n * std::log(nv / static_cast<double>(nk[key.second]));
    h_k_given_c -= nv / n * std::log(nv / static_cast<double>(nc[key.first]));
  }
  VMeasure r;
  r.h = h_c == 0.0 ? 1.0 : 1.0 - h_c_given_k / h_c;
  r.c = h_k == 0.0 ? 1.0 : 1.0 - h_k_given_c / h_k;
  r.h = std::clamp(r.h, 0.0, 1.0);
  r.c = std::clamp(r.c, 0.0, 1.0);
  r.v = r.h + r.c > 0.0 ? 2.0 * r.h * r.c / (r.h + r.c) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Salience profile

struct VMeasureReport {
  std::size_t layer = 0;
  VMeasure image;
  VMeasure caption;
  bool seeds_averaged = false;
  std::vector<std::pair<VMeasure, VMeasure>> per_seed;  // (image, caption)

  double gap(Modality target) const {
    return target == Modality::Image ? image.v - caption.v : caption.v - image.v;
  }
};

inline std::vector<VMeasureReport> salience_profile(std::span<const ForwardTrace> traces,
                                                    std::span<const ConflictPair> pairs,
                                                    std::size_t n_classes, Rng& rng,
                                                    std::size_t n_seeds = 3) {
  if (traces.size() != pairs.size()) throw DimensionError("salience_profile: traces/pairs size mismatch");
  for (const auto& p : pairs)
    if (p.consistent) throw DegenerateDataError("salience_profile: expects conflicting pairs only");
  std::vector<VMeasureReport> out;
  if (traces.empty()) return out;
  std::vector<std::size_t> img_labels, cap_labels;
  for (const auto& p : pairs) {
    img_labels.push_back(p.image.class_id);
    cap_labels.push_back(p.caption_class);
  }
  const std::size_t n_layers = traces[0].residual.size();
  for (std::size_t layer = 0; layer < n_layers; ++layer) {
    Mat pts = layer_activations(traces, layer);
    VMeasureReport rep;
    rep.layer = layer;
    rep.seeds_averaged = n_seeds > 1;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      Rng r = rng.substream("salience", layer * 64 + s);
      auto km = kmeans_fit(pts, n_classes, r);
      auto vi = v_measure(km.assignments, img_labels);
      auto vc = v_measure(km.assignments, cap_labels);
      rep.per_seed.push_back({vi, vc});
      for (auto [dst, src] : {std::pair{&rep.image, &vi}, {&rep.caption, &vc}}) {
        dst->h += src->h / static_cast<double>(n_seeds);
        dst->c += src->c / static_cast<double>(n_seeds);
        dst->v += src->v / static_cast<double>(n_seeds);
      }
    }
    out.push_back(std::move(rep));
  }
  return out;
}

inline std::string salience_report_csv(std::span<const VMeasureReport> reports, std::string_view condition) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "layer,modality,h,c,v,seed,condition\n";
  for (const auto& r : reports) {
    for (std::size_t s = 0; s <= r.per_seed.size(); ++s) {
      const bool mean = s == r.per_seed.size();
      const VMeasure& vi = mean ? r.image : r.per_seed[s].first;
      const VMeasure& vc = mean ? r.caption : r.per_seed[s].second;
      for (auto [name, v] : {std::pair{"image", &vi}, {"caption", &vc}}) {
        os << r.layer << ',' << name << ',' << v->h << ',' << v->c << ',' << v->v << ','
           << (mean ? std::string("mean") : std::to_string(s)) << ',' << condition << '\n';
      }
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Correlation

struct Correlation {
  double r = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

inline Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson: length mismatch");
  if (x.size() < 3) throw DegenerateDataError("pearson: need at least 3 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateDataError("pearson: zero variance, correlation undefined");
  Correlation c;
  c.n = x.size();
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = n - 2.0;
  if (std::abs(c.r) >= 1.0) {
    c.p_value = 0.0;
  } else {
    const double t = c.r * std::sqrt(df / (1.0 - c.r * c.r));
    boost::math::students_t dist(df);
    c.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return c;
}

struct GapAccuracyPoint {
  std::string condition;
  double gap = 0.0;
  double accuracy = 0.0;
};

inline Correlation correlate_gap_accuracy(std::span<const GapAccuracyPoint> points) {
  std::vector<double> g, a;
  for (const auto& p : points) {
    g.push_back(p.gap);
    a.push_back(p.accuracy);
  }
  return pearson(g, a);
}

inline std::string correlation_csv(std::span<const GapAccuracyPoint> points, const Correlation& c) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "condition,gap,accuracy\n";
  for (const auto& p : points) os << p.condition << ',' << p.gap << ',' << p.accuracy << '\n';
  os << "# r," << c.r << '\n';
  os << std::scientific << "# p," << c.p_value << '\n';
  return os.str();
}

}  // namespace conflictlens
