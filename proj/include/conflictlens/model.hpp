// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// TinyVLM: a pre-norm causal transformer over an image-patch segment
// followed by caption / query / option tokens. The answer is read from the
// last position. Every attention head exposes its pre-projection output z
// as an intervention hook.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conflictlens/binio.hpp"
#include "conflictlens/errors.hpp"
#include "conflictlens/numerics.hpp"
#include "conflictlens/prompt.hpp"

namespace conflictlens {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 8;
  std::size_t d_model = 64;
  std::size_t n_classes = 10;
  std::size_t n_image_tokens = 16;
  std::size_t patch_dim = 8;
  std::size_t max_seq = 32;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t d_mlp() const { return 4 * d_model; }
  std::size_t vocab_size() const { return Vocabulary(n_classes).size(); }
  Vocabulary vocab() const { return Vocabulary(n_classes); }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0)
      throw ConfigError("model: n_layers, n_heads and d_model must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (n_classes < 2) throw ConfigError("model: need at least 2 classes");
    if (max_seq == 0) throw ConfigError("model: max_seq must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Scale head `head`'s pre-projection output at `position` in `layer` by alpha.
struct HeadInterventionSpec {
  std::size_t layer = 0;
  std::size_t head = 0;
  double alpha = 1.0;
  std::size_t position = 0;
};

template <class T>
struct LayerWeights {
  BasicMat<T> wq, wk, wv, wo;
  BasicMat<T> ln1_g, ln1_b, ln2_g, ln2_b;
  BasicMat<T> w1, b1, w2, b2;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

template <class T>
struct BasicTinyVLM {
  ModelConfig config;
  BasicMat<T> patch_proj;  // patch_dim x d
  BasicMat<T> patch_bias;  // 1 x d
  BasicMat<T> tok_emb;     // vocab x d
  BasicMat<T> pos_emb;     // max_seq x d
  std::vector<LayerWeights<T>> layers;
  BasicMat<T> lnf_g, lnf_b;  // 1 x d
  BasicMat<T> unembed;       // d x vocab

  Vocabulary vocab() const { return config.vocab(); }

  static BasicTinyVLM zeros(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model, f = cfg.d_mlp(), V = cfg.vocab_size();
    BasicTinyVLM m;
    m.config = cfg;
    m.patch_proj = BasicMat<T>(cfg.patch_dim, d);
    m.patch_bias = BasicMat<T>(1, d);
    m.tok_emb = BasicMat<T>(V, d);
    m.pos_emb = BasicMat<T>(cfg.max_seq, d);
    m.layers.resize(cfg.n_layers);
    for (auto& L : m.layers) {
      L.wq = L.wk = L.wv = L.wo = BasicMat<T>(d, d);
      L.ln1_g = L.ln1_b = L.ln2_g = L.ln2_b = BasicMat<T>(1, d);
      L.w1 = BasicMat<T>(d, f);
      L.b1 = BasicMat<T>(1, f);
      L.w2 = BasicMat<T>(f, d);
      L.b2 = BasicMat<T>(1, d);
    }
    m.lnf_g = m.lnf_b = BasicMat<T>(1, d);
    m.unembed = BasicMat<T>(d, V);
    return m;
  }

  static BasicTinyVLM random(const ModelConfig& cfg, Rng& rng) {
    BasicTinyVLM m = zeros(cfg);
    auto fill = [&](BasicMat<T>& w, double stddev) {
      for (auto& x : w.data) x = static_cast<T>(rng.normal() * stddev);
    };
    const double d = static_cast<double>(cfg.d_model);
    const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    fill(m.patch_proj, 0.3);
    fill(m.tok_emb, 0.1);
    fill(m.pos_emb, 0.1);
    for (auto& L : m.layers) {
      fill(L.wq, 1.0 / std::sqrt(d));
      fill(L.wk, 1.0 / std::sqrt(d));
      fill(L.wv, 1.0 / std::sqrt(d));
      fill(L.wo, resid_scale / std::sqrt(d));
      L.ln1_g.fill(T(1));
      L.ln2_g.fill(T(1));
      fill(L.w1, 1.0 / std::sqrt(d));
      fill(L.w2, resid_scale / std::sqrt(static_cast<double>(cfg.d_mlp())));
    }
    m.lnf_g.fill(T(1));
    fill(m.unembed, 1.0 / std::sqrt(d));
    return m;
  }

  template <class F>
  void for_each_param(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const BasicMat<T>& w) { n += w.size(); });
    return n;
  }

  template <class U>
  BasicTinyVLM<U> cast() const {
    auto out = BasicTinyVLM<U>::zeros(config);
    std::vector<const BasicMat<T>*> src;
    for_each_param([&](const std::string&, const BasicMat<T>& w) { src.push_back(&w); });
    std::size_t i = 0;
    out.for_each_param([&](const std::string&, BasicMat<U>& w) { w = src[i++]->template cast<U>(); });
    return out;
  }

  friend bool operator==(const BasicTinyVLM&, const BasicTinyVLM&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("patch_proj"), self.patch_proj);
    f(std::string("patch_bias"), self.patch_bias);
    f(std::string("tok_emb"), self.tok_emb);
    f(std::string("pos_emb"), self.pos_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "w1", L.w1);
      f(p + "b1", L.b1);
      f(p + "w2", L.w2);
      f(p + "b2", L.b2);
    }
    f(std::string("lnf_g"), self.lnf_g);
    f(std::string("lnf_b"), self.lnf_b);
    f(std::string("unembed"), self.unembed);
  }
};

using TinyVLM = BasicTinyVLM<float>;

struct CaptureFlags {
  bool residual = false;
  bool head_outputs = false;
};

// Answer-position activations. residual[0] is the embedding output and
// residual[l + 1] the output of block l. head_z[l][h] is head h's
// post-intervention pre-projection output when requested.
template <class T>
struct BasicForwardTrace {
  std::vector<std::vector<T>> residual;
  std::vector<std::vector<std::vector<T>>> head_z;

  friend bool operator==(const BasicForwardTrace&, const BasicForwardTrace&) = default;
};
using ForwardTrace = BasicForwardTrace<float>;

template <class T>
struct ForwardResult {
  std::vector<T> logits;  // vocab-sized, at the readout position
  std::optional<BasicForwardTrace<T>> trace;
};

namespace detail {

inline constexpr double kLnEps = 1e-5;

// Returns rstd. out = xhat * g + b.
template <class T>
double layer_norm_row(std::span<const T> x, std::span<const T> g,
                      std::span<const T> b, std::span<T> xhat, std::span<T> out) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (T v : x) mean += static_cast<double>(v);
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (T v : x) {
    const double c = static_cast<double>(v) - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < d; ++i) {
    const double xh = (static_cast<double>(x[i]) - mean) * rstd;
    xhat[i] = static_cast<T>(xh);
    out[i] = static_cast<T>(xh * static_cast<double>(g[i]) + static_cast<double>(b[i]));
  }
  return rstd;
}

// dx += LN backward of dout; dg, db accumulate.
template <class T>
void layer_norm_backward_row(std::span<const T> dout, std::span<const T> xhat,
                             std::span<const T> g, double rstd, std::span<T> dx,
                             std::span<T> dg, std::span<T> db) {
  const std::size_t d = dout.size();
  double mean_dxh = 0.0, mean_dxh_xh = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dxh = static_cast<double>(dout[i]) * static_cast<double>(g[i]);
    mean_dxh += dxh;
    mean_dxh_xh += dxh * static_cast<double>(xhat[i]);
    dg[i] = static_cast<T>(static_cast<double>(dg[i]) +
                           static_cast<double>(dout[i]) * static_cast<double>(xhat[i]));
    db[i] = static_cast<T>(static_cast<double>(db[i]) + static_cast<double>(dout[i]));
  }
  mean_dxh /= static_cast<double>(d);
  mean_dxh_xh /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double dxh = static_cast<double>(dout[i]) * static_cast<double>(g[i]);
    const double v = rstd * (dxh - mean_dxh - static_cast<double>(xhat[i]) * mean_dxh_xh);
    dx[i] = static_cast<T>(static_cast<double>(dx[i]) + v);
  }
}

// Causal attention for one query row at `pos` in head `head`. Keys/values for
// j < pos come from K/V; the row at `pos` comes from k_self/v_self so the
// answer-row fast path can supply freshly computed rows.
template <class T>
void attend_row(std::span<const T> q, const BasicMat<T>& K, const BasicMat<T>& V,
                std::span<const T> k_self, std::span<const T> v_self,
                std::size_t pos, std::size_t head, std::size_t dh,
                std::span<T> probs_out, std::span<T> z_out) {
  const std::size_t c0 = head * dh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> s(pos + 1);
  double mx = -1e300;
  for (std::size_t j = 0; j <= pos; ++j) {
    const T* kr = j < pos ? K.data.data() + j * K.cols : k_self.data();
    double acc = 0.0;
    for (std::size_t c = 0; c < dh; ++c)
      acc += static_cast<double>(q[c0 + c]) * static_cast<double>(kr[c0 + c]);
    s[j] = acc * scale;
    mx = std::max(mx, s[j]);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j <= pos; ++j) {
    s[j] = std::exp(s[j] - mx);
    sum += s[j];
  }
  std::vector<double> z(dh, 0.0);
  for (std::size_t j = 0; j <= pos; ++j) {
    const double p = s[j] / sum;
    probs_out[j] = static_cast<T>(p);
    const T* vr = j < pos ? V.data.data() + j * V.cols : v_self.data();
    for (std::size_t c = 0; c < dh; ++c) z[c] += p * static_cast<double>(vr[c0 + c]);
  }
  for (std::size_t c = 0; c < dh; ++c) z_out[c] = static_cast<T>(z[c]);
}

template <class T>
void add_bias(std::span<T> row, std::span<const T> bias) {
  for (std::size_t i = 0; i < row.size(); ++i) row[i] += bias[i];
}

// out += dy * W^T for a single row: out[i] += sum_j dy[j] * W(i, j).
template <class T>
void backprop_row(std::span<const T> dy, const BasicMat<T>& W, std::span<T> out) {
  for (std::size_t i = 0; i < W.rows; ++i) {
    const T* wr = W.data.data() + i * W.cols;
    double s = 0.0;
    for (std::size_t j = 0; j < W.cols; ++j)
      s += static_cast<double>(dy[j]) * static_cast<double>(wr[j]);
    out[i] = static_cast<T>(static_cast<double>(out[i]) + s);
  }
}

// dW += x^T dy for a single row.
template <class T>
void outer_accumulate(std::span<const T> x, std::span<const T> dy, BasicMat<T>& dW) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = static_cast<double>(x[i]);
    if (xi == 0.0) continue;
    T* gr = dW.data.data() + i * dW.cols;
    for (std::size_t j = 0; j < dy.size(); ++j)
      gr[j] = static_cast<T>(static_cast<double>(gr[j]) + xi * static_cast<double>(dy[j]));
  }
}

template <class T>
bool row_is_zero(std::span<const T> r) {
  return std::all_of(r.begin(), r.end(), [](T v) { return v == T(0); });
}

template <class T>
struct LayerCache {
  BasicMat<T> x_in, xhat1, h1, q, k, v, z, zc, x_mid, xhat2, h2, u, a;
  std::vector<double> rstd1, rstd2;
  std::vector<BasicMat<T>> probs;  // per head, T x T lower triangle
  std::vector<double> alpha;       // T x n_heads
};

template <class T>
struct ForwardCache {
  BasicMat<T> x0;
  std::vector<LayerCache<T>> layers;
  BasicMat<T> x_final;
  std::vector<T> xhat_f, hf;
  double rstd_f = 1.0;
  std::size_t readout = 0;
};

template <class T>
void validate_prompt(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt) {
  const auto& cfg = model.config;
  if (prompt.tokens.empty()) throw IndexError("forward: empty prompt");
  if (prompt.tokens.size() > cfg.max_seq) {
    throw IndexError("forward: prompt length " + std::to_string(prompt.tokens.size()) +
                     " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  const auto V = static_cast<std::int32_t>(cfg.vocab_size());
  std::size_t n_img = 0;
  for (auto t : prompt.tokens) {
    if (t < 0 || t >= V) throw IndexError("forward: token id " + std::to_string(t) + " out of vocab");
    if (t == Vocabulary::kImg) ++n_img;
  }
  if (n_img > 0 && (prompt.patches.rows < n_img || prompt.patches.cols != cfg.patch_dim)) {
    throw DimensionError("forward: " + std::to_string(n_img) + " image tokens but patches are " +
                         shape_str(prompt.patches.rows, prompt.patches.cols));
  }
}

template <class T>
std::vector<double> alpha_table(const ModelConfig& cfg, std::size_t seq,
                                std::span<const HeadInterventionSpec> specs,
                                std::size_t layer) {
  std::vector<double> a(seq * cfg.n_heads, 1.0);
  for (const auto& s : specs) {
    if (s.layer != layer) continue;
    a[s.position * cfg.n_heads + s.head] *= s.alpha;
  }
  return a;
}

inline void validate_interventions(const ModelConfig& cfg, std::size_t seq,
                                   std::span<const HeadInterventionSpec> specs) {
  for (const auto& s : specs) {
    if (s.layer >= cfg.n_layers)
      throw IndexError("intervention layer " + std::to_string(s.layer) + " >= " + std::to_string(cfg.n_layers));
    if (s.head >= cfg.n_heads)
      throw IndexError("intervention head " + std::to_string(s.head) + " >= " + std::to_string(cfg.n_heads));
    if (s.position >= seq)
      throw IndexError("intervention position " + std::to_string(s.position) + " >= prompt length " +
                       std::to_string(seq));
    if (!std::isfinite(s.alpha)) throw IndexError("intervention alpha must be finite");
  }
}

template <class T>
void embed(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt, BasicMat<T>& x0) {
  const std::size_t d = model.config.d_model, seq = prompt.tokens.size();
  x0 = BasicMat<T>(seq, d);
  std::vector<double> acc;
  std::vector<T> proj(d), patch(model.config.patch_dim);
  std::size_t img = 0;
  for (std::size_t t = 0; t < seq; ++t) {
    const auto tok = static_cast<std::size_t>(prompt.tokens[t]);
    auto row = x0.row(t);
    auto te = model.tok_emb.row(tok);
    auto pe = model.pos_emb.row(t);
    for (std::size_t i = 0; i < d; ++i) row[i] = te[i] + pe[i];
    if (prompt.tokens[t] == Vocabulary::kImg) {
      auto pr = prompt.patches.row(img++);
      std::transform(pr.begin(), pr.end(), patch.begin(), [](float v) { return static_cast<T>(v); });
      matmul_row(std::span<const T>(patch), model.patch_proj, std::span<T>(proj), acc);
      add_bias(std::span<T>(proj), model.patch_bias.row(0));
      for (std::size_t i = 0; i < d; ++i) row[i] += proj[i];
    }
  }
}

// Attention output projection + MLP for one row, given the post-scale
// concatenated head outputs. Writes x_mid and x_out rows and the
// intermediates needed by backward.
template <class T>
void block_tail_row(const LayerWeights<T>& L, std::span<const T> x_in,
                    std::span<const T> zc, std::span<T> x_mid, std::span<T> xhat2,
                    double& rstd2, std::span<T> h2, std::span<T> u, std::span<T> a,
                    std::span<T> x_out, std::vector<double>& acc) {
  const std::size_t d = x_in.size();
  std::vector<T> attn(d), m(d);
  matmul_row(zc, L.wo, std::span<T>(attn), acc);
  for (std::size_t i = 0; i < d; ++i) x_mid[i] = x_in[i] + attn[i];
  rstd2 = layer_norm_row<T>(x_mid, L.ln2_g.row(0), L.ln2_b.row(0), xhat2, h2);
  matmul_row<T>(h2, L.w1, u, acc);
  add_bias(u, L.b1.row(0));
  for (std::size_t i = 0; i < u.size(); ++i) a[i] = static_cast<T>(gelu(static_cast<double>(u[i])));
  matmul_row<T>(a, L.w2, std::span<T>(m), acc);
  add_bias(std::span<T>(m), L.b2.row(0));
  for (std::size_t i = 0; i < d; ++i) x_out[i] = x_mid[i] + m[i];
}

template <class T>
std::vector<T> readout_row(const BasicTinyVLM<T>& model, std::span<const T> x,
                           std::vector<T>& xhat, std::vector<T>& hf, double& rstd) {
  const std::size_t d = model.config.d_model;
  xhat.assign(d, T(0));
  hf.assign(d, T(0));
  rstd = layer_norm_row<T>(x, model.lnf_g.row(0), model.lnf_b.row(0), std::span<T>(xhat),
                           std::span<T>(hf));
  std::vector<T> logits(model.config.vocab_size());
  std::vector<double> acc;
  matmul_row<T>(std::span<const T>(hf), model.unembed, std::span<T>(logits), acc);
  return logits;
}

template <class T>
std::vector<T> forward_impl(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
                            std::span<const HeadInterventionSpec> specs,
                            std::size_t readout, ForwardCache<T>& c) {
  const auto& cfg = model.config;
  validate_prompt(model, prompt);
  const std::size_t seq = prompt.tokens.size();
  validate_interventions(cfg, seq, specs);
  if (readout >= seq) throw IndexError("forward: readout position out of range");
  const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), f = cfg.d_mlp();

  embed(model, prompt, c.x0);
  c.layers.resize(cfg.n_layers);
  c.readout = readout;
  std::vector<double> acc;
  const BasicMat<T>* x = &c.x0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& L = model.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = *x;
    lc.xhat1 = lc.h1 = lc.q = lc.k = lc.v = lc.z = lc.zc = lc.x_mid = lc.xhat2 = lc.h2 =
        BasicMat<T>(seq, d);
    lc.u = lc.a = BasicMat<T>(seq, f);
    lc.rstd1.assign(seq, 0.0);
    lc.rstd2.assign(seq, 0.0);
    lc.probs.assign(H, BasicMat<T>(seq, seq));
    lc.alpha = alpha_table<T>(cfg, seq, specs, l);
    for (std::size_t t = 0; t < seq; ++t) {
      lc.rstd1[t] = layer_norm_row<T>(lc.x_in.row(t), L.ln1_g.row(0), L.ln1_b.row(0),
                                      lc.xhat1.row(t), lc.h1.row(t));
      matmul_row<T>(lc.h1.row(t), L.wq, lc.q.row(t), acc);
      matmul_row<T>(lc.h1.row(t), L.wk, lc.k.row(t), acc);
      matmul_row<T>(lc.h1.row(t), L.wv, lc.v.row(t), acc);
    }
    BasicMat<T> x_out(seq, d);
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        attend_row<T>(lc.q.row(t), lc.k, lc.v, lc.k.row(t), lc.v.row(t), t, h, dh,
                      lc.probs[h].row(t).subspan(0, t + 1), lc.z.row(t).subspan(h * dh, dh));
        const double a = lc.alpha[t * H + h];
        for (std::size_t cidx = 0; cidx < dh; ++cidx) {
          const T zv = lc.z(t, h * dh + cidx);
          lc.zc(t, h * dh + cidx) = a == 1.0 ? zv : static_cast<T>(a * static_cast<double>(zv));
        }
      }
      block_tail_row<T>(L, lc.x_in.row(t), lc.zc.row(t), lc.x_mid.row(t), lc.xhat2.row(t),
                        lc.rstd2[t], lc.h2.row(t), lc.u.row(t), lc.a.row(t), x_out.row(t), acc);
    }
    c.x_final = std::move(x_out);
    x = &c.x_final;
  }
  return readout_row<T>(model, c.x_final.row(readout), c.xhat_f, c.hf, c.rstd_f);
}

template <class T>
BasicForwardTrace<T> trace_from_cache(const ForwardCache<T>& c, const ModelConfig& cfg,
                                      CaptureFlags flags) {
  BasicForwardTrace<T> tr;
  const std::size_t p = c.readout;
  if (flags.residual) {
    auto r0 = c.x0.row(p);
    tr.residual.emplace_back(r0.begin(), r0.end());
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& next = l + 1 < cfg.n_layers ? c.layers[l + 1].x_in : c.x_final;
      auto r = next.row(p);
      tr.residual.emplace_back(r.begin(), r.end());
    }
  }
  if (flags.head_outputs) {
    const std::size_t dh = cfg.d_head();
    tr.head_z.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        auto z = c.layers[l].zc.row(p).subspan(h * dh, dh);
        tr.head_z[l].emplace_back(z.begin(), z.end());
      }
    }
  }
  return tr;
}

}  // namespace detail

// Logits at the answer (last) position. Interventions scale the listed heads'
// pre-projection outputs; an empty list is the plain forward.
template <class T>
ForwardResult<T> forward(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
                         std::span<const HeadInterventionSpec> interventions = {},
                         CaptureFlags capture = {}) {
  detail::ForwardCache<T> cache;
  ForwardResult<T> out;
  out.logits = detail::forward_impl(model, prompt, interventions, prompt.answer_position(), cache);
  if (capture.residual || capture.head_outputs)
    out.trace = detail::trace_from_cache(cache, model.config, capture);
  return out;
}

template <class T>
ForwardResult<T> forward(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
                         const std::vector<HeadInterventionSpec>& interventions,
                         CaptureFlags capture = {}) {
  return forward(model, prompt, std::span<const HeadInterventionSpec>(interventions), capture);
}

// Logits read out at an arbitrary position (through the final norm and
// unembedding), e.g. for checking intervention locality.
template <class T>
std::vector<T> logits_at_position(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
                                  std::span<const HeadInterventionSpec> interventions,
                                  std::size_t position) {
  detail::ForwardCache<T> cache;
  return detail::forward_impl(model, prompt, interventions, position, cache);
}

// Backprop `dlogits` (at the answer position) through a cached forward and
// accumulate parameter gradients into `grads`. `dhf_extra`, when non-empty,
// is an additional gradient on the final-norm output at the answer position.
template <class T>
void backward(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
              const detail::ForwardCache<T>& c, std::span<const T> dlogits,
              BasicTinyVLM<T>& grads, std::span<const T> dhf_extra = {}) {
  using namespace detail;
  const auto& cfg = model.config;
  const std::size_t seq = prompt.tokens.size(), d = cfg.d_model, H = cfg.n_heads,
                    dh = cfg.d_head(), f = cfg.d_mlp();
  const std::size_t p = c.readout;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Readout.
  std::vector<T> dhf(d, T(0));
  outer_accumulate<T>(std::span<const T>(c.hf), dlogits, grads.unembed);
  backprop_row<T>(dlogits, model.unembed, std::span<T>(dhf));
  if (!dhf_extra.empty()) {
    if (dhf_extra.size() != d) throw DimensionError("backward: dhf_extra must have d_model entries");
    for (std::size_t i = 0; i < d; ++i) dhf[i] += dhf_extra[i];
  }
  BasicMat<T> dx(seq, d);
  layer_norm_backward_row<T>(std::span<const T>(dhf), std::span<const T>(c.xhat_f),
                             model.lnf_g.row(0), c.rstd_f, dx.row(p), grads.lnf_g.row(0),
                             grads.lnf_b.row(0));

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& L = model.layers[li];
    auto& G = grads.layers[li];
    const auto& lc = c.layers[li];
    BasicMat<T> dx_mid = dx;  // residual path
    std::vector<T> da(f), du(f), dh2(d);
    for (std::size_t t = 0; t < seq; ++t) {
      auto dm = dx.row(t);
      if (row_is_zero<T>(dm)) continue;
      outer_accumulate<T>(lc.a.row(t), dm, G.w2);
      auto gb2 = G.b2.row(0);
      for (std::size_t i = 0; i < d; ++i) gb2[i] += dm[i];
      std::fill(da.begin(), da.end(), T(0));
      backprop_row<T>(dm, L.w2, std::span<T>(da));
      for (std::size_t i = 0; i < f; ++i)
        du[i] = static_cast<T>(static_cast<double>(da[i]) * gelu_grad(static_cast<double>(lc.u(t, i))));
      outer_accumulate<T>(lc.h2.row(t), std::span<const T>(du), G.w1);
      auto gb1 = G.b1.row(0);
      for (std::size_t i = 0; i < f; ++i) gb1[i] += du[i];
      std::fill(dh2.begin(), dh2.end(), T(0));
      backprop_row<T>(std::span<const T>(du), L.w1, std::span<T>(dh2));
      layer_norm_backward_row<T>(std::span<const T>(dh2), lc.xhat2.row(t), L.ln2_g.row(0),
                                 lc.rstd2[t], dx_mid.row(t), G.ln2_g.row(0), G.ln2_b.row(0));
    }

    // Output projection, then undo the intervention scaling.
    BasicMat<T> dz(seq, d);
    BasicMat<T> dx_in = dx_mid;
    for (std::size_t t = 0; t < seq; ++t) {
      auto g = dx_mid.row(t);
      if (row_is_zero<T>(g)) continue;
      outer_accumulate<T>(lc.zc.row(t), g, G.wo);
      backprop_row<T>(g, L.wo, dz.row(t));
      for (std::size_t h = 0; h < H; ++h) {
        const double a = lc.alpha[t * H + h];
        if (a == 1.0) continue;
        for (std::size_t cc = 0; cc < dh; ++cc)
          dz(t, h * dh + cc) = static_cast<T>(a * static_cast<double>(dz(t, h * dh + cc)));
      }
    }

    BasicMat<T> dq(seq, d), dk(seq, d), dv(seq, d);
    std::vector<double> dp(seq);
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t c0 = h * dh;
        auto dzr = dz.row(t).subspan(c0, dh);
        if (row_is_zero<T>(std::span<const T>(dzr.data(), dzr.size()))) continue;
        const auto& P = lc.probs[h];
        double sum_pdp = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          double acc = 0.0;
          for (std::size_t cc = 0; cc < dh; ++cc)
            acc += static_cast<double>(dzr[cc]) * static_cast<double>(lc.v(j, c0 + cc));
          dp[j] = acc;
          const double pj = static_cast<double>(P(t, j));
          sum_pdp += pj * acc;
          for (std::size_t cc = 0; cc < dh; ++cc)
            dv(j, c0 + cc) = static_cast<T>(static_cast<double>(dv(j, c0 + cc)) +
                                            pj * static_cast<double>(dzr[cc]));
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = static_cast<double>(P(t, j)) * (dp[j] - sum_pdp) * scale;
          if (ds == 0.0) continue;
          for (std::size_t cc = 0; cc < dh; ++cc) {
            dq(t, c0 + cc) = static_cast<T>(static_cast<double>(dq(t, c0 + cc)) +
                                            ds * static_cast<double>(lc.k(j, c0 + cc)));
            dk(j, c0 + cc) = static_cast<T>(static_cast<double>(dk(j, c0 + cc)) +
                                            ds * static_cast<double>(lc.q(t, c0 + cc)));
          }
        }
      }
    }

    std::vector<T> dh1(d);
    for (std::size_t t = 0; t < seq; ++t) {
      const bool zq = row_is_zero<T>(dq.row(t)), zk = row_is_zero<T>(dk.row(t)),
                 zv = row_is_zero<T>(dv.row(t));
      if (zq && zk && zv) continue;
      std::fill(dh1.begin(), dh1.end(), T(0));
      if (!zq) {
        outer_accumulate<T>(lc.h1.row(t), dq.row(t), G.wq);
        backprop_row<T>(dq.row(t), L.wq, std::span<T>(dh1));
      }
      if (!zk) {
        outer_accumulate<T>(lc.h1.row(t), dk.row(t), G.wk);
        backprop_row<T>(dk.row(t), L.wk, std::span<T>(dh1));
      }
      if (!zv) {
        outer_accumulate<T>(lc.h1.row(t), dv.row(t), G.wv);
        backprop_row<T>(dv.row(t), L.wv, std::span<T>(dh1));
      }
      layer_norm_backward_row<T>(std::span<const T>(dh1), lc.xhat1.row(t), L.ln1_g.row(0),
                                 lc.rstd1[t], dx_in.row(t), G.ln1_g.row(0), G.ln1_b.row(0));
    }
    dx = std::move(dx_in);
  }

  // Embeddings.
  std::size_t img = 0;
  for (std::size_t t = 0; t < seq; ++t) {
    auto g = dx.row(t);
    const auto tok = static_cast<std::size_t>(prompt.tokens[t]);
    auto te = grads.tok_emb.row(tok);
    auto pe = grads.pos_emb.row(t);
    for (std::size_t i = 0; i < d; ++i) {
      te[i] += g[i];
      pe[i] += g[i];
    }
    if (prompt.tokens[t] == Vocabulary::kImg) {
      outer_accumulate<T>(prompt.patches.template cast<T>().row(img++), g, grads.patch_proj);
      auto pb = grads.patch_bias.row(0);
      for (std::size_t i = 0; i < d; ++i) pb[i] += g[i];
    }
  }
}

// Cross-entropy of the answer token at the answer position; accumulates
// gradients scaled by `weight` into `grads` when given.
template <class T>
double answer_loss(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
                   std::size_t answer_class, BasicTinyVLM<T>* grads = nullptr,
                   double weight = 1.0, std::vector<T>* logits_out = nullptr) {
  detail::ForwardCache<T> cache;
  auto logits = detail::forward_impl(model, prompt, std::span<const HeadInterventionSpec>{},
                                     prompt.answer_position(), cache);
  const auto target = static_cast<std::size_t>(model.vocab().answer_token(answer_class));
  BasicMat<T> lm(1, logits.size(), logits);
  const std::size_t labels[1] = {target};
  auto lg = cross_entropy(lm, std::span<const std::size_t>(labels, 1));
  if (grads) {
    std::vector<T> dl(logits.size());
    for (std::size_t i = 0; i < dl.size(); ++i)
      dl[i] = static_cast<T>(static_cast<double>(lg.grad.data[i]) * weight);
    backward(model, prompt, cache, std::span<const T>(dl), *grads);
  }
  if (logits_out) *logits_out = std::move(logits);
  return lg.loss;
}

// Stacks layer `layer` of every trace into an n x d matrix.
inline Mat layer_activations(std::span<const ForwardTrace> traces, std::size_t layer) {
  if (traces.empty()) return Mat();
  const std::size_t d = traces[0].residual.at(layer).size();
  Mat m(traces.size(), d);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& r = traces[i].residual.at(layer);
    std::copy(r.begin(), r.end(), m.row(i).begin());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  std::optional<std::size_t> cls;   // none when strict and the vocab argmax is not a class
  std::vector<float> answer_logits;  // one per class
};

// Argmax over answer-class tokens, lowest class id on ties.
template <class T>
Prediction predict_from_logits(const Vocabulary& vocab, std::span<const T> logits,
                               bool strict = false) {
  Prediction p;
  const std::size_t C = vocab.n_classes();
  p.answer_logits.resize(C);
  std::size_t best = 0;
  for (std::size_t c = 0; c < C; ++c) {
    p.answer_logits[c] = static_cast<float>(logits[static_cast<std::size_t>(vocab.answer_token(c))]);
    if (p.answer_logits[c] > p.answer_logits[best]) best = c;
  }
  p.cls = best;
  if (strict) {
    std::size_t global = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[global]) global = i;
    if (!vocab.is_answer_token(static_cast<std::int32_t>(global))) p.cls.reset();
  }
  return p;
}

template <class T>
Prediction predict_answer(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt,
                          std::span<const HeadInterventionSpec> interventions = {},
                          bool strict = false) {
  auto r = forward(model, prompt, interventions);
  return predict_from_logits<T>(model.vocab(), std::span<const T>(r.logits), strict);
}

// ---------------------------------------------------------------------------
// Answer-row fast path.
//
// An intervention confined to the answer position cannot change any earlier
// position (causal mask), so after one baseline forward only the answer row
// has to be recomputed from the first intervened layer upward. The row
// arithmetic is shared with `forward`, so results are bit-identical.

template <class T>
class AnswerRowEvaluator {
 public:
  AnswerRowEvaluator(const BasicTinyVLM<T>& model, const EncodedPrompt& prompt)
      : model_(&model), prompt_(&prompt) {
    base_logits_ = detail::forward_impl(model, prompt, std::span<const HeadInterventionSpec>{},
                                        prompt.answer_position(), cache_);
  }

  std::size_t answer_position() const { return cache_.readout; }
  const std::vector<T>& baseline_logits() const { return base_logits_; }

  // `specs` must all target the answer position. `trace` (if given) receives
  // the answer-position residual stream.
  std::vector<T> logits(std::span<const HeadInterventionSpec> specs,
                        BasicForwardTrace<T>* trace = nullptr) const {
    const auto& cfg = model_->config;
    const std::size_t p = cache_.readout, H = cfg.n_heads, dh = cfg.d_head(), d = cfg.d_model,
                      f = cfg.d_mlp();
    detail::validate_interventions(cfg, prompt_->tokens.size(), specs);
    std::size_t start = cfg.n_layers;
    for (const auto& s : specs) {
      if (s.position != p)
        throw IndexError("AnswerRowEvaluator: intervention must target the answer position");
      start = std::min(start, s.layer);
    }
    if (trace) {
      trace->residual.clear();
      auto r0 = cache_.x0.row(p);
      trace->residual.emplace_back(r0.begin(), r0.end());
      for (std::size_t l = 0; l < std::min(start, cfg.n_layers); ++l) {
        const auto& next = l + 1 < cfg.n_layers ? cache_.layers[l + 1].x_in : cache_.x_final;
        auto r = next.row(p);
        trace->residual.emplace_back(r.begin(), r.end());
      }
    }
    if (start == cfg.n_layers) return base_logits_;

    std::vector<double> acc;
    std::vector<T> x(cache_.layers[start].x_in.row(p).begin(), cache_.layers[start].x_in.row(p).end());
    std::vector<T> xhat(d), h(d), q(d), k(d), v(d), z(d), zc(d), x_mid(d), xhat2(d), h2(d), u(f),
        a(f), x_out(d), probs(p + 1);
    for (std::size_t l = start; l < cfg.n_layers; ++l) {
      const auto& L = model_->layers[l];
      const auto& lc = cache_.layers[l];
      if (l == start) {
        auto zr = lc.z.row(p);
        std::copy(zr.begin(), zr.end(), z.begin());
      } else {
        detail::layer_norm_row<T>(std::span<const T>(x), L.ln1_g.row(0), L.ln1_b.row(0),
                                  std::span<T>(xhat), std::span<T>(h));
        matmul_row<T>(std::span<const T>(h), L.wq, std::span<T>(q), acc);
        matmul_row<T>(std::span<const T>(h), L.wk, std::span<T>(k), acc);
        matmul_row<T>(std::span<const T>(h), L.wv, std::span<T>(v), acc);
        for (std::size_t hh = 0; hh < H; ++hh) {
          detail::attend_row<T>(std::span<const T>(q), lc.k, lc.v, std::span<const T>(k),
                                std::span<const T>(v), p, hh, dh, std::span<T>(probs),
                                std::span<T>(z).subspan(hh * dh, dh));
        }
      }
      const auto alpha = detail::alpha_table<T>(cfg, prompt_->tokens.size(), specs, l);
      for (std::size_t hh = 0; hh < H; ++hh) {
        const double al = alpha[p * H + hh];
        for (std::size_t c = 0; c < dh; ++c) {
          const T zv = z[hh * dh + c];
          zc[hh * dh + c] = al == 1.0 ? zv : static_cast<T>(al * static_cast<double>(zv));
        }
      }
      double rstd2 = 0.0;
      detail::block_tail_row<T>(L, std::span<const T>(x), std::span<const T>(zc), std::span<T>(x_mid),
                                std::span<T>(xhat2), rstd2, std::span<T>(h2), std::span<T>(u),
                                std::span<T>(a), std::span<T>(x_out), acc);
      x = x_out;
      if (trace) trace->residual.push_back(x);
    }
    std::vector<T> xf, hf;
    double rstd = 0.0;
    return detail::readout_row<T>(*model_, std::span<const T>(x), xf, hf, rstd);
  }

 private:
  const BasicTinyVLM<T>* model_;
  const EncodedPrompt* prompt_;
  detail::ForwardCache<T> cache_;
  std::vector<T> base_logits_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainExample {
  EncodedPrompt prompt;
  std::size_t answer = 0;
  // Image-caption agreement, set for prompts carrying both segments.
  std::optional<bool> consistent;
};

struct TrainSchedule {
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 50;
  std::uint64_t seed = 0;
  // (layer, head) slots whose output projection is held at zero.
  std::vector<std::pair<std::size_t, std::size_t>> frozen_heads;
  // Weight of an auxiliary image-caption matching loss: a logistic readout
  // of the final-norm answer row, trained jointly and then discarded.
  double match_weight = 0.0;
};

struct TrainReport {
  std::vector<double> loss_curve;  // mean loss per epoch
  double final_accuracy = 0.0;     // answer-class argmax accuracy over the last epoch
  std::size_t steps = 0;
};

inline void zero_head_output(TinyVLM& model, std::size_t layer, std::size_t head) {
  const std::size_t dh = model.config.d_head();
  auto& wo = model.layers.at(layer).wo;
  for (std::size_t r = head * dh; r < (head + 1) * dh; ++r)
    for (std::size_t c = 0; c < wo.cols; ++c) wo(r, c) = 0.0f;
}

inline TrainReport train(TinyVLM& model, std::span<const TrainExample> data,
                         const TrainSchedule& schedule) {
  TrainReport report;
  if (schedule.epochs == 0) return report;
  if (data.empty()) throw TrainingError("train: empty dataset", 0);
  for (const auto& [l, h] : schedule.frozen_heads) {
    if (l >= model.config.n_layers || h >= model.config.n_heads)
      throw IndexError("train: frozen head out of range");
    zero_head_output(model, l, h);
  }
  const std::size_t bs = std::max<std::size_t>(1, schedule.batch_size);
  const std::size_t steps_per_epoch = (data.size() + bs - 1) / bs;
  const std::size_t total = steps_per_epoch * schedule.epochs;

  std::vector<AdamState> adam;
  model.for_each_param([&](const std::string&, const Mat& w) { adam.emplace_back(w.size(), schedule.lr); });
  TinyVLM grads = TinyVLM::zeros(model.config);
  Rng rng = Rng(schedule.seed).substream("sampling");
  const Vocabulary vocab = model.vocab();
  const std::size_t dh = model.config.d_head();
  const std::size_t d = model.config.d_model;
  std::vector<double> match(d + 1, 0.0), match_grad(d + 1, 0.0);
  {
    Rng mr = Rng(schedule.seed).substream("match_init");
    for (std::size_t j = 0; j < d; ++j) match[j] = mr.normal() / std::sqrt(static_cast<double>(d));
  }
  AdamState match_adam(d + 1, schedule.lr);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    auto order = rng.permutation(data.size());
    double epoch_loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < data.size(); b0 += bs) {
      const std::size_t b1 = std::min(data.size(), b0 + bs);
      grads.for_each_param([](const std::string&, Mat& g) { g.fill(0.0f); });
      std::fill(match_grad.begin(), match_grad.end(), 0.0);
      const double w = 1.0 / static_cast<double>(b1 - b0);
      double batch_loss = 0.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& ex = data[order[i]];
        detail::ForwardCache<float> cache;
        auto logits = detail::forward_impl(model, ex.prompt, std::span<const HeadInterventionSpec>{},
                                           ex.prompt.answer_position(), cache);
        const std::size_t label[1] = {static_cast<std::size_t>(vocab.answer_token(ex.answer))};
        auto lg = cross_entropy(Mat(1, logits.size(), logits), std::span<const std::size_t>(label, 1));
        batch_loss += w * lg.loss;
        std::vector<float> dl(logits.size());
        for (std::size_t j = 0; j < dl.size(); ++j)
          dl[j] = static_cast<float>(static_cast<double>(lg.grad.data[j]) * w);
        std::vector<float> dhf;
        if (schedule.match_weight > 0.0 && ex.consistent) {
          double zm = match[d];
          for (std::size_t j = 0; j < d; ++j) zm += match[j] * static_cast<double>(cache.hf[j]);
          const double pm = 1.0 / (1.0 + std::exp(-zm));
          const double y = *ex.consistent ? 1.0 : 0.0;
          batch_loss += w * schedule.match_weight *
                        -(y * std::log(std::max(pm, 1e-12)) + (1 - y) * std::log(std::max(1 - pm, 1e-12)));
          const double g = schedule.match_weight * w * (pm - y);
          dhf.resize(d);
          for (std::size_t j = 0; j < d; ++j) {
            dhf[j] = static_cast<float>(g * match[j]);
            match_grad[j] += g * static_cast<double>(cache.hf[j]);
          }
          match_grad[d] += g;
        }
        backward(model, ex.prompt, cache, std::span<const float>(dl), grads, std::span<const float>(dhf));
        auto pred = predict_from_logits<float>(vocab, std::span<const float>(logits));
        if (pred.cls && *pred.cls == ex.answer) ++correct;
      }
      if (!std::isfinite(batch_loss)) throw TrainingError("train: loss diverged (NaN/inf)", step);
      epoch_loss += batch_loss;
      for (const auto& [l, h] : schedule.frozen_heads) {
        auto& g = grads.layers[l].wo;
        for (std::size_t r = h * dh; r < (h + 1) * dh; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) g(r, c) = 0.0f;
      }
      double norm2 = 0.0;
      grads.for_each_param([&](const std::string&, const Mat& g) {
        for (float v : g.data) norm2 += static_cast<double>(v) * v;
      });
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) throw TrainingError("train: gradient diverged", step);
      const double clip = (schedule.clip_norm > 0 && norm > schedule.clip_norm)
                              ? schedule.clip_norm / norm
                              : 1.0;
      // Linear warmup, cosine decay to 10% of the base rate.
      double lr = schedule.lr;
      if (step < schedule.warmup_steps) {
        lr *= static_cast<double>(step + 1) / static_cast<double>(schedule.warmup_steps);
      } else {
        const double prog = static_cast<double>(step - schedule.warmup_steps) /
                            static_cast<double>(std::max<std::size_t>(1, total - schedule.warmup_steps));
        lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(1.0, prog)));
      }
      std::size_t k = 0;
      std::vector<Mat*> gl;
      grads.for_each_param([&](const std::string&, Mat& g) {
        if (clip != 1.0)
          for (float& v : g.data) v = static_cast<float>(v * clip);
        gl.push_back(&g);
      });
      model.for_each_param([&](const std::string&, Mat& p) {
        adam[k].lr = lr;
        adam_step(p, *gl[k], adam[k]);
        ++k;
      });
      if (schedule.match_weight > 0.0) {
        for (double& v : match_grad) v *= clip;
        match_adam.lr = lr;
        adam_step(std::span<double>(match), std::span<const double>(match_grad), match_adam);
      }
      ++step;
    }
    report.loss_curve.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    report.final_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  }
  report.steps = step;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint: "TVLM", u32 version, u32 config fields, u32 tensor count, then
// per tensor: u32 name length + name, u32 rows, u32 cols, f32 LE data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const TinyVLM& model) {
  binio::Writer w;
  w.bytes("TVLM");
  w.u32(kCheckpointVersion);
  const auto& c = model.config;
  for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.n_classes, c.n_image_tokens,
                        c.patch_dim, c.max_seq, c.vocab_size()})
    w.u32(static_cast<std::uint32_t>(v));
  std::uint32_t count = 0;
  model.for_each_param([&](const std::string&, const Mat&) { ++count; });
  w.u32(count);
  model.for_each_param([&](const std::string& name, const Mat& m) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows));
    w.u32(static_cast<std::uint32_t>(m.cols));
    w.f32s(m.data);
  });
  return w.buffer();
}

inline TinyVLM deserialize_checkpoint(const std::string& bytes) {
  binio::Reader r(bytes);
  r.expect_magic("TVLM");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  ModelConfig c;
  c.n_layers = r.u32();
  c.n_heads = r.u32();
  c.d_model = r.u32();
  c.n_classes = r.u32();
  c.n_image_tokens = r.u32();
  c.patch_dim = r.u32();
  c.max_seq = r.u32();
  const std::size_t vocab = r.u32();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what(), 8);
  }
  if (vocab != c.vocab_size()) throw FormatError("checkpoint vocab size mismatch", 36);
  TinyVLM m = TinyVLM::zeros(c);
  const std::uint32_t count = r.u32();
  std::uint32_t expected = 0;
  m.for_each_param([&](const std::string&, const Mat&) { ++expected; });
  if (count != expected) throw FormatError("checkpoint tensor count mismatch", r.offset() - 4);
  m.for_each_param([&](const std::string& name, Mat& t) {
    const std::size_t at = r.offset();
    const std::string got = r.str();
    if (got != name) throw FormatError("expected tensor '" + name + "', found '" + got + "'", at);
    const std::size_t rows = r.u32(), cols = r.u32();
    if (rows != t.rows || cols != t.cols)
      throw FormatError("tensor '" + name + "' has shape " + shape_str(rows, cols), at);
    r.f32s(std::span<float>(t.data));
  });
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
  return m;
}

inline void save_checkpoint(const TinyVLM& model, const std::filesystem::path& path) {
  binio::write_file_atomic(path, serialize_checkpoint(model));
}

inline TinyVLM load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(binio::read_file(path));
}

}  // namespace conflictlens
