// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Small models and prompt sets shared by the test binaries.

#pragma once

#include <vector>

#include "conflictlens/conflictgen.hpp"
#include "conflictlens/curriculum.hpp"
#include "conflictlens/model.hpp"

namespace fixtures {

using namespace conflictlens;

// 1 layer, 2 heads, d_model 8, 3 classes on a 2x2 grid of 4-channel patches.
inline ModelConfig micro_config(std::size_t n_layers = 1) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.n_classes = 3;
  c.n_image_tokens = 4;
  c.patch_dim = 4;
  c.max_seq = 16;
  return c;
}

inline ShapesGridSpec micro_shapes() {
  ShapesGridSpec s;
  s.n_classes = 3;
  s.grid = 2;
  s.patch_dim = 4;
  return s;
}

inline PromptFormat format_for(const ModelConfig& c) { return PromptFormat{c.vocab(), 2, 5}; }

inline EvalSet micro_prompts(std::size_t n, PairMode mode, Modality target, std::uint64_t seed) {
  Rng rng(seed);
  auto imgs = generate_shapes_grid(micro_shapes(), n, rng);
  return make_eval_set(imgs, 3, mode, target, format_for(micro_config()), rng);
}

// Nudges every parameter so biases and norm gains are exercised too.
template <class T>
void perturb(BasicTinyVLM<T>& m, Rng& rng, double scale) {
  m.for_each_param([&](const std::string&, BasicMat<T>& w) {
    for (auto& x : w.data) x = static_cast<T>(static_cast<double>(x) + scale * rng.normal());
  });
}

template <class T>
std::vector<T*> param_pointers(BasicTinyVLM<T>& m) {
  std::vector<T*> out;
  m.for_each_param([&](const std::string&, BasicMat<T>& w) {
    for (auto& x : w.data) out.push_back(&x);
  });
  return out;
}

}  // namespace fixtures
