// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "conflictlens/model.hpp"
#include "fixtures.hpp"

using namespace conflictlens;
using fixtures::micro_config;
using fixtures::micro_prompts;

namespace {

TinyVLM micro_model(std::uint64_t seed, std::size_t n_layers = 1) {
  Rng rng(seed);
  auto m = TinyVLM::random(micro_config(n_layers), rng);
  fixtures::perturb(m, rng, 0.05);
  return m;
}

HeadInterventionSpec at_answer(const EncodedPrompt& p, std::size_t layer, std::size_t head, double alpha) {
  return {layer, head, alpha, p.answer_position()};
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
  auto c = micro_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, VocabularyLayout) {
  Vocabulary v(10);
  EXPECT_EQ(v.caption_base(), 12);
  EXPECT_EQ(v.answer_base(), 22);
  EXPECT_EQ(v.size(), 32u);
  EXPECT_TRUE(v.is_answer_token(v.answer_token(9)));
  EXPECT_FALSE(v.is_answer_token(v.caption_token(9)));
  EXPECT_EQ(v.answer_class(v.answer_token(4)), 4u);
}

TEST(Forward, AlphaOneIsBitIdenticalToPlain) {
  auto m = micro_model(1, 2);
  auto set = micro_prompts(10, PairMode::Inconsistent, Modality::Image, 2);
  for (const auto& p : set.prompts) {
    auto plain = forward(m, p).logits;
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h) {
        std::vector<HeadInterventionSpec> s = {at_answer(p, l, h, 1.0)};
        EXPECT_EQ(forward(m, p, s).logits, plain);
      }
  }
}

TEST(Forward, AlphaZeroMatchesZeroedHeadOnOneLayer) {
  // With one layer, a head's output at earlier positions never reaches the
  // answer row, so zeroing its output projection is the manual oracle.
  auto m = micro_model(3);
  auto set = micro_prompts(10, PairMode::Inconsistent, Modality::Caption, 4);
  for (std::size_t h = 0; h < 2; ++h) {
    TinyVLM ablated = m;
    zero_head_output(ablated, 0, h);
    for (const auto& p : set.prompts) {
      std::vector<HeadInterventionSpec> s = {at_answer(p, 0, h, 0.0)};
      auto a = forward(m, p, s).logits, b = forward(ablated, p).logits;
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    }
  }
}

TEST(Forward, InterventionLocality) {
  auto m = micro_model(5, 2);
  auto set = micro_prompts(5, PairMode::Inconsistent, Modality::Image, 6);
  for (const auto& p : set.prompts) {
    std::vector<HeadInterventionSpec> s = {at_answer(p, 0, 1, 7.5)};
    for (std::size_t pos = 0; pos < p.answer_position(); ++pos)
      EXPECT_EQ(logits_at_position(m, p, s, pos), logits_at_position(m, p, {}, pos));
    EXPECT_NE(logits_at_position(m, p, s, p.answer_position()), logits_at_position(m, p, {}, p.answer_position()));
  }
}

TEST(Forward, LinearAtTheHook) {
  auto m = micro_model(7);
  auto set = micro_prompts(5, PairMode::Consistent, Modality::Image, 8);
  for (const auto& p : set.prompts) {
    const std::size_t ap = p.answer_position();
    auto mid = [&](double alpha) {
      detail::ForwardCache<float> c;
      std::vector<HeadInterventionSpec> s = {at_answer(p, 0, 0, alpha)};
      detail::forward_impl(m, p, std::span<const HeadInterventionSpec>(s), ap, c);
      auto r = c.layers[0].x_mid.row(ap);
      return std::vector<double>(r.begin(), r.end());
    };
    auto r0 = mid(0.0), r1 = mid(1.0);
    for (double alpha : {-10.0, -2.5, 3.0, 10.0}) {
      auto ra = mid(alpha);
      for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_NEAR(ra[i], r0[i] + alpha * (r1[i] - r0[i]), 1e-4);
    }
  }
}

TEST(Forward, TraceCaptureDoesNotChangeLogits) {
  auto m = micro_model(9, 2);
  auto set = micro_prompts(5, PairMode::Inconsistent, Modality::Caption, 10);
  for (const auto& p : set.prompts) {
    auto plain = forward(m, p);
    auto traced = forward(m, p, std::span<const HeadInterventionSpec>{}, CaptureFlags{true, true});
    EXPECT_EQ(plain.logits, traced.logits);
    ASSERT_TRUE(traced.trace);
    EXPECT_EQ(traced.trace->residual.size(), 3u);
    EXPECT_EQ(traced.trace->head_z.size(), 2u);
    EXPECT_EQ(traced.trace->head_z[0].size(), 2u);
    EXPECT_EQ(traced.trace->head_z[0][0].size(), 4u);
  }
}

TEST(Forward, HeadOutputsReflectIntervention) {
  auto m = micro_model(11);
  auto set = micro_prompts(3, PairMode::Inconsistent, Modality::Image, 12);
  const auto& p = set.prompts[0];
  auto base = forward(m, p, std::span<const HeadInterventionSpec>{}, CaptureFlags{false, true});
  std::vector<HeadInterventionSpec> s = {at_answer(p, 0, 1, 3.0)};
  auto scaled = forward(m, p, s, CaptureFlags{false, true});
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_FLOAT_EQ(scaled.trace->head_z[0][1][c], 3.0f * base.trace->head_z[0][1][c]);
    EXPECT_EQ(scaled.trace->head_z[0][0][c], base.trace->head_z[0][0][c]);
  }
}

TEST(Forward, RejectsBadInputs) {
  auto m = micro_model(13);
  auto set = micro_prompts(1, PairMode::Inconsistent, Modality::Image, 14);
  auto p = set.prompts[0];
  std::vector<HeadInterventionSpec> bad_layer = {{1, 0, 2.0, p.answer_position()}};
  std::vector<HeadInterventionSpec> bad_head = {{0, 2, 2.0, p.answer_position()}};
  std::vector<HeadInterventionSpec> bad_pos = {{0, 0, 2.0, p.length()}};
  EXPECT_THROW(forward(m, p, bad_layer), IndexError);
  EXPECT_THROW(forward(m, p, bad_head), IndexError);
  EXPECT_THROW(forward(m, p, bad_pos), IndexError);
  auto long_prompt = p;
  long_prompt.tokens.resize(17, Vocabulary::kSep);
  EXPECT_THROW(forward(m, long_prompt), IndexError);
}

TEST(AnswerRowEvaluator, BitIdenticalToFullForward) {
  auto m = micro_model(15, 2);
  auto set = micro_prompts(8, PairMode::Inconsistent, Modality::Image, 16);
  for (const auto& p : set.prompts) {
    AnswerRowEvaluator<float> ev(m, p);
    EXPECT_EQ(ev.baseline_logits(), forward(m, p).logits);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h)
        for (double alpha : {-10.0, 0.0, 1.0, 4.0}) {
          std::vector<HeadInterventionSpec> s = {at_answer(p, l, h, alpha)};
          ForwardTrace tr;
          auto fast = ev.logits(s, &tr);
          auto full = forward(m, p, s, CaptureFlags{true, false});
          EXPECT_EQ(fast, full.logits);
          EXPECT_EQ(tr.residual, full.trace->residual);
        }
  }
}

TEST(Backward, MatchesFiniteDifferencesOnMicroConfig) {
  Rng rng(21);
  auto md = BasicTinyVLM<double>::random(micro_config(), rng);
  fixtures::perturb(md, rng, 0.1);
  auto set = micro_prompts(2, PairMode::Inconsistent, Modality::Caption, 22);
  const auto& p = set.prompts[0];
  const std::size_t label = set.pairs[0].target_label();
  auto grads = BasicTinyVLM<double>::zeros(md.config);
  answer_loss(md, p, label, &grads);
  auto ptrs = fixtures::param_pointers(md);
  auto gptrs = fixtures::param_pointers(grads);
  for (std::size_t i = 0; i < ptrs.size(); i += 3) {
    const double orig = *ptrs[i], h = 1e-5;
    *ptrs[i] = orig + h;
    const double up = answer_loss(md, p, label);
    *ptrs[i] = orig - h;
    const double dn = answer_loss(md, p, label);
    *ptrs[i] = orig;
    const double fd = (up - dn) / (2 * h);
    EXPECT_LT(relative_error(*gptrs[i], fd, 1e-6), 1e-3) << "param " << i;
  }
}

TEST(Backward, ExtraReadoutGradientIsAccumulated) {
  Rng rng(23);
  auto md = BasicTinyVLM<double>::random(micro_config(), rng);
  fixtures::perturb(md, rng, 0.1);
  auto set = micro_prompts(1, PairMode::Consistent, Modality::Image, 24);
  const auto& p = set.prompts[0];
  std::vector<double> w(8);
  for (auto& x : w) x = rng.normal();
  // Objective: sum_i w_i * hf_i at the answer position.
  auto objective = [&](const BasicTinyVLM<double>& m) {
    detail::ForwardCache<double> c;
    detail::forward_impl(m, p, std::span<const HeadInterventionSpec>{}, p.answer_position(), c);
    double s = 0;
    for (std::size_t i = 0; i < 8; ++i) s += w[i] * c.hf[i];
    return s;
  };
  detail::ForwardCache<double> c;
  auto logits = detail::forward_impl(md, p, std::span<const HeadInterventionSpec>{}, p.answer_position(), c);
  auto grads = BasicTinyVLM<double>::zeros(md.config);
  std::vector<double> zero(logits.size(), 0.0);
  backward(md, p, c, std::span<const double>(zero), grads, std::span<const double>(w));
  auto ptrs = fixtures::param_pointers(md);
  auto gptrs = fixtures::param_pointers(grads);
  for (std::size_t i = 0; i < ptrs.size(); i += 5) {
    const double orig = *ptrs[i], h = 1e-5;
    *ptrs[i] = orig + h;
    const double up = objective(md);
    *ptrs[i] = orig - h;
    const double dn = objective(md);
    *ptrs[i] = orig;
    EXPECT_LT(relative_error(*gptrs[i], (up - dn) / (2 * h), 1e-6), 1e-3) << "param " << i;
  }
  std::vector<double> wrong(3, 0.0);
  EXPECT_THROW(backward(md, p, c, std::span<const double>(zero), grads, std::span<const double>(wrong)),
               DimensionError);
}

TEST(Predict, RiggedUnembeddingFavorsClass) {
  auto m = TinyVLM::zeros(micro_config());
  m.lnf_b(0, 0) = 1.0f;
  m.unembed(0, static_cast<std::size_t>(m.vocab().answer_token(2))) = 5.0f;
  auto set = micro_prompts(4, PairMode::Inconsistent, Modality::Image, 30);
  for (const auto& p : set.prompts) EXPECT_EQ(predict_answer(m, p).cls, std::optional<std::size_t>(2));
}

TEST(Predict, TiesGoToLowestClass) {
  auto m = TinyVLM::zeros(micro_config());
  auto set = micro_prompts(2, PairMode::Inconsistent, Modality::Image, 31);
  EXPECT_EQ(predict_answer(m, set.prompts[0]).cls, std::optional<std::size_t>(0));
}

TEST(Predict, StrictModeReportsNonAnswerArgmax) {
  auto m = TinyVLM::zeros(micro_config());
  m.lnf_b(0, 0) = 1.0f;
  m.unembed(0, static_cast<std::size_t>(Vocabulary::kSep)) = 9.0f;
  m.unembed(0, static_cast<std::size_t>(m.vocab().answer_token(1))) = 1.0f;
  auto set = micro_prompts(1, PairMode::Inconsistent, Modality::Image, 32);
  EXPECT_EQ(predict_answer(m, set.prompts[0]).cls, std::optional<std::size_t>(1));
  EXPECT_FALSE(predict_answer(m, set.prompts[0], {}, true).cls.has_value());
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  auto m = micro_model(40);
  const auto before = m;
  auto set = micro_prompts(10, PairMode::Consistent, Modality::Image, 41);
  std::vector<TrainExample> data;
  for (std::size_t i = 0; i < set.pairs.size(); ++i) data.push_back({set.prompts[i], set.pairs[i].target_label(), {}});
  TrainSchedule s;
  s.epochs = 0;
  auto rep = train(m, data, s);
  EXPECT_EQ(m, before);
  EXPECT_EQ(rep.steps, 0u);
}

TEST(Train, LossDecreasesAndIsDeterministic) {
  Rng rng(42);
  auto imgs = generate_shapes_grid(fixtures::micro_shapes(), 300, rng);
  CurriculumSpec cs;
  auto data = make_training_set(imgs, 3, cs, fixtures::format_for(micro_config()), rng);
  TrainSchedule s;
  s.epochs = 6;
  s.batch_size = 16;
  s.lr = 1e-2;
  s.warmup_steps = 5;
  s.seed = 3;
  s.match_weight = 1.0;
  auto a = micro_model(43), b = micro_model(43);
  auto ra = train(a, data, s), rb = train(b, data, s);
  ASSERT_EQ(ra.loss_curve.size(), 6u);
  EXPECT_LT(ra.loss_curve.back(), ra.loss_curve.front());
  EXPECT_EQ(a, b);
  EXPECT_EQ(ra.loss_curve, rb.loss_curve);
  EXPECT_GT(ra.final_accuracy, 0.5);
}

TEST(Train, FrozenHeadStaysSilent) {
  auto set = micro_prompts(40, PairMode::Inconsistent, Modality::Image, 44);
  std::vector<TrainExample> data;
  for (std::size_t i = 0; i < set.pairs.size(); ++i) data.push_back({set.prompts[i], set.pairs[i].target_label(), {}});
  TrainSchedule s;
  s.epochs = 2;
  s.batch_size = 8;
  s.frozen_heads = {{0, 1}};
  auto m = micro_model(45);
  train(m, data, s);
  for (std::size_t r = 4; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(m.layers[0].wo(r, c), 0.0f);
}

TEST(Train, DivergenceRaisesTrainingErrorWithStep) {
  auto set = micro_prompts(8, PairMode::Consistent, Modality::Image, 46);
  std::vector<TrainExample> data;
  for (std::size_t i = 0; i < set.pairs.size(); ++i) data.push_back({set.prompts[i], set.pairs[i].target_label(), {}});
  auto m = micro_model(47);
  m.unembed(0, 0) = std::numeric_limits<float>::quiet_NaN();
  TrainSchedule s;
  s.epochs = 1;
  try {
    train(m, data, s);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
  EXPECT_THROW(train(m, std::vector<TrainExample>{}, s), TrainingError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = micro_model(50, 2);
  const auto bytes = serialize_checkpoint(m);
  EXPECT_EQ(bytes.substr(0, 4), "TVLM");
  auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back, m);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  auto bytes = serialize_checkpoint(micro_model(51));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);
}

TEST(LayerActivations, StacksTraceRows) {
  auto m = micro_model(52, 2);
  auto set = micro_prompts(4, PairMode::Inconsistent, Modality::Image, 53);
  std::vector<ForwardTrace> traces;
  for (const auto& p : set.prompts)
    traces.push_back(*forward(m, p, std::span<const HeadInterventionSpec>{}, CaptureFlags{true, false}).trace);
  Mat a = layer_activations(traces, 2);
  ASSERT_EQ(a.rows, 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(a(i, j), traces[i].residual[2][j]);
}
