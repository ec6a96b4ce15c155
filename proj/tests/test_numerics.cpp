// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "conflictlens/numerics.hpp"

using namespace conflictlens;

namespace {

Mat random_mat(std::size_t r, std::size_t c, Rng& rng) {
  Mat m(r, c);
  for (auto& v : m.data) v = static_cast<float>(rng.normal());
  return m;
}

// Naive triple loop in double.
BasicMat<double> naive_matmul(const Mat& a, const Mat& b) {
  BasicMat<double> out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(3);
  Mat m = random_mat(3, 4, rng);
  EXPECT_EQ(matmul(Mat::identity(3), m), m);
}

TEST(Matmul, HandChecked2x2) {
  Mat a(2, 2, std::vector<float>{1, 2, 3, 4});
  Mat b(2, 1, std::vector<float>{0, 1});
  Mat c = matmul(a, b);
  ASSERT_EQ(c.rows, 2u);
  ASSERT_EQ(c.cols, 1u);
  EXPECT_EQ(c(0, 0), 2.0f);
  EXPECT_EQ(c(1, 0), 4.0f);
}

TEST(Matmul, MatchesNaiveLoop) {
  Rng rng(11);
  Mat a = random_mat(5, 7, rng), b = random_mat(7, 3, rng);
  Mat c = matmul(a, b);
  auto ref = naive_matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c(i, j), ref(i, j), 1e-6);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Mat(2, 3), Mat(2, 3)), DimensionError);
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(5);
  Mat a = random_mat(4, 6, rng), b = random_mat(4, 5, rng), c = random_mat(3, 6, rng);
  Mat at(6, 4), ct(6, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) at(j, i) = a(i, j);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) ct(j, i) = c(i, j);
  Mat tn = matmul_tn(a, b), ref_tn = matmul(at, b);
  Mat nt = matmul_nt(a, c), ref_nt = matmul(a, ct);
  for (std::size_t i = 0; i < tn.size(); ++i) EXPECT_NEAR(tn.data[i], ref_tn.data[i], 1e-5);
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt.data[i], ref_nt.data[i], 1e-5);
}

TEST(MatmulProperty, AssociativeOnRandomTriples) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(6), n = 1 + rng.uniform_int(6), p = 1 + rng.uniform_int(6),
                      q = 1 + rng.uniform_int(6);
    Mat a = random_mat(m, n, rng), b = random_mat(n, p, rng), c = random_mat(p, q, rng);
    Mat l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < l.size(); ++i) {
      num += std::pow(l.data[i] - r.data[i], 2);
      den += std::pow(r.data[i], 2);
    }
    EXPECT_LT(std::sqrt(num), 1e-4 * std::max(1.0, std::sqrt(den)));
  }
}

TEST(Softmax, UniformLogits) {
  auto p = softmax(std::vector<float>{0, 0, 0, 0});
  for (float v : p) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Softmax, SingleElement) {
  EXPECT_EQ(softmax(std::vector<double>{-42.0})[0], 1.0);
}

TEST(Softmax, MatchesDirect64Bit) {
  auto p = softmax(std::vector<double>{1, 2, 3});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(p[1], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-12);
}

TEST(Softmax, TemperatureDividesLogits) {
  auto a = softmax(std::vector<double>{1, 2, 3}, 2.0);
  auto b = softmax(std::vector<double>{0.5, 1, 1.5});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(SoftmaxProperty, ShiftInvariantAndNormalized) {
  Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> v(1 + rng.uniform_int(12));
    for (auto& x : v) x = static_cast<float>(5 * rng.normal());
    const float c = static_cast<float>(20 * rng.normal());
    std::vector<float> w = v;
    for (auto& x : w) x += c;
    auto p = softmax(v), q = softmax(w);
    double s = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_GT(p[i], 0.0f);
      EXPECT_NEAR(p[i], q[i], 1e-6);
      s += p[i];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto p = softmax(std::vector<float>{1e30f, 0.0f});
  EXPECT_FLOAT_EQ(p[0], 1.0f);
  EXPECT_FLOAT_EQ(p[1], 0.0f);
}

TEST(CrossEntropy, ConfidentPredictionHasNearZeroLoss) {
  Mat logits(1, 5);
  logits(0, 2) = 1e6f;
  auto r = cross_entropy(logits, std::vector<std::size_t>{2});
  EXPECT_NEAR(r.loss, 0.0, 1e-9);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t C : {2u, 7u, 10u}) {
    Mat logits(3, C, 0.25f);
    auto r = cross_entropy(logits, std::vector<std::size_t>{0, 1, C - 1});
    EXPECT_NEAR(r.loss, std::log(static_cast<double>(C)), 1e-7);
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  const std::size_t B = 4, C = 6;
  Mat logits = random_mat(B, C, rng);
  std::vector<std::size_t> labels = {0, 3, 5, 2};
  auto r = cross_entropy(logits, labels);
  std::vector<double> x(logits.data.begin(), logits.data.end());
  auto f = [&](std::span<const double> p) {
    BasicMat<double> m(B, C, std::vector<double>(p.begin(), p.end()));
    return cross_entropy(m, labels).loss;
  };
  auto g = finite_difference_gradient(f, x, 1e-5);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(relative_error(r.grad.data[i], g[i], 1e-6), 1e-3) << i;
}

TEST(CrossEntropy, OutOfRangeLabelThrows) {
  EXPECT_THROW(cross_entropy(Mat(1, 3), std::vector<std::size_t>{3}), IndexError);
  EXPECT_THROW(cross_entropy(Mat(2, 3), std::vector<std::size_t>{0}), DimensionError);
}

TEST(Adam, ZeroGradientLeavesParams) {
  Mat p(2, 2, std::vector<float>{1, -2, 3, 4});
  Mat before = p;
  AdamState st;
  adam_step(p, Mat(2, 2), st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ConstantGradientMovesOppositeSign) {
  Mat p(1, 2, std::vector<float>{0, 0});
  Mat g(1, 2, std::vector<float>{0.3f, -2.0f});
  AdamState st(2, 0.01);
  for (int i = 0; i < 100; ++i) adam_step(p, g, st);
  EXPECT_LT(p(0, 0), 0.0f);
  EXPECT_GT(p(0, 1), 0.0f);
  EXPECT_EQ(st.step, 100u);
}

TEST(Adam, MatchesHandRolledTraceOnSquare) {
  // f(x) = x^2, grad 2x, three steps from x = 1.
  std::vector<double> x = {1.0};
  AdamState st(1, 0.1);
  double ref = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    std::vector<double> g = {2 * x[0]};
    adam_step(std::span<double>(x), std::span<const double>(g), st);
    const double gr = 2 * ref;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    ref -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(x[0], ref, 1e-6);
  }
}

TEST(Adam, ShapeMismatchThrows) {
  Mat p(2, 2);
  AdamState st;
  EXPECT_THROW(adam_step(p, Mat(1, 4), st), DimensionError);
}

TEST(FiniteDifference, SquareAtThree) {
  auto g = finite_difference_gradient([](std::span<const double> x) { return x[0] * x[0]; }, {3.0}, 1e-3);
  EXPECT_NEAR(g[0], 6.0, 1e-5);
}

TEST(FiniteDifference, ConstantGivesZero) {
  auto g = finite_difference_gradient([](std::span<const double>) { return 4.2; }, {1.0, -2.0, 5.0}, 1e-3);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Gelu, DerivativeMatchesFiniteDifference) {
  for (double x = -4; x <= 4; x += 0.37) {
    auto g = finite_difference_gradient([](std::span<const double> p) { return gelu(p[0]); }, {x}, 1e-5);
    EXPECT_LT(relative_error(gelu_grad(x), g[0], 1e-6), 1e-6);
  }
}

TEST(Rng, SameSeedSameStream) {
  Rng a(99), b(99);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, MatchesReferenceXoshiro) {
  // Independent xoshiro256** seeded through splitmix64.
  std::uint64_t sm = 12345, s[4];
  for (auto& w : s) {
    std::uint64_t z = (sm += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    w = z ^ (z >> 31);
  }
  auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
  Rng r(12345);
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t expect = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    ASSERT_EQ(r.next_u64(), expect) << i;
  }
}

TEST(Rng, SubstreamsAreIndependentOfParentState) {
  Rng a(5);
  Rng s1 = a.substream("kmeans");
  a.next_u64();
  Rng s2 = a.substream("kmeans");
  EXPECT_EQ(s1.next_u64(), s2.next_u64());
  EXPECT_NE(Rng(5).substream("data").next_u64(), Rng(5).substream("init").next_u64());
  EXPECT_NE(Rng(5).substream("x", 0).next_u64(), Rng(5).substream("x", 1).next_u64());
}

TEST(Rng, UniformIntCoversRangeEvenly) {
  Rng r(8);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.uniform_int(7)];
  for (int c : counts) EXPECT_NEAR(c / 70000.0, 1.0 / 7.0, 0.01);
}

TEST(Rng, PermutationIsAPermutation) {
  Rng r(4);
  auto p = r.permutation(50);
  std::vector<bool> seen(50, false);
  for (auto i : p) {
    ASSERT_LT(i, 50u);
    EXPECT_FALSE(seen[i]);
    seen[i] = true;
  }
}
