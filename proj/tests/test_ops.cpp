#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace tsmi;
using tsmi::test::random_tensor;

namespace {

Var<float> V(Tensor<float> t) { return Var<float>(std::move(t)); }

TEST(Matmul, IdentityAndHandCase) {
  auto id = V(Tensor<float>({2, 2}, {1, 0, 0, 1}));
  auto b = V(Tensor<float>({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(ops::matmul(id, b).value(), b.value());
  auto r = ops::matmul(V(Tensor<float>({1, 2}, {1, 2})), V(Tensor<float>({2, 1}, {3, 4})));
  EXPECT_EQ(r.value(), Tensor<float>({1, 1}, {11}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3, "mm");
  auto a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  auto c = ops::matmul(V(a), V(b)).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-6);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(V(Tensor<float>({2, 3})), V(Tensor<float>({4, 2})));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Linear, AffineOverLeadingDims) {
  Rng rng(1, "lin");
  auto x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
  auto y = ops::linear(V(x), V(w), V(b)).value();
  ASSERT_EQ(y.shape(), (Shape{2, 3, 5}));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < 4; ++k) s += static_cast<double>(x[r * 4 + k]) * w[k * 5 + j];
      EXPECT_NEAR(y[r * 5 + j], s, 1e-6);
    }
}

TEST(Conv1d, IdentityKernel) {
  auto y = ops::conv1d(V(Tensor<float>({1, 1, 3}, {1, 2, 3})), V(Tensor<float>({1, 1, 1}, {1})),
                       V(Tensor<float>({1}, {0})), 0);
  EXPECT_EQ(y.value(), Tensor<float>({1, 1, 3}, {1, 2, 3}));
}

TEST(Conv1d, BoxFilterWithZeroPad) {
  auto y = ops::conv1d(V(Tensor<float>({1, 1, 3}, {1, 1, 1})), V(Tensor<float>({1, 1, 3}, {1, 1, 1})),
                       V(Tensor<float>({1}, {0})), 1);
  EXPECT_EQ(y.value(), Tensor<float>({1, 1, 3}, {2, 3, 2}));
}

TEST(Conv1d, MatchesSlidingWindow) {
  Rng rng(5, "conv");
  const std::size_t B = 2, Cin = 2, Cout = 3, T = 7, K = 3, P = 1;
  auto x = random_tensor({B, Cin, T}, rng), w = random_tensor({Cout, Cin, K}, rng), b = random_tensor({Cout}, rng);
  auto y = ops::conv1d(V(x), V(w), V(b), P).value();
  ASSERT_EQ(y.shape(), (Shape{B, Cout, T}));
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t t = 0; t < T; ++t) {
        double s = b[o];
        for (std::size_t c = 0; c < Cin; ++c)
          for (std::size_t j = 0; j < K; ++j) {
            const long src = static_cast<long>(t + j) - static_cast<long>(P);
            if (src >= 0 && src < static_cast<long>(T)) s += static_cast<double>(w.at(o, c, j)) * x.at(n, c, src);
          }
        EXPECT_NEAR(y.at(n, o, t), s, 1e-6);
      }
}

TEST(Conv1d, KernelWiderThanPaddedInputThrows) {
  EXPECT_THROW(ops::conv1d(V(Tensor<float>({1, 1, 2})), V(Tensor<float>({1, 1, 5})), V(Tensor<float>({1})), 1),
               DimensionError);
}

TEST(BatchNorm, ConstantInputGivesZeros) {
  ops::BatchNormStats<float> st(2);
  auto y = ops::batchnorm1d(V(Tensor<float>({3, 2, 4}, 7.f)), V(Tensor<float>({2}, 1.f)), V(Tensor<float>({2}, 0.f)),
                            st, true);
  for (float v : y.value().values()) EXPECT_EQ(v, 0.f);
}

TEST(BatchNorm, ShiftByBeta) {
  Rng rng(2, "bn");
  ops::BatchNormStats<float> st(3);
  auto y = ops::batchnorm1d(V(random_tensor({4, 3, 5}, rng)), V(Tensor<float>({3}, 1.f)), V(Tensor<float>({3}, 5.f)),
                            st, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t t = 0; t < 5; ++t) s += y.value().at(n, c, t);
    EXPECT_NEAR(s / 20, 5.0, 1e-5);
  }
}

TEST(BatchNorm, MatchesTwoPassStatistics) {
  Rng rng(9, "bn2");
  const std::size_t B = 3, C = 2, T = 6;
  auto x = random_tensor({B, C, T}, rng, 2.0), g = random_tensor({C}, rng), b = random_tensor({C}, rng);
  ops::BatchNormStats<float> st(C);
  auto y = ops::batchnorm1d(V(x), V(g), V(b), st, true).value();
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0, var = 0;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t t = 0; t < T; ++t) mu += x.at(n, c, t);
    mu /= B * T;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t t = 0; t < T; ++t) var += (x.at(n, c, t) - mu) * (x.at(n, c, t) - mu);
    var /= B * T;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t t = 0; t < T; ++t)
        EXPECT_NEAR(y.at(n, c, t), g[c] * (x.at(n, c, t) - mu) / std::sqrt(var + 1e-5) + b[c], 1e-5);
    EXPECT_NEAR(st.running_mean[c], 0.1 * mu, 1e-6);
    EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * var * (B * T) / (B * T - 1), 1e-6);
  }
}

TEST(BatchNorm, EvalBeforeTrainingUsesInitialStats) {
  ops::BatchNormStats<float> st(1);
  auto y = ops::batchnorm1d(V(Tensor<float>({1, 1, 2}, {1, -2})), V(Tensor<float>({1}, 1.f)),
                            V(Tensor<float>({1}, 0.f)), st, false);
  EXPECT_NEAR(y.value()[0], 1 / std::sqrt(1 + 1e-5), 1e-7);
  EXPECT_NEAR(y.value()[1], -2 / std::sqrt(1 + 1e-5), 1e-7);
}

TEST(LayerNorm, HandCases) {
  auto y = ops::layer_norm(V(Tensor<float>({4}, 1.f)), V(Tensor<float>({4}, 1.f)), V(Tensor<float>({4}, 0.f)));
  for (float v : y.value().values()) EXPECT_EQ(v, 0.f);
  auto y2 = ops::layer_norm(V(Tensor<float>({2}, {2, -2})), V(Tensor<float>({2}, 1.f)), V(Tensor<float>({2}, 0.f)));
  // eps = 1e-5 shifts the exact answer by 1.25e-6
  EXPECT_NEAR(y2.value()[0], 1.0, 2e-6);
  EXPECT_NEAR(y2.value()[1], -1.0, 2e-6);
}

TEST(LayerNorm, MatchesDirectFormula) {
  Rng rng(4, "ln");
  auto x = random_tensor({3, 7}, rng, 3.0), g = random_tensor({7}, rng), b = random_tensor({7}, rng);
  auto y = ops::layer_norm(V(x), V(g), V(b)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 7; ++j) mu += x.at(r, j);
    mu /= 7;
    for (std::size_t j = 0; j < 7; ++j) var += (x.at(r, j) - mu) * (x.at(r, j) - mu);
    var /= 7;
    for (std::size_t j = 0; j < 7; ++j)
      EXPECT_NEAR(y.at(r, j), (x.at(r, j) - mu) / std::sqrt(var + 1e-5) * g[j] + b[j], 1e-6);
  }
}

TEST(Softmax, UniformAndStable) {
  auto p = ops::softmax(V(Tensor<float>({3}, 0.f))).value();
  for (float v : p.values()) EXPECT_NEAR(v, 1.0 / 3, 1e-7);
  auto q = ops::softmax(V(Tensor<float>({2}, {1000, 0}))).value();
  EXPECT_TRUE(std::isfinite(q[0]) && std::isfinite(q[1]));
  EXPECT_NEAR(q[0], 1.0, 1e-7);
  EXPECT_NEAR(q[1], 0.0, 1e-7);
}

TEST(Softmax, MatchesLongDoubleOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed, "sm");
    auto x = random_tensor<double>({5}, rng, 3.0);
    auto p = ops::softmax(Var<double>(x)).value();
    long double z = 0;
    for (double v : x.values()) z += std::exp(static_cast<long double>(v));
    for (std::size_t i = 0; i < 5; ++i)
      EXPECT_NEAR(p[i], static_cast<double>(std::exp(static_cast<long double>(x[i])) / z), 1e-7);
  }
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(7, "sm2");
  auto p = ops::softmax(V(random_tensor({4, 3, 9}, rng, 10.0))).value();
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GT(p[r * 9 + j], -1e-30);
      s += p[r * 9 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLn9) {
  auto l = ops::cross_entropy(V(Tensor<float>({2, 9}, 0.f)), {0, 8});
  EXPECT_NEAR(l.value()[0], std::log(9.0), 1e-6);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  Tensor<float> z({1, 9}, 0.f);
  z[4] = 50;
  EXPECT_NEAR(ops::cross_entropy(V(z), {4}).value()[0], 0.0, 1e-6);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  Rng rng(11, "ce");
  auto z = random_tensor<double>({4, 9}, rng, 2.0);
  const std::vector<int> y = {0, 3, 8, 3};
  double ref = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    double mx = -1e300, s = 0;
    for (std::size_t j = 0; j < 9; ++j) mx = std::max(mx, z.at(b, j));
    for (std::size_t j = 0; j < 9; ++j) s += std::exp(z.at(b, j) - mx);
    ref += mx + std::log(s) - z.at(b, static_cast<std::size_t>(y[b]));
  }
  EXPECT_NEAR(ops::cross_entropy(Var<double>(z), y).value()[0], ref / 4, 1e-6);
}

TEST(CrossEntropy, BadLabelNamesIndex) {
  try {
    ops::cross_entropy(V(Tensor<float>({2, 3})), {0, 3});
    FAIL();
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos) << e.what();
  }
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehotOverB) {
  Var<double> z(Tensor<double>({2, 3}, {1, 2, 3, 0, 0, 0}), true);
  Tape<double> tape;
  {
    TapeScope<double> s(tape);
    tape.backward(ops::cross_entropy(z, {2, 0}));
  }
  const double e = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(z.grad()[0], std::exp(1.0) / e / 2, 1e-12);
  EXPECT_NEAR(z.grad()[2], (std::exp(3.0) / e - 1) / 2, 1e-12);
  EXPECT_NEAR(z.grad()[3], (1.0 / 3 - 1) / 2, 1e-12);
}

TEST(Dropout, EvalIsExactIdentity) {
  Rng rng(0, "d");
  auto x = V(random_tensor({3, 4}, rng));
  auto y = ops::dropout(x, 0.5, rng, false);
  EXPECT_EQ(y.node(), x.node());
}

TEST(Dropout, SeededInvertedMask) {
  Rng data(1, "x");
  auto x = V(random_tensor({1000}, data));
  Rng a(5, "dropout"), b(5, "dropout");
  auto y1 = ops::dropout(x, 0.25, a, true).value();
  auto y2 = ops::dropout(x, 0.25, b, true).value();
  EXPECT_EQ(y1, y2);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    if (y1[i] == 0.f) ++zeros;
    else EXPECT_FLOAT_EQ(y1[i], x.value()[i] / 0.75f);
  }
  EXPECT_NEAR(zeros / 1000.0, 0.25, 0.05);
}

TEST(Relu, ClampsNegatives) {
  auto y = ops::relu(V(Tensor<float>({4}, {-1, 0, 2, -0.5})));
  EXPECT_EQ(y.value(), Tensor<float>({4}, {0, 0, 2, 0}));
}

TEST(MaxPool, FirstMaximumWins) {
  Var<double> x(Tensor<double>({1, 3, 2}, {1, 5, 4, 5, 4, 2}), true);
  Tape<double> tape;
  Var<double> y;
  {
    TapeScope<double> s(tape);
    y = ops::max_pool_over_time(x);
    tape.backward(ops::sum_squares(y));
  }
  EXPECT_EQ(y.value(), Tensor<double>({1, 2}, {4, 5}));
  EXPECT_EQ(x.grad(), Tensor<double>({1, 3, 2}, {0, 10, 8, 0, 0, 0}));
}

TEST(AddTiled, AddsEmbeddingToEveryBatchRow) {
  auto y = ops::add_tiled(V(Tensor<float>({2, 2, 1}, {1, 2, 3, 4})), V(Tensor<float>({2, 1}, {10, 20})));
  EXPECT_EQ(y.value(), Tensor<float>({2, 2, 1}, {11, 22, 13, 24}));
}

TEST(Attention, MatchesNaivePerHeadComputation) {
  Rng rng(8, "att");
  const std::size_t B = 2, T = 4, d = 6, H = 3, dh = 2;
  auto q = random_tensor({B, T, d}, rng), k = random_tensor({B, T, d}, rng), v = random_tensor({B, T, d}, rng);
  Tensor<float> probs;
  auto ctx = ops::attention(V(q), V(k), V(v), H, &probs).value();
  ASSERT_EQ(probs.shape(), (Shape{B, H, T, T}));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(T);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j < T; ++j) {
          for (std::size_t c = 0; c < dh; ++c) s[j] += static_cast<double>(q.at(b, i, h * dh + c)) * k.at(b, j, h * dh + c);
          s[j] /= std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        for (auto& e : s) z += (e = std::exp(e - mx));
        double row = 0;
        for (std::size_t j = 0; j < T; ++j) {
          EXPECT_NEAR(probs[((b * H + h) * T + i) * T + j], s[j] / z, 1e-6);
          row += probs[((b * H + h) * T + i) * T + j];
        }
        EXPECT_NEAR(row, 1.0, 1e-6);
        for (std::size_t c = 0; c < dh; ++c) {
          double ref = 0;
          for (std::size_t j = 0; j < T; ++j) ref += s[j] / z * v.at(b, j, h * dh + c);
          EXPECT_NEAR(ctx.at(b, i, h * dh + c), ref, 1e-6);
        }
      }
}

TEST(Overwrite, ReplacesMaskedEntriesOnly) {
  auto y = ops::overwrite(V(Tensor<float>({3}, {1, 2, 3})), {0, 1, 0}, Tensor<float>({3}, {9, 8, 7}));
  EXPECT_EQ(y.value(), Tensor<float>({3}, {1, 8, 3}));
}

TEST(Tape, NoRecordingWithoutActiveTape) {
  Var<double> x(Tensor<double>({2}, {1, 2}), true);
  auto y = ops::sum_squares(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, BackwardRequiresScalar) {
  Tape<double> tape;
  EXPECT_THROW(tape.backward(Var<double>(Tensor<double>({2}))), DimensionError);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  Var<double> x(Tensor<double>({1}, {3}), true);
  Tape<double> tape;
  {
    TapeScope<double> s(tape);
    tape.backward(ops::add(ops::sum_squares(x), ops::scale(x, 4.0)));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3 + 4);
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped({4}), DimensionError);
}

}  // namespace
