#include <gtest/gtest.h>

#include "support.hpp"

using namespace tsmi;
using tsmi::test::grad_check;
using tsmi::test::random_tensor;

namespace {

using D = Var<double>;
constexpr double kTol = 1e-3;

D param(Shape s, Rng& rng, double scale = 1.0) { return D(random_tensor<double>(std::move(s), rng, scale), true); }
D fixed(Shape s, Rng& rng) { return D(random_tensor<double>(std::move(s), rng)); }

/// Scalar probe sum((y - r)^2) with a fixed random r, so every output
/// element gets a distinct upstream gradient.
D probe(const D& y, const D& r) { return ops::sum_squares(ops::sub(y, r)); }

class GradCheck : public ::testing::TestWithParam<std::uint64_t> {
 protected:
  Rng rng{GetParam(), "gradcheck"};
  void expect_ok(const test::GradCheckResult& r) {
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, kTol) << r.worst;
  }
};

TEST_P(GradCheck, Matmul) {
  D a = param({3, 4}, rng), b = param({4, 2}, rng), r = fixed({3, 2}, rng);
  expect_ok(grad_check({{"a", a}, {"b", b}}, [&] { return probe(ops::matmul(a, b), r); }));
}

TEST_P(GradCheck, Linear) {
  D x = param({2, 3, 4}, rng), w = param({4, 5}, rng), b = param({5}, rng), r = fixed({2, 3, 5}, rng);
  expect_ok(grad_check({{"x", x}, {"w", w}, {"b", b}}, [&] { return probe(ops::linear(x, w, b), r); }));
}

TEST_P(GradCheck, AddSubScale) {
  D a = param({6}, rng), b = param({6}, rng), r = fixed({6}, rng);
  expect_ok(grad_check({{"a", a}, {"b", b}},
                       [&] { return probe(ops::scale(ops::add(a, ops::sub(a, b)), 0.7), r); }));
}

TEST_P(GradCheck, AddTiled) {
  D x = param({2, 6, 8}, rng), p = param({6, 8}, rng), r = fixed({2, 6, 8}, rng);
  expect_ok(grad_check({{"x", x}, {"p", p}}, [&] { return probe(ops::add_tiled(x, p), r); }));
}

TEST_P(GradCheck, Relu) {
  // keep inputs away from the kink so central differences stay on one side
  Tensor<double> v = random_tensor<double>({20}, rng);
  for (auto& e : v.storage()) e = e >= 0 ? e + 0.1 : e - 0.1;
  D x(v, true), r = fixed({20}, rng);
  expect_ok(grad_check({{"x", x}}, [&] { return probe(ops::relu(x), r); }));
}

TEST_P(GradCheck, Dropout) {
  D x = param({4, 6}, rng), r = fixed({4, 6}, rng);
  expect_ok(grad_check({{"x", x}}, [&] {
    Rng d(GetParam(), "dropout");
    return probe(ops::dropout(x, 0.3, d, true), r);
  }));
}

TEST_P(GradCheck, Conv1d) {
  D x = param({2, 3, 6}, rng), w = param({2, 3, 5}, rng), b = param({2}, rng), r = fixed({2, 2, 6}, rng);
  expect_ok(grad_check({{"x", x}, {"w", w}, {"b", b}}, [&] { return probe(ops::conv1d(x, w, b, 2), r); }));
}

TEST_P(GradCheck, BatchNormTrain) {
  D x = param({3, 2, 6}, rng), g = param({2}, rng), b = param({2}, rng), r = fixed({3, 2, 6}, rng);
  ops::BatchNormStats<double> st(2);
  expect_ok(grad_check({{"x", x}, {"gamma", g}, {"beta", b}},
                       [&] { return probe(ops::batchnorm1d(x, g, b, st, true), r); }));
}

TEST_P(GradCheck, BatchNormEval) {
  D x = param({3, 2, 6}, rng), g = param({2}, rng), b = param({2}, rng), r = fixed({3, 2, 6}, rng);
  ops::BatchNormStats<double> st(2);
  st.running_mean = random_tensor<double>({2}, rng);
  st.running_var = Tensor<double>({2}, {0.5, 2.0});
  expect_ok(grad_check({{"x", x}, {"gamma", g}, {"beta", b}},
                       [&] { return probe(ops::batchnorm1d(x, g, b, st, false), r); }));
}

TEST_P(GradCheck, TransposeLast2) {
  D x = param({2, 3, 4}, rng), r = fixed({2, 4, 3}, rng);
  expect_ok(grad_check({{"x", x}}, [&] { return probe(ops::transpose_last2(x), r); }));
}

TEST_P(GradCheck, LayerNorm) {
  D x = param({2, 6, 8}, rng), g = param({8}, rng), b = param({8}, rng), r = fixed({2, 6, 8}, rng);
  expect_ok(grad_check({{"x", x}, {"gamma", g}, {"beta", b}},
                       [&] { return probe(ops::layer_norm(x, g, b), r); }));
}

TEST_P(GradCheck, Softmax) {
  D x = param({3, 5}, rng, 2.0), r = fixed({3, 5}, rng);
  expect_ok(grad_check({{"x", x}}, [&] { return probe(ops::softmax(x), r); }));
}

TEST_P(GradCheck, Attention) {
  D q = param({2, 6, 8}, rng), k = param({2, 6, 8}, rng), v = param({2, 6, 8}, rng), r = fixed({2, 6, 8}, rng);
  expect_ok(grad_check({{"q", q}, {"k", k}, {"v", v}}, [&] { return probe(ops::attention(q, k, v, 2), r); }));
}

TEST_P(GradCheck, Overwrite) {
  D x = param({12}, rng), r = fixed({12}, rng);
  std::vector<std::uint8_t> mask(12, 0);
  for (std::size_t i = 0; i < 12; i += 3) mask[i] = 1;
  const Tensor<double> donor = random_tensor<double>({12}, rng);
  expect_ok(grad_check({{"x", x}}, [&] { return probe(ops::overwrite(x, mask, donor), r); }));
}

TEST_P(GradCheck, MaxPoolOverTime) {
  D x = param({2, 6, 4}, rng), r = fixed({2, 4}, rng);
  expect_ok(grad_check({{"x", x}}, [&] { return probe(ops::max_pool_over_time(x), r); }));
}

TEST_P(GradCheck, CrossEntropy) {
  D z = param({4, 3}, rng, 2.0);
  expect_ok(grad_check({{"logits", z}}, [&] { return ops::cross_entropy(z, {0, 2, 1, 2}); }));
}

TEST_P(GradCheck, AbsSum) {
  Tensor<double> v = random_tensor<double>({10}, rng);
  for (auto& e : v.storage()) e = e >= 0 ? e + 0.1 : e - 0.1;
  D x(v, true);
  expect_ok(grad_check({{"x", x}}, [&] { return ops::abs_sum(x); }));
}

TEST_P(GradCheck, FullModelLoss) {
  TstModel<double> model(test::tiny_config(), GetParam());
  const auto& c = model.config();
  const Tensor<double> x = random_tensor<double>({3, c.channels, c.seq_len}, rng);
  const std::vector<int> y = {0, 2, 1};
  std::vector<std::pair<std::string, D>> params;
  for (auto& p : model.parameters()) params.emplace_back(p.name, p.var);
  auto res = grad_check(params, [&] {
    Rng d(GetParam(), "dropout");
    return ops::cross_entropy(model.forward_logits(x, Mode::Train, &d), y);
  });
  expect_ok(res);
  EXPECT_EQ(res.checked, model.parameter_count());
}

TEST_P(GradCheck, FullModelLossEvalMode) {
  TstModel<double> model(test::tiny_config(), GetParam() + 100);
  const auto& c = model.config();
  const Tensor<double> x = random_tensor<double>({2, c.channels, c.seq_len}, rng);
  std::vector<std::pair<std::string, D>> params;
  for (auto& p : model.parameters()) params.emplace_back(p.name, p.var);
  expect_ok(grad_check(params, [&] { return ops::cross_entropy(model.forward_logits(x, Mode::Eval), {1, 0}); }));
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Values(0, 1, 2, 3, 4));

}  // namespace
