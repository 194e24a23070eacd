#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "patchsr/rng.hpp"

using namespace patchsr;
namespace ag = patchsr::ag;

namespace {

Tensor randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (double& v : t.data) v = sd * rng.normal();
  return t;
}

// Weighted sum with fixed random weights so every output element matters.
ag::Var probe(ag::Tape& t, ag::Var y, std::uint64_t seed = 99) {
  return ag::sum(ag::mul(y, t.constant(randn(y.shape(), seed))));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(AutogradGrad, Elementwise) {
  auto f = [](ag::Tape& t, const std::vector<ag::Var>& v) {
    ag::Var a = ag::add(ag::mul(v[0], v[1]), ag::sub(v[0], ag::scale(v[1], 0.3)));
    ag::Var b = ag::add(ag::gelu(a), ag::silu(ag::add_scalar(a, 0.1)));
    return probe(t, ag::add(ag::tanh(b), ag::softplus(b)));
  };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn({3, 4}, 1), randn({3, 4}, 2)}), kTol);
}

TEST(AutogradGrad, ReductionsAndMse) {
  auto f = [](ag::Tape&, const std::vector<ag::Var>& v) {
    return ag::add(ag::mse(v[0], v[1]), ag::scale(ag::mean(v[0]), 0.7));
  };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn({5}, 3), randn({5}, 4)}), kTol);
}

TEST(AutogradGrad, MatmulLinearRowvec) {
  auto f = [](ag::Tape& t, const std::vector<ag::Var>& v) {
    ag::Var y = ag::linear(ag::matmul(v[0], v[1]), v[2], v[3]);
    y = ag::mul_rowvec(ag::add_rowvec(y, v[4]), v[4]);
    return probe(t, y);
  };
  EXPECT_LT(fdcheck::worst_relative_error(
                f, {randn({3, 4}, 5), randn({4, 6}, 6), randn({2, 6}, 7), randn({2}, 8), randn({1, 2}, 9)}),
            kTol);
}

TEST(AutogradGrad, LayerNorm) {
  auto f = [](ag::Tape& t, const std::vector<ag::Var>& v) { return probe(t, ag::layer_norm(v[0])); };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn({4, 8}, 10)}), kTol);
}

TEST(AutogradGrad, SlicingConcatGatherReshape) {
  auto f = [](ag::Tape& t, const std::vector<ag::Var>& v) {
    ag::Var c = ag::concat_rows(v[0], v[1]);
    ag::Var s = ag::slice_cols(ag::slice_rows(c, 1, 3), 1, 2);
    auto idx = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 3, 3, 1, 2});
    ag::Var g = ag::gather(s, idx, {2, 3});
    return ag::add(probe(t, g), probe(t, ag::reshape(c, {20}), 5));
  };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn({2, 4}, 11), randn({3, 4}, 12)}), kTol);
}

TEST(AutogradGrad, MultiHeadAttention) {
  auto f = [](ag::Tape& t, const std::vector<ag::Var>& v) { return probe(t, ag::attention(v[0], v[1], v[2], 2)); };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn({3, 4}, 13), randn({5, 4}, 14), randn({5, 4}, 15)}), kTol);
}

TEST(AutogradGrad, ConvAndPool) {
  auto f = [](ag::Tape& t, const std::vector<ag::Var>& v) {
    return probe(t, ag::avg_pool2(ag::conv2d(v[0], v[1], v[2], 2, 1)));
  };
  EXPECT_LT(fdcheck::worst_relative_error(f, {randn({2, 9, 8}, 16), randn({3, 2, 3, 3}, 17), randn({3}, 18)}), kTol);
}

TEST(Attention, ProbabilitiesSumToOne) {
  ag::Tape t(false);
  Tensor probs;
  ag::attention(t.constant(randn({3, 4}, 1)), t.constant(randn({6, 4}, 2)), t.constant(randn({6, 4}, 3)), 2, &probs);
  ASSERT_EQ(probs.size(), 2u * 3u * 6u);
  for (std::size_t r = 0; r < probs.size() / 6; ++r) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += probs[r * 6 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tape, NonRecordingTapeSkipsGradients) {
  ag::Tape t(false);
  ag::Var x = t.leaf(randn({2}, 1), true);
  EXPECT_FALSE(t.requires_grad(ag::sum(x)));
}

TEST(Tape, BackwardRequiresScalarRoot) {
  ag::Tape t;
  ag::Var x = t.leaf(randn({2}, 1), true);
  EXPECT_THROW(t.backward(ag::scale(x, 2.0)), DimensionError);
}

TEST(Tape, GradientOfUnreachedLeafIsZero) {
  ag::Tape t;
  ag::Var x = t.leaf(randn({3}, 1), true);
  ag::Var y = t.leaf(randn({3}, 2), true);
  t.backward(ag::sum(x));
  for (double g : t.grad(y).data) EXPECT_EQ(g, 0.0);
}

TEST(Ops, ShapeMismatchIsRejected) {
  ag::Tape t;
  EXPECT_THROW(ag::add(t.constant(Tensor({2, 3})), t.constant(Tensor({3, 2}))), DimensionError);
  EXPECT_THROW(ag::matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}
