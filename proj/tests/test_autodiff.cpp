#include <gtest/gtest.h>

#include <cmath>

#include "omtl/autodiff.hpp"
#include "test_util.hpp"

using namespace omtl;
using omtl::testing::max_gradient_error;
using omtl::testing::random_tensor;

namespace {

DenseTensor values(std::size_t r, std::size_t c, std::vector<double> v) { return DenseTensor(r, c, std::move(v)); }

}  // namespace

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
    Tape t;
    Var s = ops::softmax(t.constant(values(1, 3, {0, 0, 0})));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(s.value()[i], 1.0 / 3.0);
}

TEST(Primitives, SoftmaxRowsSumToOneEvenForLargeLogits) {
    Tape t;
    Var s = ops::softmax(t.constant(values(2, 3, {1000, 999, -1000, -5, 0, 5})));
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_GE(s.value()(r, c), 0.0);
            sum += s.value()(r, c);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Primitives, LeakyReluSlope) {
    Tape t;
    Var y = ops::leaky_relu(t.constant(values(1, 2, {-1.0, 2.0})), 0.01);
    EXPECT_DOUBLE_EQ(y.value()[0], -0.01);
    EXPECT_DOUBLE_EQ(y.value()[1], 2.0);
}

TEST(Primitives, SoftplusAtZeroIsLogTwo) {
    Tape t;
    Var y = ops::softplus(t.constant(values(1, 3, {0.0, 800.0, -800.0})));
    EXPECT_DOUBLE_EQ(y.value()[0], 0.6931471805599453);
    EXPECT_DOUBLE_EQ(y.value()[1], 800.0);
    EXPECT_GE(y.value()[2], 0.0);
}

TEST(Primitives, ReluAndSigmoid) {
    Tape t;
    Var x = t.constant(values(1, 3, {-2.0, 0.0, 3.0}));
    Var r = ops::relu(x);
    EXPECT_EQ(r.value()[0], 0.0);
    EXPECT_EQ(r.value()[2], 3.0);
    Var s = ops::sigmoid(x);
    EXPECT_DOUBLE_EQ(s.value()[1], 0.5);
    EXPECT_NEAR(s.value()[2], 1.0 / (1.0 + std::exp(-3.0)), 1e-15);
}

TEST(Primitives, MatmulValues) {
    Tape t;
    Var c = ops::matmul(t.constant(values(2, 2, {1, 2, 3, 4})), t.constant(values(2, 1, {5, 6})));
    EXPECT_EQ(c.value()[0], 17.0);
    EXPECT_EQ(c.value()[1], 39.0);
}

TEST(Primitives, ShapeMismatchIsReported) {
    Tape t;
    Var a = t.constant(DenseTensor(2, 3));
    Var b = t.constant(DenseTensor(2, 3));
    EXPECT_THROW(ops::matmul(a, b), ShapeError);
    EXPECT_THROW(ops::add(a, t.constant(DenseTensor(3, 2))), ShapeError);
    EXPECT_THROW(ops::add_bias(a, t.constant(DenseTensor(1, 2))), ShapeError);
    EXPECT_THROW(ops::squared_error(a, DenseTensor(1, 3)), ShapeError);
}

TEST(Primitives, ConcatAndGather) {
    Tape t;
    Var a = t.constant(values(2, 1, {1, 2}));
    Var b = t.constant(values(2, 2, {3, 4, 5, 6}));
    const Var parts[] = {a, b};
    Var c = ops::concat_cols(parts);
    EXPECT_EQ(c.value(), values(2, 3, {1, 3, 4, 2, 5, 6}));
    Var g = ops::gather_rows(c, {1, 1, 0});
    EXPECT_EQ(g.value(), values(3, 3, {2, 5, 6, 2, 5, 6, 1, 3, 4}));
}

TEST(Primitives, NonFiniteValuesAreRejected) {
    Tape t;
    Var x = t.constant(values(1, 1, {1e308}));
    EXPECT_THROW(ops::scale(x, 10.0), NumericalError);
}

TEST(Backward, LinearMapGradientIsOuterProduct) {
    // loss = sum(x W) for a fixed 1x3 row x gives dW(i, j) = x(i).
    Tape t;
    Var x = t.constant(values(1, 3, {1.5, -2.0, 0.5}));
    Var w = t.parameter("W", values(3, 2, {1, 2, 3, 4, 5, 6}));
    Gradients g = t.backward(ops::sum_all(ops::matmul(x, w)));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(g.at("W")(i, j), x.value()[i]);
}

TEST(Backward, UnusedParameterGetsExactZeros) {
    Tape t;
    Var used = t.parameter("used", values(1, 2, {1, 2}));
    t.parameter("unused", values(2, 2, {1, 2, 3, 4}));
    Gradients g = t.backward(ops::sum_all(used));
    EXPECT_EQ(g.at("unused"), DenseTensor(2, 2));
    EXPECT_EQ(g.at("used"), values(1, 2, {1, 1}));
}

TEST(Backward, ParameterRecordedAfterLossGetsZeros) {
    Tape t;
    Var a = t.parameter("a", values(1, 1, {2}));
    Var loss = ops::scale(a, 3.0);
    Var b = t.parameter("b", values(1, 1, {5}));
    ops::scale(b, 2.0);
    Gradients g = t.backward(loss);
    EXPECT_EQ(g.at("a")[0], 3.0);
    EXPECT_EQ(g.at("b")[0], 0.0);
}

TEST(Backward, SharedLeafAccumulates) {
    Tape t;
    Var a = t.parameter("a", values(1, 1, {2}));
    Var again = t.parameter("a", values(1, 1, {99}));
    EXPECT_EQ(a.id, again.id);
    Gradients g = t.backward(ops::sum_all(ops::add(ops::scale(a, 3.0), ops::scale(again, 4.0))));
    EXPECT_EQ(g.at("a")[0], 7.0);
}

TEST(Backward, LossMustBeScalar) {
    Tape t;
    Var a = t.parameter("a", values(1, 2, {1, 2}));
    EXPECT_THROW(t.backward(a), ShapeError);
}

TEST(Backward, TapeIsConsumedOnce) {
    Tape t;
    Var a = t.parameter("a", values(1, 1, {1}));
    Var loss = ops::sum_all(a);
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), ValidationError);
}

TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
    Rng rng(11);
    ParameterMap p{{"x", random_tensor(rng, 3, 4)},
                   {"W", random_tensor(rng, 4, 3)},
                   {"b", random_tensor(rng, 1, 3)},
                   {"V", random_tensor(rng, 3, 3)},
                   {"s", random_tensor(rng, 3, 1)}};
    const DenseTensor target = random_tensor(rng, 3, 3);
    auto build = [&](Tape& tape, const std::map<std::string, Var>& v) {
        Var h = ops::affine(v.at("x"), v.at("W"), v.at("b"));
        Var a = ops::leaky_relu(h, 0.01);
        Var sm = ops::softmax(ops::matmul(a, v.at("V")));
        Var sp = ops::softplus(ops::add(h, sm));
        Var rows = ops::scale_rows(sp, ops::sigmoid(v.at("s")));
        const Var parts[] = {rows, ops::column(sm, 1)};
        Var cat = ops::concat_cols(parts);
        Var g = ops::gather_rows(cat, {2, 0, 2});
        Var rec = ops::relu(ops::add(ops::gather_rows(rows, {0, 1, 2}), tape.constant(target)));
        Var logits = ops::column(g, 3);
        const Var terms[] = {ops::mean_all(g), ops::squared_error(rec, target),
                             ops::bce_with_logits(logits, {1, 0, 1}, {0.5, 1.0, 2.0})};
        return ops::sum(terms);
    };
    EXPECT_LT(max_gradient_error(p, build), 1e-6);
}

TEST(Dropout, EvalModeIsIdentity) {
    Tape t;
    Rng rng(1);
    Var x = t.constant(values(1, 3, {1, 2, 3}));
    Var y = ops::dropout(x, 0.5, rng, false);
    EXPECT_EQ(y.value(), x.value());
}

TEST(Dropout, TrainModeKeepsExpectation) {
    Tape t;
    Rng rng(2024);
    const std::size_t n = 200000;
    Var x = t.constant(DenseTensor(1, n, 1.0));
    Var y = ops::dropout(x, 0.5, rng, true);
    double mean = 0.0;
    std::size_t zeros = 0;
    for (double v : y.value().data()) {
        mean += v;
        zeros += v == 0.0;
        ASSERT_TRUE(v == 0.0 || v == 2.0);
    }
    mean /= static_cast<double>(n);
    EXPECT_NEAR(mean, 1.0, 0.01);
    EXPECT_NEAR(static_cast<double>(zeros) / n, 0.5, 0.01);
}

TEST(Dropout, SameSeedSameMask) {
    Tape t;
    Rng a(9), b(9);
    Var x = t.constant(DenseTensor(4, 4, 1.0));
    const DenseTensor first = ops::dropout(x, 0.3, a, true).value();
    const DenseTensor second = ops::dropout(x, 0.3, b, true).value();
    EXPECT_EQ(first, second);
}

TEST(Dropout, GradientFollowsMask) {
    Tape t;
    Rng rng(4);
    Var w = t.parameter("w", DenseTensor(1, 8, 1.0));
    Var y = ops::dropout(w, 0.5, rng, true);
    Gradients g = t.backward(ops::sum_all(y));
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(g.at("w")[i], y.value()[i]);
}
