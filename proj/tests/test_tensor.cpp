#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "qcnn/tensor.hpp"

using qcnn::ConvLayerShape;
using qcnn::Tensor;

TEST(Conv2d, IdentityCenterKernelReproducesInput) {
    Tensor in({1, 3, 3}, 1.0);
    Tensor w({1, 1, 3, 3});
    w[4] = 1.0;
    const std::vector<double> b{0.0};
    EXPECT_EQ(qcnn::conv2d(in, w, b, {1, 1, 1, 1}), in);
}

TEST(Conv2d, ZeroWeightsGiveBias) {
    std::mt19937_64 rng(1);
    const Tensor in = oracle::random_tensor({2, 4, 5}, rng);
    const Tensor w({3, 2, 3, 3});
    const std::vector<double> b{0.5, -1.0, 2.0};
    const Tensor out = qcnn::conv2d(in, w, b, {3, 2, 1, 1});
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(out.at(o, y, x), b[o]);
}

TEST(Conv2d, MatchesLoopOracleOnFixedCase) {
    std::mt19937_64 rng(2);
    const Tensor in = oracle::random_tensor({2, 5, 5}, rng);
    const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
    const std::vector<double> b{0.1, 0.2, 0.3};
    const Tensor got = qcnn::conv2d(in, w, b, {3, 2, 1, 1});
    const Tensor want = oracle::conv(in, w, b, 1, 1);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Conv2d, MatchesLoopOracleOnRandomShapes) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> dim(1, 7), ch(1, 4), st(1, 2), pd(0, 2);
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t c = ch(rng), o = ch(rng), stride = st(rng), pad = pd(rng);
        const std::size_t h = dim(rng) + 2, w_ = dim(rng) + 2;
        const Tensor in = oracle::random_tensor({c, h, w_}, rng);
        const Tensor w = oracle::random_tensor({o, c, 3, 3}, rng);
        const Tensor bt = oracle::random_tensor({o}, rng);
        const std::vector<double> b(bt.data().begin(), bt.data().end());
        const Tensor got = qcnn::conv2d(in, w, b, {o, c, stride, pad});
        const Tensor want = oracle::conv(in, w, b, static_cast<int>(stride), static_cast<int>(pad));
        ASSERT_EQ(got.shape(), want.shape()) << "trial " << trial;
        for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-6) << "trial " << trial;
    }
}

TEST(Conv2d, RejectsShapeMismatch) {
    const Tensor in({2, 4, 4});
    const Tensor w({1, 3, 3, 3});
    const std::vector<double> b{0.0};
    EXPECT_THROW(qcnn::conv2d(in, w, b, {1, 3, 1, 1}), qcnn::ShapeError);
    EXPECT_THROW(qcnn::conv2d(in, Tensor({1, 2, 3, 3}), std::vector<double>{0.0, 0.0}, {1, 2, 1, 1}), qcnn::ShapeError);
}

TEST(Relu, Examples) {
    Tensor t({3}, std::vector<double>{-1.0, 0.0, 2.0});
    EXPECT_EQ(qcnn::relu(t).values(), (std::vector<double>{0.0, 0.0, 2.0}));
    Tensor neg({2, 2, 2}, -3.0);
    EXPECT_EQ(qcnn::relu(neg), Tensor({2, 2, 2}, 0.0));
}

TEST(Relu, Idempotent) {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 20; ++i) {
        const Tensor x = oracle::random_tensor({3, 4, 4}, rng);
        EXPECT_EQ(qcnn::relu(qcnn::relu(x)), qcnn::relu(x));
    }
}

TEST(MaxPool, Examples) {
    Tensor t({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    EXPECT_EQ(qcnn::maxpool2x2(t).values(), std::vector<double>{4});
    EXPECT_EQ(qcnn::maxpool2x2(Tensor({2, 6, 4}, 1.5)), Tensor({2, 3, 2}, 1.5));
}

TEST(MaxPool, MatchesLoopOracle) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 120; ++trial) {
        std::uniform_int_distribution<int> half(1, 5), ch(1, 4);
        const Tensor in = oracle::random_tensor({static_cast<std::size_t>(ch(rng)), 2u * half(rng), 2u * half(rng)}, rng);
        EXPECT_EQ(qcnn::maxpool2x2(in), oracle::pool(in));
    }
    const Tensor in = oracle::random_tensor({3, 8, 8}, rng);
    EXPECT_EQ(qcnn::maxpool2x2(in), oracle::pool(in));
}

TEST(MaxPool, OddDimsRejected) { EXPECT_THROW(qcnn::maxpool2x2(Tensor({1, 3, 4})), qcnn::ShapeError); }

TEST(FullyConnected, Examples) {
    const std::vector<double> x{1.0, -2.0, 3.0};
    Tensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    EXPECT_EQ(qcnn::fully_connected(x, eye, std::vector<double>(3, 0.0)), x);
    const std::vector<double> b{0.5, 0.25};
    EXPECT_EQ(qcnn::fully_connected(x, Tensor({2, 3}), b), b);
}

TEST(FullyConnected, MatchesLoopOracle) {
    std::mt19937_64 rng(6);
    const Tensor w = oracle::random_tensor({3, 4}, rng);
    const Tensor xt = oracle::random_tensor({4}, rng), bt = oracle::random_tensor({3}, rng);
    const std::vector<double> x(xt.data().begin(), xt.data().end()), b(bt.data().begin(), bt.data().end());
    const auto got = qcnn::fully_connected(x, w, b);
    const auto want = oracle::fc(x, w, b);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], want[i], 1e-9);

    for (int trial = 0; trial < 100; ++trial) {
        std::uniform_int_distribution<int> n(1, 12);
        const std::size_t in = n(rng), out = n(rng);
        const Tensor wr = oracle::random_tensor({out, in}, rng);
        const Tensor xr = oracle::random_tensor({in}, rng), br = oracle::random_tensor({out}, rng);
        const std::vector<double> xv(xr.data().begin(), xr.data().end()), bv(br.data().begin(), br.data().end());
        const auto g = qcnn::fully_connected(xv, wr, bv);
        const auto e = oracle::fc(xv, wr, bv);
        for (std::size_t i = 0; i < out; ++i) ASSERT_NEAR(g[i], e[i], 1e-9);
    }
    EXPECT_THROW(qcnn::fully_connected(x, Tensor({2, 4}), b), qcnn::ShapeError);
}

TEST(Rotate90, TwoByTwoCounterClockwise) {
    Tensor t({1, 2, 2}, std::vector<double>{1, 2, 3, 4});  // [a,b;c,d]
    EXPECT_EQ(qcnn::rotate90(t, 1).values(), (std::vector<double>{2, 4, 1, 3}));  // [b,d;a,c]
}

TEST(Rotate90, GroupLaw) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = oracle::random_tensor({2, 3, 5}, rng);
        EXPECT_EQ(qcnn::rotate90(qcnn::rotate90(qcnn::rotate90(qcnn::rotate90(x, 1), 1), 1), 1), x);
        EXPECT_EQ(qcnn::rotate90(x, 0), x);
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) EXPECT_EQ(qcnn::rotate90(qcnn::rotate90(x, b), a), qcnn::rotate90(x, (a + b) % 4));
        EXPECT_EQ(qcnn::rotate90(x, -1), qcnn::rotate90(x, 3));
    }
}

TEST(Crop, FullRectIsIdentity) {
    std::mt19937_64 rng(8);
    const Tensor x = oracle::random_tensor({3, 5, 7}, rng);
    EXPECT_EQ(qcnn::crop(x, {0, 0, 1, 1}), x);
}

TEST(Crop, TopLeftQuarter) {
    Tensor x({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
    EXPECT_EQ(qcnn::crop(x, {0, 0, 0.5, 0.5}).values(), (std::vector<double>{0, 1, 4, 5}));
}

TEST(Crop, HalvesReassemble) {
    std::mt19937_64 rng(9);
    for (std::size_t w : {4u, 5u, 7u}) {
        const Tensor x = oracle::random_tensor({2, 3, w}, rng);
        const Tensor left = qcnn::crop(x, {0, 0, 0.5, 1}), right = qcnn::crop(x, {0.5, 0, 1, 1});
        ASSERT_EQ(left.width() + right.width(), w);
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t y = 0; y < 3; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const double v = xx < left.width() ? left.at(c, y, xx) : right.at(c, y, xx - left.width());
                    EXPECT_EQ(v, x.at(c, y, xx));
                }
    }
}

TEST(Crop, DegenerateRectRejected) {
    EXPECT_THROW(qcnn::crop(Tensor({1, 4, 4}), {0.3, 0.3, 0.35, 0.9}), qcnn::DegenerateError);
    EXPECT_THROW(qcnn::crop(Tensor({1, 4, 4}), {0.0, 0.0, 1.5, 1.0}), qcnn::DomainError);
}

TEST(ResizeBilinear, SameSizeIsIdentity) {
    std::mt19937_64 rng(10);
    const Tensor x = oracle::random_tensor({3, 6, 5}, rng);
    const Tensor y = qcnn::resize_bilinear(x, 6, 5);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(ResizeBilinear, ConstantStaysConstant) {
    const Tensor y = qcnn::resize_bilinear(Tensor({2, 3, 5}, 0.7), 11, 4);
    for (double v : y.data()) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(ResizeBilinear, HalfPixelHandValues) {
    // Source columns sit at x = 0 and 1; targets at (i + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25,
    // clamped to [0, 1].
    Tensor x({1, 2, 2}, std::vector<double>{0, 1, 0, 1});
    const Tensor y = qcnn::resize_bilinear(x, 2, 4);
    const std::vector<double> row{0.0, 0.25, 0.75, 1.0};
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y.at(0, r, c), row[c]);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
    const std::vector<double> logits(7, 0.3);
    const auto r = qcnn::softmax_cross_entropy(logits, 2);
    for (double p : r.probs) EXPECT_NEAR(p, 1.0 / 7.0, 1e-12);
    EXPECT_NEAR(r.loss, std::log(7.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, ExtremeLogitsAreStable) {
    const std::vector<double> logits{-1000, 1000, -1000};
    const auto r = qcnn::softmax_cross_entropy(logits, 1);
    EXPECT_NEAR(r.loss, 0.0, 1e-12);
    EXPECT_TRUE(std::isfinite(r.loss));
    const auto wrong = qcnn::softmax_cross_entropy(logits, 0);
    EXPECT_TRUE(std::isfinite(wrong.loss));
    EXPECT_NEAR(wrong.loss, 2000.0, 1e-9);
}

TEST(SoftmaxCrossEntropy, ProbabilitiesSumToOne) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor l = oracle::random_tensor({10}, rng, -20, 20);
        const auto r = qcnn::softmax_cross_entropy(l.values(), 3);
        double s = 0.0;
        for (double p : r.probs) s += p;
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    EXPECT_THROW(qcnn::softmax_cross_entropy(std::vector<double>{1, 2}, 2), qcnn::DomainError);
}

TEST(TensorCore, OperationsArePure) {
    std::mt19937_64 rng(12);
    const Tensor in = oracle::random_tensor({2, 6, 6}, rng);
    const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
    const std::vector<double> b{0.1, 0.2, 0.3};
    const ConvLayerShape s{3, 2, 1, 1};
    EXPECT_EQ(qcnn::conv2d(in, w, b, s), qcnn::conv2d(in, w, b, s));
    EXPECT_EQ(qcnn::resize_bilinear(in, 9, 4), qcnn::resize_bilinear(in, 9, 4));
    EXPECT_TRUE(qcnn::conv2d(in, w, b, s).all_finite());
}
