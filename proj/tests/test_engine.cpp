#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "qcnn/engine.hpp"
#include "qcnn/trainer.hpp"

using namespace qcnn;

namespace {

NetworkDefinition toy() { return load_network(QCNN_FIXTURE_DIR "/toy3.cfg"); }

const NetworkDefinition& small_net() {
    static const NetworkDefinition n = parse_network("input 2 8 8\nconv 4\npool\nconv 3 stride=2\nflatten\nfc 5\n");
    return n;
}

Tensor abs_tensor(Tensor t) {
    for (double& v : t.data()) v = std::abs(v);
    return t;
}

}  // namespace

TEST(Engine, IdentityKernelIsRelu) {
    const NetworkDefinition net = parse_network("input 1 5 6\nconv 1\n");
    FloatWeights w;
    w.conv.push_back({Tensor({1, 1, 3, 3}), {0.0}});
    w.conv[0].weights[4] = 1.0;
    std::mt19937_64 rng(1);
    for (int i = 0; i < 10; ++i) {
        const Tensor img = oracle::random_tensor({1, 5, 6}, rng);
        EXPECT_EQ(forward(net, w, img, InferenceMode::Float).features, relu(img));
    }
}

TEST(Engine, DequantizedModeEqualsFloatOnDequantizedWeights) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const NetworkDefinition& net = small_net();
        const FloatWeights w = init_weights(net, static_cast<std::uint64_t>(trial));
        const QuantizedWeights q = quantize_weights(net, w, BitAllocationProfile{{1 + trial % 5, 3}},
                                                    trial % 2 ? QuantPolicy::LiteralMean : QuantPolicy::XnorAbsMean);
        const Engine deq(net, q, InferenceMode::Dequantized);
        const Engine flt(net, dequantized_weights(q), InferenceMode::Float);
        for (int i = 0; i < 3; ++i) {
            const Tensor img = oracle::random_tensor({2, 8, 8}, rng, 0.0, 1.0);
            const ForwardResult a = deq.run(img), b = flt.run(img);
            EXPECT_EQ(a.features, b.features);
            EXPECT_EQ(*a.logits, *b.logits);
        }
    }
}

// Rigorous elementwise bound on |f(W) - f(W')| propagated layer by layer:
// |conv(x, W) - conv(x', W')| <= |W'| * |x - x'| + |W - W'| * |x| + |b - b'|; ReLU and max pooling
// do not increase it.
TEST(Engine, FiveBitGapWithinPerturbationBound) {
    const NetworkDefinition net = parse_network("input 2 8 8\nconv 4\nconv 3\npool\nconv 2\n");
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const FloatWeights w = init_weights(net, 100 + static_cast<std::uint64_t>(trial));
        const QuantizedWeights q = quantize_weights(net, w, BitAllocationProfile{{5, 5, 5}}, QuantPolicy::XnorAbsMean);
        const FloatWeights d = dequantized_weights(q);
        const Tensor img = oracle::random_tensor({2, 8, 8}, rng, 0.0, 1.0);

        Tensor x = img, bound({2, 8, 8});
        for (std::size_t l = 0; l < 3; ++l) {
            Tensor dw = w.conv[l].weights;
            for (std::size_t i = 0; i < dw.size(); ++i) dw[i] = std::abs(dw[i] - d.conv[l].weights[i]);
            std::vector<double> db(w.conv[l].bias.size()), zero(db.size(), 0.0);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] = std::abs(w.conv[l].bias[i] - d.conv[l].bias[i]);
            const Tensor t1 = oracle::conv(bound, abs_tensor(d.conv[l].weights), zero, 1, 1);
            const Tensor t2 = oracle::conv(abs_tensor(x), dw, db, 1, 1);
            Tensor nb = t1;
            for (std::size_t i = 0; i < nb.size(); ++i) nb[i] = t1[i] + t2[i];
            bound = nb;
            x = relu(oracle::conv(x, w.conv[l].weights, w.conv[l].bias, 1, 1));
            if (l == 1) {
                x = oracle::pool(x);
                bound = oracle::pool(bound);
            }
        }
        const Tensor a = Engine(net, w, InferenceMode::Float).features(img);
        const Tensor b = Engine(net, q, InferenceMode::Dequantized).features(img);
        double worst = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_LE(std::abs(a[i] - b[i]), bound[i] + 1e-12);
            worst = std::max(worst, std::abs(a[i] - b[i]));
        }
        EXPECT_GT(worst, 0.0);
    }
}

TEST(Engine, IntegerModeTracksDequantized) {
    const NetworkDefinition net = toy();
    const FloatWeights w = init_weights(net, 4);
    const QuantizedWeights q = quantize_weights(net, w, parse_profile("3,3,3"), QuantPolicy::XnorAbsMean);
    std::mt19937_64 rng(4);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(oracle::random_tensor({3, 32, 32}, rng, 0.0, 1.0));
    const Engine deq(net, q, InferenceMode::Dequantized);
    const Engine calib_probe(net, q, InferenceMode::Integer);
    const ActivationScales scales = calib_probe.calibrate(imgs);
    EXPECT_EQ(scales.exponents.size(), 4u);
    const Engine integer(net, q, InferenceMode::Integer, scales);
    for (const auto& img : imgs) {
        const Tensor a = deq.features(img), b = integer.features(img);
        double peak = 0.0, diff = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            peak = std::max(peak, std::abs(a[i]));
            diff = std::max(diff, std::abs(a[i] - b[i]));
        }
        EXPECT_LT(diff, 0.1 * peak);
        EXPECT_EQ(integer.features(img), integer.features(img));
    }
}

TEST(Engine, ActivationExponent) {
    EXPECT_EQ(activation_exponent(255.0), 0);
    EXPECT_EQ(activation_exponent(255.5), 1);
    EXPECT_EQ(activation_exponent(1.0), -7);
    EXPECT_EQ(activation_exponent(0.0), 0);
    for (double p : {0.003, 0.7, 1.0, 12.5, 900.0}) {
        const int s = activation_exponent(p);
        EXPECT_GE(std::ldexp(255.0, s), p);
        EXPECT_LT(std::ldexp(255.0, s - 1), p);
    }
}

TEST(Engine, Errors) {
    const NetworkDefinition net = toy();
    const FloatWeights w = init_weights(net, 5);
    EXPECT_THROW(Engine(net, w, InferenceMode::Dequantized), DomainError);
    const QuantizedWeights q = quantize_weights(net, w, parse_profile("1x3"), QuantPolicy::XnorAbsMean);
    EXPECT_THROW(Engine(net, q, InferenceMode::Float), DomainError);
    EXPECT_THROW(Engine(small_net(), q, InferenceMode::Dequantized), ShapeError);
    const Engine e(net, w, InferenceMode::Float);
    EXPECT_THROW((void)e.run(Tensor({3, 16, 16})), ShapeError);
    EXPECT_THROW((void)e.run(Tensor({1, 32, 32})), ShapeError);
    EXPECT_THROW(parse_mode("fixed"), DomainError);
    EXPECT_EQ(parse_mode("integer"), InferenceMode::Integer);
}

TEST(Engine, ShapePropagation) {
    const NetworkDefinition net = toy();
    const ForwardResult r = forward(net, init_weights(net, 6), Tensor({3, 32, 32}, 0.5), InferenceMode::Float);
    EXPECT_EQ(r.features.shape(), (std::vector<std::size_t>{64, 8, 8}));
    ASSERT_TRUE(r.logits.has_value());
    EXPECT_EQ(r.logits->size(), 10u);
}

TEST(Classify, TopOne) {
    const std::vector<double> logits{0.1, 0.9, 0.5};
    EXPECT_EQ(top_k(logits, 1).front().label, 1u);
    EXPECT_EQ(top_k(logits, 3), (std::vector<ScoredLabel>{{1, 0.9}, {2, 0.5}, {0, 0.1}}));
}

TEST(Classify, TiesGoToLowerIndex) {
    const std::vector<double> logits{0.3, 0.7, 0.7, 0.3};
    const auto r = top_k(logits, 4);
    EXPECT_EQ(r[0].label, 1u);
    EXPECT_EQ(r[1].label, 2u);
    EXPECT_EQ(r[2].label, 0u);
    EXPECT_EQ(r[3].label, 3u);
}

TEST(Classify, KBeyondClassesThrows) {
    const std::vector<double> logits{0.1, 0.2};
    EXPECT_THROW(top_k(logits, 3), DomainError);
    EXPECT_THROW(top_k(logits, 0), DomainError);
}

TEST(Classify, TopFiveMatchesArgsortOracle) {
    const NetworkDefinition net = toy();
    const Engine e(net, init_weights(net, 7), InferenceMode::Float);
    std::mt19937_64 rng(7);
    for (int i = 0; i < 20; ++i) {
        const Tensor img = oracle::random_tensor({3, 32, 32}, rng, 0.0, 1.0);
        const auto logits = *e.run(img).logits;
        std::vector<std::size_t> idx(logits.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
        const auto top = classify(e, img, 5);
        for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(top[k].label, idx[k]);
    }
}

TEST(Accuracy, PerfectClassifier) {
    std::vector<std::vector<double>> logits;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 50; ++i) {
        std::vector<double> l(10, 0.0);
        l[i % 10] = 1.0;
        logits.push_back(l);
        labels.push_back(i % 10);
    }
    const Accuracy a = accuracy_from_logits(logits, labels);
    EXPECT_EQ(a.top1, 1.0);
    EXPECT_EQ(a.top5, 1.0);
}

TEST(Accuracy, UniformRandomLogitsNearChance) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> lab(0, 9);
    std::vector<std::vector<double>> logits;
    std::vector<std::size_t> labels;
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> l(10);
        for (double& v : l) v = u(rng);
        logits.push_back(l);
        labels.push_back(lab(rng));
    }
    const Accuracy a = accuracy_from_logits(logits, labels);
    const double sigma = std::sqrt(0.1 * 0.9 / 10000.0);
    EXPECT_NEAR(a.top1, 0.1, 3 * sigma);
    EXPECT_GE(a.top5, a.top1);
    EXPECT_NEAR(a.top5, 0.5, 3 * std::sqrt(0.25 / 10000.0));
}

TEST(Accuracy, EmptyDatasetThrows) {
    const NetworkDefinition net = toy();
    const Engine e(net, init_weights(net, 9), InferenceMode::Float);
    EXPECT_THROW(accuracy(e, std::span<const LabeledImage>{}), DomainError);
}
