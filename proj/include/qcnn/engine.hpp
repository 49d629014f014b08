#pragma once

// Forward inference in three arithmetic modes:
//   Float        reference full-precision weights
//   Dequantized  conv weights replaced by alpha_hat * mask, biases by their 12-bit grid values
//   Integer      8-bit unsigned activations on per-layer power-of-two scales, integer MACs
//
// Integer mode keeps one exponent per activation tensor (index 0 = network input,
// index k = output of conv k-1). Each conv computes, per (out, in) kernel, an int32
// sum of act * mask over the nine taps, multiplies it by the 8-bit scalar, and
// accumulates in int64. Bias and requantization to the next activation scale are
// power-of-two shifts. Fully connected layers run in floating point on the
// dequantized activations; only 3x3 convolutions are part of the compressed model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "qcnn/codec.hpp"
#include "qcnn/error.hpp"
#include "qcnn/network.hpp"
#include "qcnn/quantizer.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn {

enum class InferenceMode { Float, Dequantized, Integer };

inline std::string_view to_string(InferenceMode m) {
    switch (m) {
        case InferenceMode::Float: return "float";
        case InferenceMode::Dequantized: return "dequantized";
        case InferenceMode::Integer: return "integer";
    }
    return "?";
}

inline InferenceMode parse_mode(std::string_view s) {
    if (s == "float") return InferenceMode::Float;
    if (s == "dequantized") return InferenceMode::Dequantized;
    if (s == "integer") return InferenceMode::Integer;
    throw DomainError("unknown inference mode '" + std::string(s) + "'");
}

/// Compressed conv layers plus the full-precision classifier head that rides alongside.
struct QuantizedWeights {
    CompressedModel model;
    std::vector<FcParams> fc;
    friend bool operator==(const QuantizedWeights&, const QuantizedWeights&) = default;
};

using ModelWeights = std::variant<FloatWeights, QuantizedWeights>;

inline FloatWeights dequantized_weights(const QuantizedWeights& q) {
    FloatWeights w;
    for (const auto& l : q.model.layers) {
        auto d = dequantize_layer(l);
        w.conv.push_back({std::move(d.weights), std::move(d.biases)});
    }
    w.fc = q.fc;
    return w;
}

// 8-bit activations times 5-bit masks over 512 input channels of 3x3 taps stay
// inside an int32 accumulator.
static_assert(512LL * 9 * 255 * 15 < (1LL << 31));

/// Power-of-two activation exponents; value = code * 2^exponent with 8-bit unsigned codes.
struct ActivationScales {
    std::vector<int> exponents;
    friend bool operator==(const ActivationScales&, const ActivationScales&) = default;
};

/// Smallest exponent s with peak / 2^s <= 255.
inline int activation_exponent(double peak) {
    if (!(peak > 0.0)) return 0;
    int s = static_cast<int>(std::ceil(std::log2(peak / 255.0)));
    while (std::ldexp(255.0, s) < peak) ++s;
    while (std::ldexp(255.0, s - 1) >= peak) --s;
    return s;
}

struct ForwardResult {
    Tensor features;                            // post-ReLU output of the tap layer
    std::optional<std::vector<double>> logits;  // present when the net has a classifier and the pass ran to the end
};

class Engine {
public:
    Engine(NetworkDefinition net, ModelWeights weights, InferenceMode mode,
           std::optional<ActivationScales> scales = std::nullopt)
        : net_(std::move(net)), mode_(mode), scales_(std::move(scales)) {
        if (const auto* fw = std::get_if<FloatWeights>(&weights)) {
            if (mode != InferenceMode::Float) {
                throw DomainError("mode '" + std::string(to_string(mode)) + "' requires compressed weights");
            }
            check_weights(net_, *fw);
            float_ = *fw;
        } else {
            auto& qw = std::get<QuantizedWeights>(weights);
            if (mode == InferenceMode::Float) throw DomainError("float mode requires full-precision weights");
            if (!matches(net_, qw.model)) throw ShapeError("compressed model does not match the network definition");
            float_ = dequantized_weights(qw);
            check_weights(net_, float_);
            quant_ = std::move(qw);
            if (mode == InferenceMode::Integer) {
                for (const auto& l : net_.layers())
                    if (l.kind == LayerKind::Conv && !l.relu) {
                        throw DomainError("integer mode needs ReLU after every conv (unsigned activations)");
                    }
                if (scales_ && scales_->exponents.size() != net_.conv_count() + 1) {
                    throw ShapeError("activation scales need one exponent per conv plus the input");
                }
            }
        }
    }

    [[nodiscard]] const NetworkDefinition& network() const noexcept { return net_; }
    [[nodiscard]] InferenceMode mode() const noexcept { return mode_; }
    [[nodiscard]] const FloatWeights& effective_weights() const noexcept { return float_; }

    /// Runs the network. With features_only the pass stops at the tap layer.
    [[nodiscard]] ForwardResult run(const Tensor& image, bool features_only = false) const {
        check_input(image);
        if (mode_ == InferenceMode::Integer) {
            const ActivationScales s = scales_ ? *scales_ : calibrate_one(image);
            return run_integer(image, s, features_only);
        }
        return run_float(image, features_only, nullptr);
    }

    [[nodiscard]] Tensor features(const Tensor& image) const { return run(image, true).features; }

    /// Per-activation peaks under the float/dequantized weights, folded into exponents.
    [[nodiscard]] ActivationScales calibrate(std::span<const Tensor> images) const {
        std::vector<double> peaks(net_.conv_count() + 1, 0.0);
        for (const auto& img : images) {
            check_input(img);
            run_float(img, true, &peaks, /*full_depth=*/true);
        }
        ActivationScales s;
        for (double p : peaks) s.exponents.push_back(activation_exponent(p));
        return s;
    }

private:
    void check_input(const Tensor& image) const {
        const Shape3& in = net_.input();
        if (image.rank() != 3 || image.channels() != in.channels || image.height() != in.height ||
            image.width() != in.width) {
            throw ShapeError("input " + shape_to_string(image.shape()) + " does not match network input [" +
                             std::to_string(in.channels) + "x" + std::to_string(in.height) + "x" +
                             std::to_string(in.width) + "]");
        }
    }

    ActivationScales calibrate_one(const Tensor& image) const { return calibrate(std::span(&image, 1)); }

    ForwardResult run_float(const Tensor& image, bool features_only, std::vector<double>* peaks,
                            bool full_depth = false) const {
        ForwardResult r;
        Tensor x = image;
        std::vector<double> flat;
        bool is_flat = false;
        std::size_t conv = 0, fc = 0;
        auto peak_of = [](std::span<const double> v) {
            double p = 0.0;
            for (double e : v) p = std::max(p, e);
            return p;
        };
        if (peaks) (*peaks)[0] = std::max((*peaks)[0], peak_of(x.data()));
        const auto& layers = net_.layers();
        for (std::size_t li = 0; li < layers.size(); ++li) {
            const auto& l = layers[li];
            switch (l.kind) {
                case LayerKind::Conv: {
                    const auto& p = float_.conv[conv];
                    x = conv2d(x, p.weights, p.bias, net_.conv_shapes()[conv]);
                    if (l.relu) x = relu(std::move(x));
                    ++conv;
                    if (peaks) (*peaks)[conv] = std::max((*peaks)[conv], peak_of(x.data()));
                    if (li == net_.tap_layer()) {
                        r.features = x;
                        if (features_only && !full_depth) return r;
                    }
                    break;
                }
                case LayerKind::MaxPool: x = maxpool2x2(x); break;
                case LayerKind::Flatten:
                    if (features_only) return r;
                    flat = x.values();
                    is_flat = true;
                    break;
                case LayerKind::FullyConnected: {
                    const auto& p = float_.fc[fc++];
                    flat = fully_connected(flat, p.weights, p.bias);
                    if (l.relu)
                        for (double& v : flat) v = std::max(v, 0.0);
                    break;
                }
            }
        }
        if (is_flat && net_.has_classifier()) r.logits = std::move(flat);
        return r;
    }

    ForwardResult run_integer(const Tensor& image, const ActivationScales& scales, bool features_only) const {
        using Codes = ActivationCodes;
        auto to_codes = [](const Tensor& t, int exponent) {
            Codes q{t.channels(), t.height(), t.width(), std::vector<std::int32_t>(t.size())};
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double c = std::round(std::ldexp(t[i], -exponent));
                q.v[i] = static_cast<std::int32_t>(std::clamp(c, 0.0, 255.0));
            }
            return q;
        };
        auto to_tensor = [](const Codes& q, int exponent) {
            Tensor t({q.c, q.h, q.w});
            for (std::size_t i = 0; i < q.v.size(); ++i) t[i] = std::ldexp(static_cast<double>(q.v[i]), exponent);
            return t;
        };

        ForwardResult r;
        int exp_in = scales.exponents[0];
        Codes x = to_codes(image, exp_in);
        std::vector<double> flat;
        bool is_flat = false;
        std::size_t conv = 0, fc = 0;
        const auto& layers = net_.layers();
        for (std::size_t li = 0; li < layers.size(); ++li) {
            const auto& l = layers[li];
            switch (l.kind) {
                case LayerKind::Conv: {
                    const QuantizedLayer& q = quant_->model.layers[conv];
                    const int exp_out = scales.exponents[conv + 1];
                    x = integer_conv(x.c, x.h, x.w, x.v, q, exp_in, exp_out);
                    exp_in = exp_out;
                    ++conv;
                    if (li == net_.tap_layer()) {
                        r.features = to_tensor(x, exp_in);
                        if (features_only) return r;
                    }
                    break;
                }
                case LayerKind::MaxPool: {
                    if (x.h % 2 || x.w % 2) throw ShapeError("maxpool2x2: odd spatial dims");
                    Codes y{x.c, x.h / 2, x.w / 2, std::vector<std::int32_t>(x.c * (x.h / 2) * (x.w / 2))};
                    for (std::size_t c = 0; c < x.c; ++c)
                        for (std::size_t yy = 0; yy < y.h; ++yy)
                            for (std::size_t xx = 0; xx < y.w; ++xx) {
                                auto at = [&](std::size_t a, std::size_t b) { return x.v[(c * x.h + a) * x.w + b]; };
                                y.v[(c * y.h + yy) * y.w + xx] = std::max({at(2 * yy, 2 * xx), at(2 * yy, 2 * xx + 1),
                                                                           at(2 * yy + 1, 2 * xx), at(2 * yy + 1, 2 * xx + 1)});
                            }
                    x = std::move(y);
                    break;
                }
                case LayerKind::Flatten:
                    if (features_only) return r;
                    flat = to_tensor(x, exp_in).values();
                    is_flat = true;
                    break;
                case LayerKind::FullyConnected: {
                    const auto& p = float_.fc[fc++];
                    flat = fully_connected(flat, p.weights, p.bias);
                    if (l.relu)
                        for (double& v : flat) v = std::max(v, 0.0);
                    break;
                }
            }
        }
        if (is_flat && net_.has_classifier()) r.logits = std::move(flat);
        return r;
    }

    struct ActivationCodes {
        std::size_t c, h, w;
        std::vector<std::int32_t> v;
    };

    static std::int64_t shift_round(std::int64_t v, int right) {
        if (right <= 0) return v << (-right);
        const std::int64_t half = std::int64_t{1} << (right - 1);
        return v >= 0 ? (v + half) >> right : -((-v + half) >> right);
    }

    // Returns 8-bit codes on exponent exp_out.
    static ActivationCodes integer_conv(std::size_t in_c, std::size_t in_h, std::size_t in_w,
                                        const std::vector<std::int32_t>& act, const QuantizedLayer& q, int exp_in,
                                        int exp_out) {
        using Codes = ActivationCodes;
        const ConvLayerShape& s = q.shape;
        if (in_c != s.in_channels) throw ShapeError("integer conv: channel mismatch");
        const std::size_t oh = s.output_extent(in_h), ow = s.output_extent(in_w);
        const auto pad = static_cast<std::ptrdiff_t>(s.padding), stride = static_cast<std::ptrdiff_t>(s.stride);

        // Products carry weight exponent (e - 8) and activation exponent exp_in; biases carry (e - 8).
        // Common unit: 2^(e - 8 + min(exp_in, 0)).
        const int unit_shift = std::min(exp_in, 0);
        const int acc_up = exp_in - unit_shift;  // >= 0
        const int bias_up = -unit_shift;         // >= 0
        const int unit = q.shift - kScalarBits + unit_shift;

        Codes out{s.out_channels, oh, ow, std::vector<std::int32_t>(s.out_channels * oh * ow)};
        std::vector<std::int64_t> acc(oh * ow);
        std::vector<std::int32_t> partial(oh * ow);
        for (std::size_t o = 0; o < s.out_channels; ++o) {
            std::fill(acc.begin(), acc.end(), 0);
            for (std::size_t i = 0; i < s.in_channels; ++i) {
                const QuantizedKernel& k = q.kernels[o * s.in_channels + i];
                if (k.scalar == 0) continue;
                std::fill(partial.begin(), partial.end(), 0);
                const std::int32_t* src = act.data() + i * in_h * in_w;
                for (std::ptrdiff_t ky = 0; ky < 3; ++ky)
                    for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
                        const std::int32_t m = k.mask[static_cast<std::size_t>(ky * 3 + kx)];
                        if (m == 0) continue;
                        for (std::size_t y = 0; y < oh; ++y) {
                            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) * stride + ky - pad;
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in_h)) continue;
                            for (std::size_t x = 0; x < ow; ++x) {
                                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) * stride + kx - pad;
                                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(in_w)) continue;
                                partial[y * ow + x] += m * src[static_cast<std::size_t>(sy) * in_w + static_cast<std::size_t>(sx)];
                            }
                        }
                    }
                for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += static_cast<std::int64_t>(k.scalar) * partial[p];
            }
            const std::int64_t bias = static_cast<std::int64_t>(q.biases[o]) << bias_up;
            for (std::size_t p = 0; p < acc.size(); ++p) {
                std::int64_t t = (acc[p] << acc_up) + bias;
                t = std::max<std::int64_t>(t, 0);  // ReLU
                const std::int64_t code = shift_round(t, exp_out - unit);
                out.v[o * oh * ow + p] = static_cast<std::int32_t>(std::min<std::int64_t>(code, 255));
            }
        }
        return out;
    }

    NetworkDefinition net_;
    InferenceMode mode_;
    std::optional<ActivationScales> scales_;
    FloatWeights float_;
    std::optional<QuantizedWeights> quant_;
};

inline ForwardResult forward(const NetworkDefinition& net, const ModelWeights& weights, const Tensor& image,
                             InferenceMode mode) {
    return Engine(net, weights, mode).run(image);
}

struct ScoredLabel {
    std::size_t label = 0;
    double score = 0.0;
    friend bool operator==(const ScoredLabel&, const ScoredLabel&) = default;
};

/// Top-k by descending score; equal scores rank the lower label first.
inline std::vector<ScoredLabel> top_k(std::span<const double> logits, std::size_t k) {
    if (k == 0 || k > logits.size()) {
        throw DomainError("top-k: k=" + std::to_string(k) + " exceeds " + std::to_string(logits.size()) + " classes");
    }
    std::vector<std::size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    std::vector<ScoredLabel> r(k);
    for (std::size_t i = 0; i < k; ++i) r[i] = {idx[i], logits[idx[i]]};
    return r;
}

inline std::vector<ScoredLabel> classify(const Engine& engine, const Tensor& image, std::size_t k) {
    if (!engine.network().has_classifier()) throw ShapeError("classify: network has no classifier head");
    const auto r = engine.run(image);
    return top_k(*r.logits, k);
}

struct LabeledImage {
    Tensor image;
    std::size_t label = 0;
};

struct Accuracy {
    double top1 = 0.0;
    double top5 = 0.0;
};

/// Fraction of rows whose label is the argmax / among the top five (top-k capped at class count).
inline Accuracy accuracy_from_logits(std::span<const std::vector<double>> logits, std::span<const std::size_t> labels) {
    if (logits.empty()) throw DomainError("accuracy: empty dataset");
    if (logits.size() != labels.size()) throw ShapeError("accuracy: logits/labels length mismatch");
    std::size_t hit1 = 0, hit5 = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto top = top_k(logits[i], std::min<std::size_t>(5, logits[i].size()));
        if (top.front().label == labels[i]) ++hit1;
        if (std::any_of(top.begin(), top.end(), [&](const ScoredLabel& s) { return s.label == labels[i]; })) ++hit5;
    }
    const auto n = static_cast<double>(logits.size());
    return {static_cast<double>(hit1) / n, static_cast<double>(hit5) / n};
}

inline Accuracy accuracy(const Engine& engine, std::span<const LabeledImage> dataset) {
    if (dataset.empty()) throw DomainError("accuracy: empty dataset");
    if (!engine.network().has_classifier()) throw ShapeError("accuracy: network has no classifier head");
    std::vector<std::vector<double>> logits;
    std::vector<std::size_t> labels;
    logits.reserve(dataset.size());
    for (const auto& s : dataset) {
        logits.push_back(*engine.run(s.image).logits);
        labels.push_back(s.label);
    }
    return accuracy_from_logits(logits, labels);
}

}  // namespace qcnn
