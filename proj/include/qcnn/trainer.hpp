#pragma once

// Float training and quantization-aware retraining with a straight-through estimator.
//
// Retraining keeps full-precision shadow weights. Every step quantizes each conv
// layer (alpha, mask, 8-bit scalar, 12-bit bias against the layer shift), runs
// forward and backward through the dequantized weights, and applies the gradient
// to the shadow copy as if quantization were the identity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qcnn/codec.hpp"
#include "qcnn/engine.hpp"
#include "qcnn/error.hpp"
#include "qcnn/network.hpp"
#include "qcnn/parallel.hpp"
#include "qcnn/quantizer.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn {

/// Profile entry that leaves a layer in full precision during retraining.
inline constexpr int kUnquantizedBits = 32;
/// A per-sample cross-entropy above this is treated as divergence, like a NaN loss.
inline constexpr double kDivergentLoss = 1e6;

enum class ShiftRefresh { PerEpoch, PerStep };

struct TrainConfig {
    double learning_rate = 0.05;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    QuantPolicy policy = QuantPolicy::XnorAbsMean;
    BitAllocationProfile profile;
    ShiftRefresh shift_refresh = ShiftRefresh::PerEpoch;
    bool global_shift = false;  // one exponent for the whole network instead of one per layer
    std::size_t jobs = 1;       // per-sample gradient workers; results do not depend on this
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double loss = 0.0;  // mean training loss over the epoch
    double top1 = 0.0;  // on the evaluation set (or the training set when none is given)
};

struct TrainResult {
    FloatWeights weights;
    std::vector<EpochMetrics> history;
};

struct RetrainResult {
    std::optional<QuantizedWeights> model;  // absent when some layer was left unquantized
    FloatWeights shadow;
    std::vector<EpochMetrics> history;
};

/// Parameter-shaped gradient container.
inline FloatWeights zeros_like(const FloatWeights& w) {
    FloatWeights g;
    for (const auto& c : w.conv) g.conv.push_back({Tensor(c.weights.shape()), std::vector<double>(c.bias.size())});
    for (const auto& f : w.fc) g.fc.push_back({Tensor(f.weights.shape()), std::vector<double>(f.bias.size())});
    return g;
}

namespace detail {

template <class Fn>
void for_each_param(FloatWeights& w, Fn&& fn) {
    for (auto& c : w.conv) {
        fn(c.weights.data());
        fn(std::span<double>(c.bias));
    }
    for (auto& f : w.fc) {
        fn(f.weights.data());
        fn(std::span<double>(f.bias));
    }
}

inline std::size_t param_count(const FloatWeights& w) {
    std::size_t n = 0;
    for_each_param(const_cast<FloatWeights&>(w), [&](std::span<double> s) { n += s.size(); });
    return n;
}

inline double& param_at(FloatWeights& w, std::size_t index) {
    double* hit = nullptr;
    for_each_param(w, [&](std::span<double> s) {
        if (hit) return;
        if (index < s.size()) hit = &s[index];
        else index -= s.size();
    });
    return *hit;
}

struct Tape {
    std::vector<Tensor> inputs;    // input to each layer
    std::vector<Tensor> outputs;   // output of each layer (post-activation)
    std::vector<std::uint8_t> pattern;  // ReLU on/off and pool argmax choices, for kink detection
};

inline std::size_t pool_argmax(const Tensor& in, std::size_t c, std::size_t y, std::size_t x) {
    std::size_t best = 0;
    double v = in.at(c, 2 * y, 2 * x);
    const double cand[3] = {in.at(c, 2 * y, 2 * x + 1), in.at(c, 2 * y + 1, 2 * x), in.at(c, 2 * y + 1, 2 * x + 1)};
    for (std::size_t k = 0; k < 3; ++k)
        if (cand[k] > v) {
            v = cand[k];
            best = k + 1;
        }
    return best;
}

/// Forward pass keeping what backward needs. Returns logits.
inline std::vector<double> forward_tape(const NetworkDefinition& net, const FloatWeights& w, const Tensor& image,
                                        Tape& tape, bool record_pattern = false) {
    const auto& layers = net.layers();
    tape.inputs.assign(layers.size(), {});
    tape.outputs.assign(layers.size(), {});
    tape.pattern.clear();
    Tensor x = image;
    std::size_t conv = 0, fc = 0;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto& l = layers[li];
        tape.inputs[li] = x;
        switch (l.kind) {
            case LayerKind::Conv: {
                const auto& p = w.conv[conv];
                x = conv2d(x, p.weights, p.bias, net.conv_shapes()[conv]);
                if (record_pattern && l.relu)
                    for (double v : x.data()) tape.pattern.push_back(v > 0.0);
                if (l.relu) x = relu(std::move(x));
                ++conv;
                break;
            }
            case LayerKind::MaxPool:
                if (record_pattern)
                    for (std::size_t c = 0; c < x.channels(); ++c)
                        for (std::size_t y = 0; y < x.height() / 2; ++y)
                            for (std::size_t xx = 0; xx < x.width() / 2; ++xx)
                                tape.pattern.push_back(static_cast<std::uint8_t>(pool_argmax(x, c, y, xx)));
                x = maxpool2x2(x);
                break;
            case LayerKind::Flatten: x = x.reshaped({x.size()}); break;
            case LayerKind::FullyConnected: {
                const auto& p = w.fc[fc++];
                auto y = fully_connected(x.data(), p.weights, p.bias);
                if (record_pattern && l.relu)
                    for (double v : y) tape.pattern.push_back(v > 0.0);
                if (l.relu)
                    for (double& v : y) v = std::max(v, 0.0);
                const std::size_t n = y.size();
                x = Tensor({n}, std::move(y));
                break;
            }
        }
        tape.outputs[li] = x;
    }
    if (!net.has_classifier()) throw ShapeError("training needs a classifier head");
    return x.values();
}

inline void conv_backward(const Tensor& input, const Tensor& weights, const ConvLayerShape& s, const Tensor& d_pre,
                          ConvParams& grad, Tensor* d_input) {
    const std::size_t in_h = input.height(), in_w = input.width();
    const std::size_t oh = d_pre.height(), ow = d_pre.width();
    const auto pad = static_cast<std::ptrdiff_t>(s.padding), stride = static_cast<std::ptrdiff_t>(s.stride);
    if (d_input) *d_input = Tensor(input.shape());
    for (std::size_t o = 0; o < s.out_channels; ++o) {
        const double* dp = &d_pre.at(o, 0, 0);
        double sum = 0.0;
        for (std::size_t p = 0; p < oh * ow; ++p) sum += dp[p];
        grad.bias[o] += sum;
        for (std::size_t i = 0; i < s.in_channels; ++i) {
            const double* src = &input.at(i, 0, 0);
            double* dsrc = d_input ? &d_input->at(i, 0, 0) : nullptr;
            const std::size_t kbase = (o * s.in_channels + i) * 9;
            for (std::ptrdiff_t ky = 0; ky < 3; ++ky)
                for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
                    const auto kidx = kbase + static_cast<std::size_t>(ky * 3 + kx);
                    const double wv = weights[kidx];
                    double gw = 0.0;
                    for (std::size_t y = 0; y < oh; ++y) {
                        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) * stride + ky - pad;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in_h)) continue;
                        const double* row = src + static_cast<std::size_t>(sy) * in_w;
                        double* drow = dsrc ? dsrc + static_cast<std::size_t>(sy) * in_w : nullptr;
                        const double* dprow = dp + y * ow;
                        for (std::size_t x = 0; x < ow; ++x) {
                            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) * stride + kx - pad;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(in_w)) continue;
                            gw += dprow[x] * row[sx];
                            if (drow) drow[sx] += dprow[x] * wv;
                        }
                    }
                    grad.weights[kidx] += gw;
                }
        }
    }
}

}  // namespace detail

struct LossAndGradient {
    double loss = 0.0;
    std::vector<double> logits;
};

/// Adds d(loss)/d(params) for one sample into `grad`.
inline LossAndGradient backprop(const NetworkDefinition& net, const FloatWeights& w, const LabeledImage& sample,
                                FloatWeights& grad) {
    detail::Tape tape;
    LossAndGradient r;
    r.logits = detail::forward_tape(net, w, sample.image, tape);
    const SoftmaxLoss sl = softmax_cross_entropy(r.logits, sample.label);
    r.loss = sl.loss;

    Tensor d({sl.probs.size()}, sl.probs);
    d[sample.label] -= 1.0;

    const auto& layers = net.layers();
    std::size_t conv = net.conv_count(), fc = net.fc_count();
    for (std::size_t li = layers.size(); li-- > 0;) {
        const auto& l = layers[li];
        const Tensor& in = tape.inputs[li];
        const Tensor& out = tape.outputs[li];
        switch (l.kind) {
            case LayerKind::FullyConnected: {
                --fc;
                if (l.relu)
                    for (std::size_t k = 0; k < d.size(); ++k)
                        if (!(out[k] > 0.0)) d[k] = 0.0;
                const Tensor& W = w.fc[fc].weights;
                FcParams& g = grad.fc[fc];
                const std::size_t n_out = W.dim(0), n_in = W.dim(1);
                Tensor d_in({n_in});
                for (std::size_t o = 0; o < n_out; ++o) {
                    const double dy = d[o];
                    g.bias[o] += dy;
                    if (dy == 0.0) continue;
                    double* grow = &g.weights[o * n_in];
                    const double* wrow = &W[o * n_in];
                    for (std::size_t i = 0; i < n_in; ++i) {
                        grow[i] += dy * in[i];
                        d_in[i] += dy * wrow[i];
                    }
                }
                d = std::move(d_in);
                break;
            }
            case LayerKind::Flatten: d = d.reshaped(in.shape()); break;
            case LayerKind::MaxPool: {
                Tensor d_in(in.shape());
                for (std::size_t c = 0; c < out.channels(); ++c)
                    for (std::size_t y = 0; y < out.height(); ++y)
                        for (std::size_t x = 0; x < out.width(); ++x) {
                            const std::size_t k = detail::pool_argmax(in, c, y, x);
                            d_in.at(c, 2 * y + k / 2, 2 * x + k % 2) += d.at(c, y, x);
                        }
                d = std::move(d_in);
                break;
            }
            case LayerKind::Conv: {
                --conv;
                if (l.relu)
                    for (std::size_t k = 0; k < d.size(); ++k)
                        if (!(out[k] > 0.0)) d[k] = 0.0;
                Tensor d_in;
                detail::conv_backward(in, w.conv[conv].weights, net.conv_shapes()[conv], d, grad.conv[conv],
                                      conv > 0 ? &d_in : nullptr);
                d = std::move(d_in);
                break;
            }
        }
    }
    return r;
}

/// Builds the quantized view of `shadow` under `cfg`. `shifts` pins per-layer exponents
/// (per-epoch refresh); empty means derive them now. Layers whose profile entry is
/// kUnquantizedBits are passed through unchanged.
inline FloatWeights quantized_view(const NetworkDefinition& net, const FloatWeights& shadow, const TrainConfig& cfg,
                                   std::span<const int> shifts) {
    FloatWeights v;
    v.fc = shadow.fc;
    for (std::size_t i = 0; i < shadow.conv.size(); ++i) {
        const int m = cfg.profile.mask_bits[i];
        if (m == kUnquantizedBits) {
            v.conv.push_back(shadow.conv[i]);
            continue;
        }
        std::optional<int> forced;
        if (!shifts.empty()) forced = shifts[i];
        auto q = quantize_layer(shadow.conv[i].weights, shadow.conv[i].bias, m, cfg.policy, net.conv_shapes()[i], forced);
        auto d = dequantize_layer(q.layer);
        v.conv.push_back({std::move(d.weights), std::move(d.biases)});
    }
    return v;
}

/// Per-layer exponents for the current shadow weights (or one shared exponent when global_shift).
inline std::vector<int> layer_shifts(const FloatWeights& shadow, const TrainConfig& cfg) {
    std::vector<int> shifts(shadow.conv.size(), kMinShift);
    std::vector<double> all_alphas;
    for (std::size_t i = 0; i < shadow.conv.size(); ++i) {
        const int m = cfg.profile.mask_bits[i];
        if (m == kUnquantizedBits) continue;
        const auto approx = approximate_kernels(shadow.conv[i].weights, m, cfg.policy);
        std::vector<double> alphas;
        for (const auto& a : approx) alphas.push_back(a.alpha);
        shifts[i] = compute_layer_shift(alphas).shift;
        all_alphas.insert(all_alphas.end(), alphas.begin(), alphas.end());
    }
    if (cfg.global_shift && !all_alphas.empty()) {
        const int g = compute_layer_shift(all_alphas).shift;
        std::fill(shifts.begin(), shifts.end(), g);
    }
    return shifts;
}

/// The compressed model that the quantized view corresponds to.
inline QuantizedWeights emit_model(const NetworkDefinition& net, const FloatWeights& shadow, const TrainConfig& cfg,
                                   std::span<const int> shifts = {}) {
    QuantizedWeights q;
    q.model.arch = net.architecture();
    q.model.provenance.policy = cfg.policy;
    q.model.provenance.source_checksum = fnv1a64(encode_weights(shadow));
    for (std::size_t i = 0; i < shadow.conv.size(); ++i) {
        const int m = cfg.profile.mask_bits[i];
        if (m == kUnquantizedBits) throw DomainError("cannot emit a compressed model with unquantized layers");
        std::optional<int> forced;
        if (!shifts.empty()) forced = shifts[i];
        q.model.layers.push_back(
            quantize_layer(shadow.conv[i].weights, shadow.conv[i].bias, m, cfg.policy, net.conv_shapes()[i], forced).layer);
    }
    q.fc = shadow.fc;
    return q;
}

namespace detail {

inline void check_config(const NetworkDefinition& net, const TrainConfig& cfg, std::span<const LabeledImage> data) {
    if (!(cfg.learning_rate >= 0.0) || cfg.epochs == 0 || cfg.batch_size == 0) {
        throw DomainError("train config: learning rate must be >= 0, epochs and batch size positive");
    }
    if (data.empty()) throw DomainError("training set is empty");
    if (!net.has_classifier()) throw ShapeError("training needs a classifier head");
    for (const auto& s : data)
        if (s.label >= net.class_count()) throw DomainError("label " + std::to_string(s.label) + " out of range");
}

/// acc += g, parameter by parameter.
inline void accumulate(FloatWeights& acc, FloatWeights& g) {
    std::vector<std::span<double>> gs;
    for_each_param(g, [&](std::span<double> s) { gs.push_back(s); });
    std::size_t idx = 0;
    for_each_param(acc, [&](std::span<double> s) {
        const auto gsp = gs[idx++];
        for (std::size_t j = 0; j < s.size(); ++j) s[j] += gsp[j];
    });
}

/// w -= scale * g, parameter by parameter.
inline void sgd_step(FloatWeights& w, FloatWeights& g, double scale) {
    std::vector<std::span<double>> gs;
    for_each_param(g, [&](std::span<double> s) { gs.push_back(s); });
    std::size_t idx = 0;
    for_each_param(w, [&](std::span<double> s) {
        const auto gsp = gs[idx++];
        for (std::size_t j = 0; j < s.size(); ++j) s[j] -= scale * gsp[j];
    });
}

inline double top1_of(const NetworkDefinition& net, const FloatWeights& w, std::span<const LabeledImage> data) {
    return accuracy(Engine(net, w, InferenceMode::Float), data).top1;
}

/// The shared SGD loop. `quantize` selects whether the forward/backward pass sees the
/// quantized view of the shadow weights.
inline std::vector<EpochMetrics> sgd(const NetworkDefinition& net, FloatWeights& shadow,
                                     std::span<const LabeledImage> data, const TrainConfig& cfg, bool quantize,
                                     std::span<const LabeledImage> eval) {
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochMetrics> history;
    const auto eval_set = eval.empty() ? data : eval;
    std::vector<int> shifts;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        if (quantize && cfg.shift_refresh == ShiftRefresh::PerEpoch) shifts = layer_shifts(shadow, cfg);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<int> step_shifts;
            if (quantize) step_shifts = cfg.shift_refresh == ShiftRefresh::PerEpoch ? shifts : layer_shifts(shadow, cfg);
            const FloatWeights view = quantize ? quantized_view(net, shadow, cfg, step_shifts) : FloatWeights{};
            const FloatWeights& active = quantize ? view : shadow;
            // One gradient buffer per sample, summed in batch order so the result is the
            // same for any worker count.
            std::vector<FloatWeights> grads(end - start);
            std::vector<double> losses(end - start);
            parallel_for(end - start, cfg.jobs, [&](std::size_t k) {
                grads[k] = zeros_like(shadow);
                losses[k] = backprop(net, active, data[order[start + k]], grads[k]).loss;
            });
            FloatWeights grad = zeros_like(shadow);
            for (std::size_t k = 0; k < grads.size(); ++k) {
                if (!std::isfinite(losses[k]) || losses[k] > kDivergentLoss) {
                    throw NumericalError("training diverged: loss " + std::to_string(losses[k]) + " at epoch " + std::to_string(epoch) +
                                         ", sample " + std::to_string(order[start + k]) + " (learning rate " +
                                         std::to_string(cfg.learning_rate) + ")");
                }
                loss_sum += losses[k];
                accumulate(grad, grads[k]);
            }
            sgd_step(shadow, grad, cfg.learning_rate / static_cast<double>(end - start));
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.loss = loss_sum / static_cast<double>(data.size());
        if (quantize) {
            const std::vector<int> log_shifts =
                cfg.shift_refresh == ShiftRefresh::PerEpoch ? shifts : layer_shifts(shadow, cfg);
            m.top1 = top1_of(net, quantized_view(net, shadow, cfg, log_shifts), eval_set);
        } else {
            m.top1 = top1_of(net, shadow, eval_set);
        }
        history.push_back(m);
    }
    return history;
}

}  // namespace detail

inline TrainResult train_float(const NetworkDefinition& net, std::span<const LabeledImage> data, const TrainConfig& cfg,
                               const FloatWeights* init = nullptr, std::span<const LabeledImage> eval = {}) {
    detail::check_config(net, cfg, data);
    TrainResult r;
    r.weights = init ? *init : init_weights(net, cfg.seed);
    check_weights(net, r.weights);
    r.history = detail::sgd(net, r.weights, data, cfg, false, eval);
    return r;
}

inline RetrainResult retrain_quantized(const NetworkDefinition& net, const FloatWeights& float_weights,
                                       std::span<const LabeledImage> data, const TrainConfig& cfg,
                                       std::span<const LabeledImage> eval = {}) {
    detail::check_config(net, cfg, data);
    check_weights(net, float_weights);
    if (cfg.profile.size() != net.conv_count()) {
        throw ShapeError("profile has " + std::to_string(cfg.profile.size()) + " entries, network has " +
                         std::to_string(net.conv_count()) + " conv layers");
    }
    bool all_quantized = true;
    for (int m : cfg.profile.mask_bits) {
        if (m == kUnquantizedBits) {
            all_quantized = false;
            continue;
        }
        check_mask_bits(m);
    }
    RetrainResult r;
    r.shadow = float_weights;
    r.history = detail::sgd(net, r.shadow, data, cfg, true, eval);
    if (all_quantized) {
        std::vector<int> shifts;
        if (cfg.global_shift) shifts = layer_shifts(r.shadow, cfg);
        r.model = emit_model(net, r.shadow, cfg, shifts);
    }
    return r;
}

/// Post-hoc quantization of float weights (no retraining).
inline QuantizedWeights quantize_weights(const NetworkDefinition& net, const FloatWeights& w,
                                         const BitAllocationProfile& profile, QuantPolicy policy,
                                         bool global_shift = false) {
    TrainConfig cfg;
    cfg.profile = profile;
    cfg.policy = policy;
    cfg.global_shift = global_shift;
    std::vector<int> shifts;
    if (global_shift) shifts = layer_shifts(w, cfg);
    return emit_model(net, w, cfg, shifts);
}

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

/// Compares analytic gradients with central differences on randomly chosen parameter
/// coordinates. Coordinates whose perturbation flips a ReLU or pooling decision are
/// skipped (the loss is not differentiable there). Relative error uses
/// max(|analytic|, |numeric|, floor) as the denominator.
inline GradientCheckResult gradient_check(const NetworkDefinition& net, const FloatWeights& weights,
                                          const LabeledImage& sample, std::size_t coordinates = 50,
                                          std::uint64_t seed = 0, double step = 1e-4, double floor = 1e-6) {
    FloatWeights grad = zeros_like(weights);
    backprop(net, weights, sample, grad);

    detail::Tape base_tape;
    detail::forward_tape(net, weights, sample.image, base_tape, true);

    FloatWeights probe = weights;
    const std::size_t n = detail::param_count(weights);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    GradientCheckResult r;
    auto loss_at = [&](double value, std::size_t idx, bool& kink) {
        detail::param_at(probe, idx) = value;
        detail::Tape t;
        const auto logits = detail::forward_tape(net, probe, sample.image, t, true);
        if (t.pattern != base_tape.pattern) kink = true;
        return softmax_cross_entropy(logits, sample.label).loss;
    };
    for (std::size_t attempt = 0; r.checked < coordinates && attempt < coordinates * 20; ++attempt) {
        const std::size_t idx = pick(rng);
        const double orig = detail::param_at(probe, idx);
        bool kink = false;
        const double up = loss_at(orig + step, idx, kink);
        const double down = loss_at(orig - step, idx, kink);
        detail::param_at(probe, idx) = orig;
        if (kink) {
            ++r.skipped_kinks;
            continue;
        }
        const double numeric = (up - down) / (2.0 * step);
        const double analytic = detail::param_at(grad, idx);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
        r.max_relative_error = std::max(r.max_relative_error, std::abs(numeric - analytic) / denom);
        ++r.checked;
    }
    return r;
}

}  // namespace qcnn
