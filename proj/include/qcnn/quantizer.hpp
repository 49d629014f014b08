#pragma once

// Scalar-times-mask kernel quantization with 8-bit scalars, 12-bit biases and a
// per-layer 4-bit power-of-two shift.
//
// A 3x3 kernel W is approximated as alpha * M where M holds nine m-bit integers.
// alpha is stored as an 8-bit mantissa a against the layer exponent e:
//     alpha_hat = a * 2^(e - 8)
// Biases live on the same 2^(e - 8) grid as 12-bit signed integers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qcnn/error.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn {

inline constexpr int kMinMaskBits = 1;
inline constexpr int kMaxMaskBits = 5;
inline constexpr int kScalarBits = 8;
inline constexpr int kBiasBits = 12;
inline constexpr int kMinShift = -8;
inline constexpr int kMaxShift = 7;
inline constexpr int kBiasMin = -2048;
inline constexpr int kBiasMax = 2047;

/// How 1-bit masks and their magnitude are derived. Multi-bit widths always use
/// symmetric uniform quantization against max |w|.
enum class QuantPolicy {
    LiteralMean,  // threshold at mean(w), magnitude = mean |w - mean(w)|
    XnorAbsMean,  // threshold at 0, magnitude = mean |w|
};

inline std::string_view to_string(QuantPolicy p) {
    return p == QuantPolicy::LiteralMean ? "literal-mean" : "xnor-abs-mean";
}

inline QuantPolicy parse_policy(std::string_view s) {
    if (s == "literal-mean" || s == "mean") return QuantPolicy::LiteralMean;
    if (s == "xnor-abs-mean" || s == "xnor") return QuantPolicy::XnorAbsMean;
    throw DomainError("unknown quantization policy '" + std::string(s) + "'");
}

/// Largest mask magnitude for an m-bit symmetric level set (1 for the binary case).
constexpr int mask_limit(int mask_bits) { return mask_bits <= 1 ? 1 : (1 << (mask_bits - 1)) - 1; }

inline void check_mask_bits(int mask_bits) {
    if (mask_bits < kMinMaskBits || mask_bits > kMaxMaskBits) {
        throw DomainError("mask width " + std::to_string(mask_bits) + " outside [1,5]");
    }
}

using KernelValues = std::array<double, 9>;
using KernelMask = std::array<std::int8_t, 9>;

struct KernelApprox {
    double alpha = 0.0;
    KernelMask mask{};
};

/// One 3x3 slice: 8-bit scalar mantissa plus nine mask integers.
struct QuantizedKernel {
    std::uint8_t scalar = 0;
    KernelMask mask{};

    friend bool operator==(const QuantizedKernel&, const QuantizedKernel&) = default;
};

struct QuantizedLayer {
    ConvLayerShape shape;
    int mask_bits = 1;
    int shift = 0;
    std::vector<QuantizedKernel> kernels;  // out-major: index o * in + i
    std::vector<std::int16_t> biases;

    friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

inline bool mask_value_valid(int v, int mask_bits) {
    if (mask_bits == 1) return v == 1 || v == -1;
    const int lim = mask_limit(mask_bits);
    return v >= -lim && v <= lim;
}

/// Throws InvariantError naming the first offending field.
inline void validate(const QuantizedLayer& q, std::size_t layer_index = 0) {
    const std::string where = "layer " + std::to_string(layer_index) + ": ";
    if (q.mask_bits < kMinMaskBits || q.mask_bits > kMaxMaskBits) {
        throw InvariantError(where + "mask_bits " + std::to_string(q.mask_bits) + " outside [1,5]");
    }
    if (q.shift < kMinShift || q.shift > kMaxShift) {
        throw InvariantError(where + "shift " + std::to_string(q.shift) + " outside [-8,7]");
    }
    if (q.shape.out_channels == 0 || q.shape.in_channels == 0 || q.shape.stride == 0 || q.shape.out_channels > 0xFFFF ||
        q.shape.in_channels > 0xFFFF || q.shape.stride > 0xFF || q.shape.padding > 0xFF) {
        throw InvariantError(where + "shape out of encodable range");
    }
    if (q.kernels.size() != q.shape.kernel_pairs()) {
        throw InvariantError(where + "kernel count " + std::to_string(q.kernels.size()) + " != out*in " +
                             std::to_string(q.shape.kernel_pairs()));
    }
    if (q.biases.size() != q.shape.out_channels) throw InvariantError(where + "bias count != out_channels");
    for (std::size_t k = 0; k < q.kernels.size(); ++k)
        for (auto v : q.kernels[k].mask)
            if (!mask_value_valid(v, q.mask_bits)) {
                throw InvariantError(where + "mask value " + std::to_string(v) + " in kernel " + std::to_string(k) +
                                     " outside the " + std::to_string(q.mask_bits) + "-bit range");
            }
    for (auto b : q.biases)
        if (b < kBiasMin || b > kBiasMax) throw InvariantError(where + "bias " + std::to_string(b) + " outside 12 bits");
}

inline KernelApprox quantize_kernel_1bit(const KernelValues& w, QuantPolicy policy) {
    KernelApprox r;
    if (policy == QuantPolicy::XnorAbsMean) {
        double sum = 0.0;
        for (std::size_t l = 0; l < 9; ++l) {
            r.mask[l] = w[l] > 0.0 ? 1 : -1;
            sum += std::abs(w[l]);
        }
        r.alpha = sum / 9.0;
        return r;
    }
    double t = 0.0;
    for (double v : w) t += v;
    t /= 9.0;
    double dev = 0.0;
    for (std::size_t l = 0; l < 9; ++l) {
        r.mask[l] = w[l] > t ? 1 : -1;
        dev += std::abs(w[l] - t);
    }
    r.alpha = dev / 9.0;
    return r;
}

inline KernelApprox quantize_kernel_multibit(const KernelValues& w, int mask_bits) {
    if (mask_bits < 2 || mask_bits > kMaxMaskBits) {
        throw DomainError("multi-bit mask width must be in [2,5], got " + std::to_string(mask_bits));
    }
    const int lim = mask_limit(mask_bits);
    KernelApprox r;
    double peak = 0.0;
    for (double v : w) peak = std::max(peak, std::abs(v));
    if (peak == 0.0) return r;
    r.alpha = peak / lim;
    for (std::size_t l = 0; l < 9; ++l) {
        const double q = std::round(w[l] / r.alpha);
        r.mask[l] = static_cast<std::int8_t>(std::clamp(q, static_cast<double>(-lim), static_cast<double>(lim)));
    }
    return r;
}

inline KernelApprox quantize_kernel(const KernelValues& w, int mask_bits, QuantPolicy policy) {
    check_mask_bits(mask_bits);
    return mask_bits == 1 ? quantize_kernel_1bit(w, policy) : quantize_kernel_multibit(w, mask_bits);
}

struct ShiftChoice {
    int shift = kMinShift;
    bool saturated = false;   // max alpha >= 2^7
    bool degenerate = false;  // every alpha is zero
};

/// Smallest e in [-8, 7] with max(alphas) < 2^e.
inline ShiftChoice compute_layer_shift(std::span<const double> alphas) {
    double peak = 0.0;
    for (double a : alphas) {
        if (!(a >= 0.0) || !std::isfinite(a)) throw DomainError("compute_layer_shift: alphas must be finite and >= 0");
        peak = std::max(peak, a);
    }
    ShiftChoice c;
    if (peak == 0.0) {
        c.degenerate = true;
        return c;
    }
    for (int e = kMinShift; e <= kMaxShift; ++e) {
        if (peak < std::ldexp(1.0, e)) {
            c.shift = e;
            return c;
        }
    }
    c.shift = kMaxShift;
    c.saturated = true;
    return c;
}

/// a = clamp(round(alpha * 2^(8 - e)), 0, 255).
inline std::uint8_t quantize_scalar(double alpha, int shift) {
    if (!(alpha >= 0.0)) throw DomainError("quantize_scalar: alpha must be >= 0");
    const double q = std::round(std::ldexp(alpha, kScalarBits - shift));
    return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline double dequantize_scalar(std::uint8_t a, int shift) { return std::ldexp(static_cast<double>(a), shift - kScalarBits); }

struct BiasCode {
    std::int16_t value = 0;
    bool saturated = false;
};

inline BiasCode quantize_bias(double b, int shift) {
    if (!std::isfinite(b)) throw DomainError("quantize_bias: bias must be finite");
    const double q = std::round(std::ldexp(b, kScalarBits - shift));
    BiasCode c;
    c.saturated = q < kBiasMin || q > kBiasMax;
    c.value = static_cast<std::int16_t>(std::clamp(q, static_cast<double>(kBiasMin), static_cast<double>(kBiasMax)));
    return c;
}

inline double dequantize_bias(std::int16_t q, int shift) { return std::ldexp(static_cast<double>(q), shift - kScalarBits); }

struct QuantizationStats {
    bool degenerate = false;
    bool shift_saturated = false;
    std::size_t scalar_saturations = 0;
    std::size_t bias_saturations = 0;
};

struct LayerQuantization {
    QuantizedLayer layer;
    QuantizationStats stats;
};

inline KernelValues kernel_slice(const Tensor& weights, std::size_t pair) {
    KernelValues k;
    std::copy_n(weights.data().begin() + static_cast<std::ptrdiff_t>(pair * 9), 9, k.begin());
    return k;
}

/// Per-kernel alpha and mask for every (out, in) pair; the first half of quantize_layer.
inline std::vector<KernelApprox> approximate_kernels(const Tensor& weights, int mask_bits, QuantPolicy policy) {
    if (weights.rank() != 4 || weights.dim(2) != 3 || weights.dim(3) != 3) {
        throw ShapeError("quantize_layer: weights must be [out,in,3,3], got " + shape_to_string(weights.shape()));
    }
    const std::size_t pairs = weights.dim(0) * weights.dim(1);
    std::vector<KernelApprox> approx(pairs);
    for (std::size_t p = 0; p < pairs; ++p) approx[p] = quantize_kernel(kernel_slice(weights, p), mask_bits, policy);
    return approx;
}

/// Quantizes a [out,in,3,3] weight tensor and its biases. When `forced_shift` is set
/// it replaces the layer's own exponent (used for a network-wide shared shift).
inline LayerQuantization quantize_layer(const Tensor& weights, std::span<const double> biases, int mask_bits,
                                        QuantPolicy policy, ConvLayerShape shape = {},
                                        std::optional<int> forced_shift = std::nullopt) {
    check_mask_bits(mask_bits);
    const auto approx = approximate_kernels(weights, mask_bits, policy);
    if (biases.size() != weights.dim(0)) throw ShapeError("quantize_layer: bias count != out_channels");
    shape.out_channels = weights.dim(0);
    shape.in_channels = weights.dim(1);

    std::vector<double> alphas(approx.size());
    for (std::size_t p = 0; p < approx.size(); ++p) alphas[p] = approx[p].alpha;

    LayerQuantization r;
    const ShiftChoice choice = compute_layer_shift(alphas);
    r.stats.degenerate = choice.degenerate;
    r.stats.shift_saturated = choice.saturated;
    const int e = forced_shift ? std::clamp(*forced_shift, kMinShift, kMaxShift) : choice.shift;

    QuantizedLayer& q = r.layer;
    q.shape = shape;
    q.mask_bits = mask_bits;
    q.shift = e;
    q.kernels.resize(approx.size());
    for (std::size_t p = 0; p < approx.size(); ++p) {
        const double scaled = std::round(std::ldexp(approx[p].alpha, kScalarBits - e));
        if (scaled > 255.0) ++r.stats.scalar_saturations;
        q.kernels[p].scalar = quantize_scalar(approx[p].alpha, e);
        q.kernels[p].mask = approx[p].mask;
        // Multi-bit masks are re-rounded against the stored scale so the reconstruction sits on its grid.
        const double alpha_hat = dequantize_scalar(q.kernels[p].scalar, e);
        if (mask_bits >= 2 && alpha_hat > 0.0) {
            const double lim = mask_limit(mask_bits);
            for (std::size_t l = 0; l < 9; ++l) {
                const double m = std::round(weights[p * 9 + l] / alpha_hat);
                q.kernels[p].mask[l] = static_cast<std::int8_t>(std::clamp(m, -lim, lim));
            }
        }
    }
    q.biases.resize(biases.size());
    for (std::size_t o = 0; o < biases.size(); ++o) {
        const BiasCode b = quantize_bias(biases[o], e);
        if (b.saturated) ++r.stats.bias_saturations;
        q.biases[o] = b.value;
    }
    return r;
}

struct DequantizedLayer {
    Tensor weights;
    std::vector<double> biases;
};

inline DequantizedLayer dequantize_layer(const QuantizedLayer& q) {
    DequantizedLayer d{Tensor({q.shape.out_channels, q.shape.in_channels, 3, 3}), std::vector<double>(q.biases.size())};
    for (std::size_t p = 0; p < q.kernels.size(); ++p) {
        const double alpha = dequantize_scalar(q.kernels[p].scalar, q.shift);
        for (std::size_t l = 0; l < 9; ++l) d.weights[p * 9 + l] = alpha * q.kernels[p].mask[l];
    }
    for (std::size_t o = 0; o < q.biases.size(); ++o) d.biases[o] = dequantize_bias(q.biases[o], q.shift);
    return d;
}

}  // namespace qcnn
