#pragma once

// Dense channels x height x width tensors and the forward operators built on them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qcnn/error.hpp"

namespace qcnn {

inline std::string shape_to_string(std::span<const std::size_t> shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_to_string(shape_));
        }
    }

    [[nodiscard]] const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::vector<double>& values() noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    const double& operator[](std::size_t i) const noexcept { return data_[i]; }

    // CHW accessors; only meaningful for rank-3 tensors.
    [[nodiscard]] std::size_t channels() const { return shape_.at(0); }
    [[nodiscard]] std::size_t height() const { return shape_.at(1); }
    [[nodiscard]] std::size_t width() const { return shape_.at(2); }

    double& at(std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    const double& at(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    [[nodiscard]] Tensor reshaped(std::vector<std::size_t> shape) const {
        return Tensor(std::move(shape), data_);
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

    static std::size_t element_count(std::span<const std::size_t> shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Geometry of one 3x3 convolution layer.
struct ConvLayerShape {
    static constexpr std::size_t kKernel = 3;
    static constexpr std::size_t kKernelArea = kKernel * kKernel;  // z

    std::size_t out_channels = 1;
    std::size_t in_channels = 1;
    std::size_t stride = 1;
    std::size_t padding = 1;

    [[nodiscard]] std::size_t kernel_pairs() const noexcept { return out_channels * in_channels; }
    [[nodiscard]] std::size_t weight_count() const noexcept { return kernel_pairs() * kKernelArea; }

    [[nodiscard]] std::size_t output_extent(std::size_t in) const {
        const std::size_t padded = in + 2 * padding;
        if (padded < kKernel) throw ShapeError("conv input extent too small for a 3x3 kernel");
        return (padded - kKernel) / stride + 1;
    }

    friend bool operator==(const ConvLayerShape&, const ConvLayerShape&) = default;
};

inline void check_chw(const Tensor& t, const char* what) {
    if (t.rank() != 3) {
        throw ShapeError(std::string(what) + ": expected a CxHxW tensor, got " + shape_to_string(t.shape()));
    }
}

inline Tensor conv2d(const Tensor& input, const Tensor& weights, std::span<const double> bias,
                     const ConvLayerShape& shape) {
    check_chw(input, "conv2d");
    if (shape.out_channels == 0 || shape.in_channels == 0 || shape.stride == 0) {
        throw ShapeError("conv2d: channel counts and stride must be positive");
    }
    if (input.channels() != shape.in_channels) {
        throw ShapeError("conv2d: input has " + std::to_string(input.channels()) + " channels, layer expects " +
                         std::to_string(shape.in_channels));
    }
    const std::vector<std::size_t> expect{shape.out_channels, shape.in_channels, 3, 3};
    if (weights.shape() != expect) {
        throw ShapeError("conv2d: weights shape " + shape_to_string(weights.shape()) + " != " +
                         shape_to_string(expect));
    }
    if (bias.size() != shape.out_channels) throw ShapeError("conv2d: bias length mismatch");

    const std::size_t in_h = input.height(), in_w = input.width();
    const std::size_t out_h = shape.output_extent(in_h), out_w = shape.output_extent(in_w);
    const auto pad = static_cast<std::ptrdiff_t>(shape.padding);
    const auto stride = static_cast<std::ptrdiff_t>(shape.stride);

    Tensor out({shape.out_channels, out_h, out_w});
    for (std::size_t o = 0; o < shape.out_channels; ++o) {
        double* dst = &out.at(o, 0, 0);
        std::fill(dst, dst + out_h * out_w, bias[o]);
        for (std::size_t i = 0; i < shape.in_channels; ++i) {
            const double* src = &input.at(i, 0, 0);
            const double* k = &weights[(o * shape.in_channels + i) * 9];
            for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
                for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
                    const double w = k[ky * 3 + kx];
                    if (w == 0.0) continue;
                    for (std::size_t y = 0; y < out_h; ++y) {
                        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) * stride + ky - pad;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in_h)) continue;
                        const double* row = src + static_cast<std::size_t>(sy) * in_w;
                        double* orow = dst + y * out_w;
                        // Valid x range: 0 <= x*stride + kx - pad < in_w.
                        std::ptrdiff_t x_lo = 0;
                        while (x_lo * stride + kx - pad < 0) ++x_lo;
                        std::ptrdiff_t x_hi = static_cast<std::ptrdiff_t>(out_w);
                        while (x_hi > x_lo && (x_hi - 1) * stride + kx - pad >= static_cast<std::ptrdiff_t>(in_w)) --x_hi;
                        if (stride == 1) {
                            const std::ptrdiff_t off = kx - pad;
                            for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) orow[x] += w * row[x + off];
                        } else {
                            for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) orow[x] += w * row[x * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    return out;
}

inline Tensor relu(Tensor input) {
    for (double& v : input.data()) v = v > 0.0 ? v : 0.0;
    return input;
}

inline Tensor maxpool2x2(const Tensor& input) {
    check_chw(input, "maxpool2x2");
    const std::size_t h = input.height(), w = input.width();
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_to_string(input.shape()));
    }
    Tensor out({input.channels(), h / 2, w / 2});
    for (std::size_t c = 0; c < input.channels(); ++c)
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t x = 0; x < w / 2; ++x) {
                out.at(c, y, x) = std::max({input.at(c, 2 * y, 2 * x), input.at(c, 2 * y, 2 * x + 1),
                                            input.at(c, 2 * y + 1, 2 * x), input.at(c, 2 * y + 1, 2 * x + 1)});
            }
    return out;
}

/// y = W x + b with W stored row-major as [out, in].
inline std::vector<double> fully_connected(std::span<const double> input, const Tensor& weights,
                                           std::span<const double> bias) {
    if (weights.rank() != 2 || weights.dim(1) != input.size() || weights.dim(0) != bias.size()) {
        throw ShapeError("fully_connected: weights " + shape_to_string(weights.shape()) + " incompatible with input " +
                         std::to_string(input.size()) + " / bias " + std::to_string(bias.size()));
    }
    const std::size_t n_out = weights.dim(0), n_in = weights.dim(1);
    std::vector<double> y(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
        const double* row = &weights[o * n_in];
        double acc = 0.0;
        for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * input[i];
        y[o] = acc + bias[o];
    }
    return y;
}

/// Rotates counter-clockwise by quarter_turns * 90 degrees (taken mod 4).
inline Tensor rotate90(const Tensor& image, int quarter_turns) {
    check_chw(image, "rotate90");
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return image;
    const std::size_t c_n = image.channels(), h = image.height(), w = image.width();
    const bool swap = (k % 2) == 1;
    Tensor out({c_n, swap ? w : h, swap ? h : w});
    const std::size_t oh = out.height(), ow = out.width();
    for (std::size_t c = 0; c < c_n; ++c)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                switch (k) {
                    case 1: out.at(c, y, x) = image.at(c, x, w - 1 - y); break;
                    case 2: out.at(c, y, x) = image.at(c, h - 1 - y, w - 1 - x); break;
                    default: out.at(c, y, x) = image.at(c, h - 1 - x, y); break;
                }
            }
    return out;
}

/// Axis-aligned rectangle in normalized image coordinates, [x0, x1) x [y0, y1) within [0,1]^2.
struct NormRect {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 1.0;
    double y1 = 1.0;

    friend bool operator==(const NormRect&, const NormRect&) = default;
};

struct PixelRect {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    [[nodiscard]] std::size_t width() const noexcept { return x1 - x0; }
    [[nodiscard]] std::size_t height() const noexcept { return y1 - y0; }
    [[nodiscard]] std::size_t area() const noexcept { return width() * height(); }
};

/// Rounds a normalized rectangle onto a height x width pixel grid (round half away from zero).
inline PixelRect to_pixels(const NormRect& r, std::size_t height, std::size_t width) {
    auto inside = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!inside(r.x0) || !inside(r.x1) || !inside(r.y0) || !inside(r.y1) || r.x1 < r.x0 || r.y1 < r.y0) {
        throw DomainError("rectangle outside the unit square");
    }
    auto snap = [](double v, std::size_t n) { return static_cast<std::size_t>(std::round(v * static_cast<double>(n))); };
    PixelRect p{snap(r.x0, width), snap(r.y0, height), snap(r.x1, width), snap(r.y1, height)};
    if (p.x1 <= p.x0 || p.y1 <= p.y0) {
        throw DegenerateError("rectangle (" + std::to_string(r.x0) + "," + std::to_string(r.y0) + "," +
                              std::to_string(r.x1) + "," + std::to_string(r.y1) + ") is empty on a " +
                              std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    return p;
}

inline Tensor crop(const Tensor& image, const NormRect& rect) {
    check_chw(image, "crop");
    const PixelRect p = to_pixels(rect, image.height(), image.width());
    Tensor out({image.channels(), p.height(), p.width()});
    for (std::size_t c = 0; c < image.channels(); ++c)
        for (std::size_t y = 0; y < p.height(); ++y)
            for (std::size_t x = 0; x < p.width(); ++x) out.at(c, y, x) = image.at(c, p.y0 + y, p.x0 + x);
    return out;
}

/// Bilinear resize with half-pixel-centred sampling and edge clamping.
inline Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    check_chw(image, "resize_bilinear");
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: target dims must be positive");
    const std::size_t in_h = image.height(), in_w = image.width();
    if (in_h == out_h && in_w == out_w) return image;

    struct Tap {
        std::size_t lo, hi;
        double frac;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t i = 0; i < out; ++i) {
            double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(src));
            t[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
        }
        return t;
    };
    const auto ty = taps(in_h, out_h);
    const auto tx = taps(in_w, out_w);

    Tensor out({image.channels(), out_h, out_w});
    for (std::size_t c = 0; c < image.channels(); ++c)
        for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t x = 0; x < out_w; ++x) {
                const double a = image.at(c, ty[y].lo, tx[x].lo), b = image.at(c, ty[y].lo, tx[x].hi);
                const double d = image.at(c, ty[y].hi, tx[x].lo), e = image.at(c, ty[y].hi, tx[x].hi);
                const double top = a + (b - a) * tx[x].frac;
                const double bot = d + (e - d) * tx[x].frac;
                out.at(c, y, x) = top + (bot - top) * ty[y].frac;
            }
    return out;
}

struct SoftmaxLoss {
    double loss = 0.0;
    std::vector<double> probs;
};

inline SoftmaxLoss softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) {
        throw DomainError("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                          std::to_string(logits.size()) + " classes");
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    SoftmaxLoss r;
    r.probs.resize(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        r.probs[i] = std::exp(logits[i] - peak);
        sum += r.probs[i];
    }
    for (double& p : r.probs) p /= sum;
    // log p[label] computed from the shifted logit avoids log(0) when p underflows.
    r.loss = -((logits[label] - peak) - std::log(sum));
    return r;
}

}  // namespace qcnn
