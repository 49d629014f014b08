#pragma once

// Procedurally generated image sets so every experiment runs without downloads.
//
// Shapes: ten classes of 3-channel images (filled disc, square, triangle,
// horizontal / vertical / diagonal stripes, checkerboard, plus sign, ring, dot
// grid) with random colours, placement, scale and pixel noise.
//
// Retrieval scenes: each group is one random composition of shapes over a
// gradient background; its members are views of that scene under a quarter
// turn, an off-centre crop and a brightness change, so relevance holds by
// construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qcnn/engine.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn::synth {

inline constexpr std::size_t kShapeClasses = 10;

using Rgb = std::array<double, 3>;

namespace detail {

inline Rgb random_colour(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return {u(rng), u(rng), u(rng)};
}

inline double luminance(const Rgb& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

/// Foreground/background pair with enough contrast to keep the pattern visible.
inline std::pair<Rgb, Rgb> contrasting(std::mt19937_64& rng) {
    for (;;) {
        Rgb fg = random_colour(rng), bg = random_colour(rng);
        if (std::abs(luminance(fg) - luminance(bg)) > 0.3) return {fg, bg};
    }
}

/// Coverage in [0,1] of the class pattern at normalized offset (u, v) from the centre.
inline double pattern(std::size_t cls, double u, double v, double size, double freq, double phase) {
    const double r = std::hypot(u, v);
    switch (cls) {
        case 0: return r < size ? 1.0 : 0.0;                                            // disc
        case 1: return std::max(std::abs(u), std::abs(v)) < size * 0.85 ? 1.0 : 0.0;    // square
        case 2: return (v < size * 0.8 && v > -size * 0.8 && std::abs(u) < (v + size * 0.8) * 0.6) ? 1.0 : 0.0;  // triangle
        case 3: return std::sin(v * freq + phase) > 0.0 ? 1.0 : 0.0;                    // horizontal stripes
        case 4: return std::sin(u * freq + phase) > 0.0 ? 1.0 : 0.0;                    // vertical stripes
        case 5: return std::sin((u + v) * freq * 0.75 + phase) > 0.0 ? 1.0 : 0.0;       // diagonal stripes
        case 6: return (std::sin(u * freq + phase) * std::sin(v * freq + phase)) > 0.0 ? 1.0 : 0.0;  // checkerboard
        case 7: return (std::abs(u) < size * 0.3 || std::abs(v) < size * 0.3) && std::max(std::abs(u), std::abs(v)) < size ? 1.0 : 0.0;  // plus
        case 8: return (r < size && r > size * 0.55) ? 1.0 : 0.0;                        // ring
        default: {                                                                       // dot grid
            const double cu = std::cos(u * freq + phase), cv = std::cos(v * freq + phase);
            return (cu > 0.6 && cv > 0.6) ? 1.0 : 0.0;
        }
    }
}

}  // namespace detail

inline Tensor shape_image(std::size_t cls, std::mt19937_64& rng, std::size_t size = 32) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto [fg, bg] = detail::contrasting(rng);
    const double cx = 0.5 + (u(rng) - 0.5) * 0.3, cy = 0.5 + (u(rng) - 0.5) * 0.3;
    const double scale = 0.25 + u(rng) * 0.15;
    const double freq = 14.0 + u(rng) * 10.0, phase = u(rng) * 6.283185307179586;
    std::normal_distribution<double> noise(0.0, 0.05);
    Tensor img({3, size, size});
    const double n = static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double pu = (static_cast<double>(x) + 0.5) / n - cx, pv = (static_cast<double>(y) + 0.5) / n - cy;
            const double a = detail::pattern(cls, pu, pv, scale, freq, phase);
            for (std::size_t c = 0; c < 3; ++c)
                img.at(c, y, x) = std::clamp(a * fg[c] + (1.0 - a) * bg[c] + noise(rng), 0.0, 1.0);
        }
    return img;
}

/// `count` images cycling through the ten classes.
inline std::vector<LabeledImage> shapes_dataset(std::size_t count, std::uint64_t seed, std::size_t size = 32) {
    std::mt19937_64 rng(seed);
    std::vector<LabeledImage> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t cls = i % kShapeClasses;
        out.push_back({shape_image(cls, rng, size), cls});
    }
    return out;
}

struct NamedImage {
    std::string id;
    Tensor image;
};

namespace detail {

struct Placed {
    std::size_t cls;
    Rgb colour;
    double cx, cy, size, freq, phase;
};

inline Tensor render_scene(const std::vector<Placed>& items, const Rgb& bg0, const Rgb& bg1, std::size_t size,
                           double brightness, std::mt19937_64& noise_rng) {
    std::normal_distribution<double> noise(0.0, 0.03);
    Tensor img({3, size, size});
    const double n = static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double px = (static_cast<double>(x) + 0.5) / n, py = (static_cast<double>(y) + 0.5) / n;
            Rgb c;
            for (std::size_t k = 0; k < 3; ++k) c[k] = bg0[k] * (1.0 - py) + bg1[k] * py;
            for (const auto& it : items) {
                const double du = px - it.cx, dv = py - it.cy;
                if (std::max(std::abs(du), std::abs(dv)) > it.size * 1.2) continue;
                const double a = pattern(it.cls, du, dv, it.size, it.freq, it.phase);
                for (std::size_t k = 0; k < 3; ++k) c[k] = a * it.colour[k] + (1.0 - a) * c[k];
            }
            for (std::size_t k = 0; k < 3; ++k) img.at(k, y, x) = std::clamp(c[k] * brightness + noise(noise_rng), 0.0, 1.0);
        }
    return img;
}

}  // namespace detail

/// `groups` scenes, `per_group` views each. Ids follow the "group*100 + view" convention
/// (e.g. 1000, 1001, 1002 for the first group when base is 10).
inline std::vector<NamedImage> retrieval_corpus(std::size_t groups, std::size_t per_group, std::uint64_t seed,
                                                std::size_t size = 64, std::size_t first_group = 10) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_cls(0, kShapeClasses - 1);
    std::vector<NamedImage> out;
    for (std::size_t g = 0; g < groups; ++g) {
        std::vector<detail::Placed> items;
        const std::size_t count = 3 + static_cast<std::size_t>(u(rng) * 3.0);
        for (std::size_t i = 0; i < count; ++i) {
            items.push_back({pick_cls(rng), detail::random_colour(rng), 0.15 + u(rng) * 0.7, 0.15 + u(rng) * 0.7,
                             0.1 + u(rng) * 0.12, 40.0 + u(rng) * 30.0, u(rng) * 6.283185307179586});
        }
        const Rgb bg0 = detail::random_colour(rng), bg1 = detail::random_colour(rng);
        const Tensor base = detail::render_scene(items, bg0, bg1, size, 1.0, rng);
        for (std::size_t v = 0; v < per_group; ++v) {
            Tensor view;
            switch (v % 3) {
                case 0: view = base; break;
                case 1: {
                    const int turns = 1 + static_cast<int>(u(rng) * 3.0);
                    view = rotate90(detail::render_scene(items, bg0, bg1, size, 0.8 + u(rng) * 0.4, rng), turns);
                    break;
                }
                default: {
                    const double w = 0.7 + u(rng) * 0.2;
                    const double x0 = u(rng) * (1.0 - w), y0 = u(rng) * (1.0 - w);
                    const Tensor lit = detail::render_scene(items, bg0, bg1, size, 0.8 + u(rng) * 0.4, rng);
                    view = resize_bilinear(crop(lit, {x0, y0, x0 + w, y0 + w}), size, size);
                    break;
                }
            }
            out.push_back({std::to_string((first_group + g) * 100 + v), std::move(view)});
        }
    }
    return out;
}

}  // namespace qcnn::synth
