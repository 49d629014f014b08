#pragma once

// Nested invariance pooling (NIP) and its region variant (RNIP), plus 8-bit and
// 1-bit descriptor quantization.
//
// Pooling chain, per channel c:
//   u[r,j,c] = (mean over pixels p of ROI j of sqrt(x_p))^2   order-1/2 generalized mean
//   v[r,c]   = mean over ROIs j of u[r,j,c]
//   d[c]     = max over rotations r of v[r,c]
// followed by L2 normalization.
//
// NIP builds the ROIs from a grid pyramid over one feature map per rotation.
// RNIP crops the image with the same grid rule before the network and uses each
// crop's whole feature map as one ROI of the concatenated set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qcnn/engine.hpp"
#include "qcnn/error.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn {

/// Pyramid of l x l equal tilings of the unit square, one per level.
struct RoiGrid {
    std::vector<std::size_t> levels{1};

    [[nodiscard]] std::vector<NormRect> rois() const {
        std::vector<NormRect> r;
        for (std::size_t l : levels) {
            if (l == 0) throw DomainError("ROI level must be positive");
            const double step = 1.0 / static_cast<double>(l);
            for (std::size_t gy = 0; gy < l; ++gy)
                for (std::size_t gx = 0; gx < l; ++gx) {
                    // The last tile snaps to 1 exactly so tilings cover the square.
                    const double x1 = gx + 1 == l ? 1.0 : static_cast<double>(gx + 1) * step;
                    const double y1 = gy + 1 == l ? 1.0 : static_cast<double>(gy + 1) * step;
                    r.push_back({static_cast<double>(gx) * step, static_cast<double>(gy) * step, x1, y1});
                }
        }
        return r;
    }

    [[nodiscard]] std::size_t count() const {
        std::size_t n = 0;
        for (std::size_t l : levels) n += l * l;
        return n;
    }
};

/// Parses "1,2,3" into levels.
inline RoiGrid parse_levels(std::string_view text) {
    RoiGrid g;
    g.levels.clear();
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = std::min(text.find(',', start), text.size());
        const std::string item(text.substr(start, comma - start));
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size() || item.empty() || v == 0) throw FormatError("bad level list '" + std::string(text) + "'");
        g.levels.push_back(v);
        if (comma == text.size()) break;
        start = comma + 1;
    }
    return g;
}

enum class Precision : std::uint8_t { Real = 0, Byte = 1, Bit = 2 };

inline std::string_view to_string(Precision p) {
    switch (p) {
        case Precision::Real: return "real";
        case Precision::Byte: return "byte";
        case Precision::Bit: return "bit";
    }
    return "?";
}

inline Precision parse_precision(std::string_view s) {
    if (s == "real") return Precision::Real;
    if (s == "byte") return Precision::Byte;
    if (s == "bit") return Precision::Bit;
    throw DomainError("unknown descriptor precision '" + std::string(s) + "'");
}

/// Image signature. Real descriptors use `values`; byte and bit descriptors use `codes`
/// (0..255, or 0/1) with `meta` holding the byte scale or the binarization threshold.
struct Descriptor {
    Precision precision = Precision::Real;
    std::vector<double> values;
    std::vector<std::uint8_t> codes;
    double meta = 0.0;

    [[nodiscard]] std::size_t dim() const noexcept { return precision == Precision::Real ? values.size() : codes.size(); }
    friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

/// Feature maps of one rotation, each pooled over the same ROI grid.
struct RotationMaps {
    std::vector<Tensor> maps;
    RoiGrid grid;
};

inline void l2_normalize(std::vector<double>& v) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    if (ss <= 0.0) return;
    const double inv = 1.0 / std::sqrt(ss);
    for (double& x : v) x *= inv;
}

/// Pre-normalization pooled vector; see nip_pool.
inline std::vector<double> nip_pool_raw(std::span<const RotationMaps> rotations) {
    if (rotations.empty()) throw DomainError("nip_pool: no rotations");
    std::size_t channels = 0;
    std::vector<double> d;
    for (std::size_t r = 0; r < rotations.size(); ++r) {
        const auto& rot = rotations[r];
        if (rot.maps.empty()) throw DomainError("nip_pool: rotation " + std::to_string(r) + " has no feature maps");
        const auto rects = rot.grid.rois();
        std::vector<double> v;
        std::size_t roi_count = 0;
        for (const auto& fm : rot.maps) {
            check_chw(fm, "nip_pool");
            if (channels == 0) {
                channels = fm.channels();
                d.assign(channels, 0.0);
            }
            if (fm.channels() != channels) throw ShapeError("nip_pool: feature maps disagree on channel count");
            if (v.empty()) v.assign(channels, 0.0);
            for (double x : fm.data())
                if (x < 0.0) throw DomainError("nip_pool: negative activation (expected post-ReLU maps)");
            for (const auto& rect : rects) {
                const PixelRect p = to_pixels(rect, fm.height(), fm.width());
                const double inv_area = 1.0 / static_cast<double>(p.area());
                for (std::size_t c = 0; c < channels; ++c) {
                    double s = 0.0;
                    for (std::size_t y = p.y0; y < p.y1; ++y)
                        for (std::size_t x = p.x0; x < p.x1; ++x) s += std::sqrt(fm.at(c, y, x));
                    const double m = s * inv_area;
                    v[c] += m * m;
                }
                ++roi_count;
            }
        }
        for (std::size_t c = 0; c < channels; ++c) {
            const double avg = v[c] / static_cast<double>(roi_count);
            d[c] = r == 0 ? avg : std::max(d[c], avg);
        }
    }
    return d;
}

inline Descriptor nip_pool(std::span<const RotationMaps> rotations) {
    Descriptor out;
    out.values = nip_pool_raw(rotations);
    l2_normalize(out.values);
    return out;
}

struct ExtractStats {
    std::size_t forward_passes = 0;
    std::size_t crops = 0;
};

namespace detail {

inline Tensor fit_input(const Engine& engine, const Tensor& image) {
    const Shape3& in = engine.network().input();
    check_chw(image, "descriptor input");
    if (image.channels() != in.channels) throw ShapeError("image channel count does not match the network");
    return resize_bilinear(image, in.height, in.width);
}

inline void require_square(const Engine& engine) {
    const Shape3& in = engine.network().input();
    if (in.height != in.width) throw ShapeError("rotation orbit needs a square network input");
}

}  // namespace detail

inline Descriptor extract_nip(const Engine& engine, const Tensor& image, const RoiGrid& rois = {{1, 2, 3}},
                              ExtractStats* stats = nullptr) {
    detail::require_square(engine);
    const Tensor base = detail::fit_input(engine, image);
    std::vector<RotationMaps> rotations(4);
    for (int r = 0; r < 4; ++r) {
        rotations[static_cast<std::size_t>(r)].maps.push_back(engine.features(rotate90(base, r)));
        rotations[static_cast<std::size_t>(r)].grid = rois;
        if (stats) ++stats->forward_passes;
    }
    return nip_pool(rotations);
}

inline Descriptor extract_rnip(const Engine& engine, const Tensor& image, const RoiGrid& crop_levels = {{1, 2}},
                               bool rotations = true, ExtractStats* stats = nullptr) {
    if (rotations) detail::require_square(engine);
    check_chw(image, "extract_rnip");
    const auto rects = crop_levels.rois();
    const std::size_t n_rot = rotations ? 4 : 1;
    std::vector<RotationMaps> sets(n_rot);
    for (auto& s : sets) s.grid = RoiGrid{{1}};
    for (const auto& rect : rects) {
        const Tensor sub = detail::fit_input(engine, crop(image, rect));
        if (stats) ++stats->crops;
        for (std::size_t r = 0; r < n_rot; ++r) {
            sets[r].maps.push_back(engine.features(rotate90(sub, static_cast<int>(r))));
            if (stats) ++stats->forward_passes;
        }
    }
    return nip_pool(sets);
}

/// bytes = round(255 x / max x); the max is kept as the scale.
inline Descriptor quantize_descriptor(const Descriptor& d) {
    if (d.precision != Precision::Real) throw DomainError("quantize_descriptor needs a real descriptor");
    Descriptor q;
    q.precision = Precision::Byte;
    q.codes.resize(d.values.size());
    double scale = 0.0;
    for (double x : d.values) {
        if (x < 0.0) throw DomainError("quantize_descriptor: negative entry");
        scale = std::max(scale, x);
    }
    q.meta = scale;
    if (scale == 0.0) return q;
    for (std::size_t i = 0; i < d.values.size(); ++i)
        q.codes[i] = static_cast<std::uint8_t>(std::clamp(std::round(255.0 * d.values[i] / scale), 0.0, 255.0));
    return q;
}

inline std::vector<double> dequantize_descriptor(const Descriptor& q) {
    if (q.precision != Precision::Byte) throw DomainError("dequantize_descriptor needs a byte descriptor");
    std::vector<double> v(q.codes.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(q.codes[i]) * q.meta / 255.0;
    return v;
}

/// bit = 1 where the entry exceeds the descriptor mean.
inline Descriptor binarize_descriptor(const Descriptor& d) {
    if (d.precision != Precision::Real) throw DomainError("binarize_descriptor needs a real descriptor");
    Descriptor b;
    b.precision = Precision::Bit;
    // Offset by the minimum so a constant descriptor yields its value as the exact mean.
    double mean = 0.0;
    if (!d.values.empty()) {
        const double lo = *std::min_element(d.values.begin(), d.values.end());
        double excess = 0.0;
        for (double x : d.values) excess += x - lo;
        mean = lo + excess / static_cast<double>(d.values.size());
    }
    b.meta = mean;
    b.codes.resize(d.values.size());
    for (std::size_t i = 0; i < d.values.size(); ++i) b.codes[i] = d.values[i] > mean ? 1 : 0;
    return b;
}

inline Descriptor convert(const Descriptor& real, Precision p) {
    switch (p) {
        case Precision::Real: return real;
        case Precision::Byte: return quantize_descriptor(real);
        case Precision::Bit: return binarize_descriptor(real);
    }
    return real;
}

}  // namespace qcnn
