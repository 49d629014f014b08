#pragma once

// Independent reference computations the library is checked against. Written as
// plain loops over the definitions, sharing no code with the library beyond Tensor.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "qcnn/tensor.hpp"

namespace oracle {

inline qcnn::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                                  double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    qcnn::Tensor t(std::move(shape));
    for (double& v : t.data()) v = u(rng);
    return t;
}

/// out[o][y][x] = b[o] + sum_i sum_ky sum_kx w[o][i][ky][kx] * in[i][y*s+ky-p][x*s+kx-p]
inline qcnn::Tensor conv(const qcnn::Tensor& in, const qcnn::Tensor& w, const std::vector<double>& b, int stride,
                         int pad) {
    const int C = static_cast<int>(in.dim(0)), H = static_cast<int>(in.dim(1)), W = static_cast<int>(in.dim(2));
    const int O = static_cast<int>(w.dim(0));
    const int OH = (H + 2 * pad - 3) / stride + 1, OW = (W + 2 * pad - 3) / stride + 1;
    qcnn::Tensor out({static_cast<std::size_t>(O), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
    for (int o = 0; o < O; ++o)
        for (int y = 0; y < OH; ++y)
            for (int x = 0; x < OW; ++x) {
                double acc = b[o];
                for (int i = 0; i < C; ++i)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sy = y * stride + ky - pad, sx = x * stride + kx - pad;
                            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                            acc += w[((o * C + i) * 3 + ky) * 3 + kx] * in[(i * H + sy) * W + sx];
                        }
                out[(o * OH + y) * OW + x] = acc;
            }
    return out;
}

inline qcnn::Tensor pool(const qcnn::Tensor& in) {
    const std::size_t C = in.dim(0), H = in.dim(1) / 2, W = in.dim(2) / 2;
    qcnn::Tensor out({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, in.at(c, 2 * y + dy, 2 * x + dx));
                out.at(c, y, x) = m;
            }
    return out;
}

inline std::vector<double> fc(const std::vector<double>& x, const qcnn::Tensor& w, const std::vector<double>& b) {
    std::vector<double> y(b);
    for (std::size_t o = 0; o < y.size(); ++o)
        for (std::size_t i = 0; i < x.size(); ++i) y[o] += w[o * x.size() + i] * x[i];
    return y;
}

/// min over all 2^9 sign masks M and real alpha of ||w - alpha M||^2; for a fixed mask the
/// optimum is alpha = <w, M> / 9.
inline double best_binary_objective(const std::array<double, 9>& w) {
    double best = std::numeric_limits<double>::infinity();
    for (int bits = 0; bits < 512; ++bits) {
        std::array<double, 9> m{};
        double dot = 0.0;
        for (int l = 0; l < 9; ++l) {
            m[l] = (bits >> l) & 1 ? 1.0 : -1.0;
            dot += w[l] * m[l];
        }
        const double alpha = dot / 9.0;
        double err = 0.0;
        for (int l = 0; l < 9; ++l) err += (w[l] - alpha * m[l]) * (w[l] - alpha * m[l]);
        best = std::min(best, err);
    }
    return best;
}

/// Precision-at-hit average, written directly from the definition.
inline double average_precision(const std::vector<std::string>& ranked, const std::vector<std::string>& relevant) {
    double sum = 0.0;
    int hits = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k)
        if (std::find(relevant.begin(), relevant.end(), ranked[k]) != relevant.end()) {
            ++hits;
            sum += hits / static_cast<double>(k + 1);
        }
    return sum / static_cast<double>(relevant.size());
}

}  // namespace oracle
