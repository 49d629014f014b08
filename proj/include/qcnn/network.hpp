#pragma once

// Network definitions (plain-text layer lists), the conv-only architecture view
// carried by compressed models, and full-precision weight storage.
//
// Definition grammar, one directive per line, '#' starts a comment:
//
//   input <channels> <height> <width>
//   conv <out> [stride=<s>] [pad=<p>] [name=<id>] [norelu]
//   pool                      2x2 max pooling, stride 2
//   flatten
//   fc <out> [relu] [name=<id>]
//   tap <conv-name>           feature-map tap (post-ReLU); defaults to the last conv
//
// Unnamed conv layers are called conv1, conv2, ... in order of appearance.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qcnn/bytes.hpp"
#include "qcnn/error.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn {

struct Shape3 {
    std::size_t channels = 0, height = 0, width = 0;
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

enum class LayerKind { Conv, MaxPool, Flatten, FullyConnected };

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    std::string name;
    std::size_t out = 0;
    std::size_t stride = 1;
    std::size_t padding = 1;
    bool relu = true;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Conv-layer geometry plus pooling placement; what a compressed model needs to describe itself.
struct Architecture {
    Shape3 input;
    std::vector<ConvLayerShape> convs;
    std::vector<std::size_t> pool_after;  // conv indices followed by a 2x2 max pool

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

class NetworkDefinition {
public:
    NetworkDefinition() = default;
    NetworkDefinition(Shape3 input, std::vector<LayerSpec> layers, std::string tap = {})
        : input_(input), layers_(std::move(layers)), tap_(std::move(tap)) {
        finalize();
    }

    [[nodiscard]] const Shape3& input() const noexcept { return input_; }
    [[nodiscard]] const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    [[nodiscard]] const std::string& tap() const noexcept { return tap_; }
    /// Index into layers() of the tapped conv.
    [[nodiscard]] std::size_t tap_layer() const noexcept { return tap_layer_; }
    [[nodiscard]] std::size_t conv_count() const noexcept { return conv_shapes_.size(); }
    [[nodiscard]] std::size_t fc_count() const noexcept { return fc_shapes_.size(); }
    [[nodiscard]] const std::vector<ConvLayerShape>& conv_shapes() const noexcept { return conv_shapes_; }
    /// (out, in) per fully connected layer.
    [[nodiscard]] const std::vector<std::pair<std::size_t, std::size_t>>& fc_shapes() const noexcept { return fc_shapes_; }
    [[nodiscard]] bool has_classifier() const noexcept { return !fc_shapes_.empty(); }
    [[nodiscard]] std::size_t class_count() const noexcept { return has_classifier() ? fc_shapes_.back().first : 0; }
    [[nodiscard]] Shape3 tap_shape() const noexcept { return tap_shape_; }

    [[nodiscard]] Architecture architecture() const {
        Architecture a{input_, conv_shapes_, {}};
        std::size_t conv = 0;
        for (const auto& l : layers_) {
            if (l.kind == LayerKind::Conv) ++conv;
            if (l.kind == LayerKind::MaxPool && conv > 0) a.pool_after.push_back(conv - 1);
        }
        return a;
    }

    friend bool operator==(const NetworkDefinition& a, const NetworkDefinition& b) {
        return a.input_ == b.input_ && a.layers_ == b.layers_ && a.tap_ == b.tap_;
    }

private:
    void finalize() {
        if (input_.channels == 0 || input_.height == 0 || input_.width == 0) {
            throw ShapeError("network input dims must be positive");
        }
        Shape3 cur = input_;
        bool flat = false;
        std::size_t flat_len = 0;
        std::size_t conv_index = 0;
        conv_shapes_.clear();
        fc_shapes_.clear();
        bool tap_found = false;
        std::size_t last_conv_layer = layers_.size();
        Shape3 last_conv_shape{};
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            LayerSpec& l = layers_[li];
            const std::string where = "layer " + std::to_string(li + 1);
            switch (l.kind) {
                case LayerKind::Conv: {
                    if (flat) throw ShapeError(where + ": conv after flatten");
                    if (l.out == 0 || l.stride == 0) throw ShapeError(where + ": conv needs positive out and stride");
                    ++conv_index;
                    if (l.name.empty()) l.name = "conv" + std::to_string(conv_index);
                    ConvLayerShape s{l.out, cur.channels, l.stride, l.padding};
                    cur = {l.out, s.output_extent(cur.height), s.output_extent(cur.width)};
                    conv_shapes_.push_back(s);
                    last_conv_layer = li;
                    last_conv_shape = cur;
                    if (!tap_.empty() && l.name == tap_) {
                        tap_found = true;
                        tap_layer_ = li;
                        tap_shape_ = cur;
                    }
                    break;
                }
                case LayerKind::MaxPool:
                    if (flat) throw ShapeError(where + ": pool after flatten");
                    if (cur.height % 2 || cur.width % 2) {
                        throw ShapeError(where + ": pool needs even spatial dims, got " + std::to_string(cur.height) +
                                         "x" + std::to_string(cur.width));
                    }
                    cur.height /= 2;
                    cur.width /= 2;
                    break;
                case LayerKind::Flatten:
                    if (flat) throw ShapeError(where + ": duplicate flatten");
                    flat = true;
                    flat_len = cur.channels * cur.height * cur.width;
                    break;
                case LayerKind::FullyConnected:
                    if (!flat) throw ShapeError(where + ": fc requires a preceding flatten");
                    if (l.out == 0) throw ShapeError(where + ": fc needs positive out");
                    if (l.name.empty()) l.name = "fc" + std::to_string(fc_shapes_.size() + 1);
                    fc_shapes_.emplace_back(l.out, flat_len);
                    flat_len = l.out;
                    break;
            }
        }
        if (conv_shapes_.empty()) throw ShapeError("network has no conv layers");
        if (tap_.empty()) {
            tap_ = layers_[last_conv_layer].name;
            tap_layer_ = last_conv_layer;
            tap_shape_ = last_conv_shape;
        } else if (!tap_found) {
            throw ShapeError("tap '" + tap_ + "' does not name a conv layer");
        }
    }

    Shape3 input_{};
    std::vector<LayerSpec> layers_;
    std::string tap_;
    std::size_t tap_layer_ = 0;
    Shape3 tap_shape_{};
    std::vector<ConvLayerShape> conv_shapes_;
    std::vector<std::pair<std::size_t, std::size_t>> fc_shapes_;
};

namespace detail {

inline std::size_t parse_count(const std::string& tok, const std::string& where) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != tok.size() || tok.empty() || tok[0] == '-') throw FormatError(where + ": expected a count, got '" + tok + "'");
    return static_cast<std::size_t>(v);
}

}  // namespace detail

inline NetworkDefinition parse_network(std::string_view text, const std::string& source = "network") {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    Shape3 input{};
    bool have_input = false;
    std::vector<LayerSpec> layers;
    std::string tap;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(t);
        if (tok.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        const std::string& kw = tok[0];
        if (kw == "input") {
            if (tok.size() != 4) throw FormatError(where + ": input takes <channels> <height> <width>");
            input = {detail::parse_count(tok[1], where), detail::parse_count(tok[2], where),
                     detail::parse_count(tok[3], where)};
            have_input = true;
        } else if (kw == "conv" || kw == "fc") {
            if (tok.size() < 2) throw FormatError(where + ": " + kw + " needs an output count");
            LayerSpec l;
            l.kind = kw == "conv" ? LayerKind::Conv : LayerKind::FullyConnected;
            l.relu = kw == "conv";
            l.out = detail::parse_count(tok[1], where);
            for (std::size_t i = 2; i < tok.size(); ++i) {
                const std::string& t = tok[i];
                if (t == "norelu") l.relu = false;
                else if (t == "relu") l.relu = true;
                else if (t.starts_with("name=")) l.name = t.substr(5);
                else if (kw == "conv" && t.starts_with("stride=")) l.stride = detail::parse_count(t.substr(7), where);
                else if (kw == "conv" && t.starts_with("pad=")) l.padding = detail::parse_count(t.substr(4), where);
                else throw FormatError(where + ": unknown " + kw + " option '" + t + "'");
            }
            layers.push_back(std::move(l));
        } else if (kw == "pool" || kw == "flatten") {
            if (tok.size() != 1) throw FormatError(where + ": " + kw + " takes no arguments");
            layers.push_back({kw == "pool" ? LayerKind::MaxPool : LayerKind::Flatten, {}, 0, 1, 0, false});
        } else if (kw == "tap") {
            if (tok.size() != 2) throw FormatError(where + ": tap takes one conv name");
            tap = tok[1];
        } else {
            throw FormatError(where + ": unknown directive '" + kw + "'");
        }
    }
    if (!have_input) throw FormatError(source + ": missing 'input' directive");
    try {
        return NetworkDefinition(input, std::move(layers), tap);
    } catch (const ShapeError& e) {
        throw FormatError(source + ": " + e.what());
    }
}

inline NetworkDefinition load_network(const std::filesystem::path& path) {
    return parse_network(read_text_file(path), path.string());
}

inline std::string format_network(const NetworkDefinition& net) {
    std::ostringstream out;
    out << "input " << net.input().channels << ' ' << net.input().height << ' ' << net.input().width << '\n';
    for (const auto& l : net.layers()) {
        switch (l.kind) {
            case LayerKind::Conv:
                out << "conv " << l.out << " stride=" << l.stride << " pad=" << l.padding << " name=" << l.name;
                if (!l.relu) out << " norelu";
                break;
            case LayerKind::MaxPool: out << "pool"; break;
            case LayerKind::Flatten: out << "flatten"; break;
            case LayerKind::FullyConnected:
                out << "fc " << l.out << " name=" << l.name;
                if (l.relu) out << " relu";
                break;
        }
        out << '\n';
    }
    out << "tap " << net.tap() << '\n';
    return out.str();
}

struct ConvParams {
    Tensor weights;  // [out, in, 3, 3]
    std::vector<double> bias;
    friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

struct FcParams {
    Tensor weights;  // [out, in]
    std::vector<double> bias;
    friend bool operator==(const FcParams&, const FcParams&) = default;
};

/// Full-precision parameters for every conv and fc layer of a network.
struct FloatWeights {
    std::vector<ConvParams> conv;
    std::vector<FcParams> fc;
    friend bool operator==(const FloatWeights&, const FloatWeights&) = default;
};

inline void check_weights(const NetworkDefinition& net, const FloatWeights& w) {
    if (w.conv.size() != net.conv_count() || w.fc.size() != net.fc_count()) {
        throw ShapeError("weights carry " + std::to_string(w.conv.size()) + " conv / " + std::to_string(w.fc.size()) +
                         " fc layers, network has " + std::to_string(net.conv_count()) + " / " +
                         std::to_string(net.fc_count()));
    }
    for (std::size_t i = 0; i < w.conv.size(); ++i) {
        const auto& s = net.conv_shapes()[i];
        if (w.conv[i].weights.shape() != std::vector<std::size_t>{s.out_channels, s.in_channels, 3, 3} ||
            w.conv[i].bias.size() != s.out_channels) {
            throw ShapeError("conv layer " + std::to_string(i) + " weights do not match the network");
        }
    }
    for (std::size_t i = 0; i < w.fc.size(); ++i) {
        const auto [o, in] = net.fc_shapes()[i];
        if (w.fc[i].weights.shape() != std::vector<std::size_t>{o, in} || w.fc[i].bias.size() != o) {
            throw ShapeError("fc layer " + std::to_string(i) + " weights do not match the network");
        }
    }
}

/// He-normal weights, zero biases.
inline FloatWeights init_weights(const NetworkDefinition& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    FloatWeights w;
    for (const auto& s : net.conv_shapes()) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(s.in_channels * 9)));
        ConvParams p{Tensor({s.out_channels, s.in_channels, 3, 3}), std::vector<double>(s.out_channels, 0.0)};
        for (double& v : p.weights.data()) v = dist(rng);
        w.conv.push_back(std::move(p));
    }
    for (const auto& [o, in] : net.fc_shapes()) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
        FcParams p{Tensor({o, in}), std::vector<double>(o, 0.0)};
        for (double& v : p.weights.data()) v = dist(rng);
        w.fc.push_back(std::move(p));
    }
    return w;
}

// Weight file: "QFW1" | u32 tensor count | per tensor: u8 rank, u32 dims..., f64 LE values.
// Tensors appear as conv weights, conv bias per conv layer, then fc weights, fc bias.
inline constexpr std::string_view kWeightsMagic = "QFW1";

inline Bytes encode_weights(const FloatWeights& w) {
    ByteWriter out;
    out.raw(kWeightsMagic);
    out.u32(static_cast<std::uint32_t>(2 * (w.conv.size() + w.fc.size())));
    auto put_tensor = [&](const std::vector<std::size_t>& shape, std::span<const double> values) {
        out.u8(static_cast<std::uint8_t>(shape.size()));
        for (auto d : shape) out.u32(static_cast<std::uint32_t>(d));
        for (double v : values) out.f64(v);
    };
    for (const auto& c : w.conv) {
        put_tensor(c.weights.shape(), c.weights.data());
        put_tensor({c.bias.size()}, c.bias);
    }
    for (const auto& f : w.fc) {
        put_tensor(f.weights.shape(), f.weights.data());
        put_tensor({f.bias.size()}, f.bias);
    }
    return std::move(out).take();
}

/// Decodes a weight file against the network it belongs to.
inline FloatWeights decode_weights(std::span<const std::uint8_t> bytes, const NetworkDefinition& net) {
    ByteReader in(bytes, "weights");
    if (in.remaining() < 4 || in.str(4) != kWeightsMagic) throw FormatError("weights: bad magic (expected QFW1)");
    const std::uint32_t count = in.u32();
    if (count != 2 * (net.conv_count() + net.fc_count())) {
        throw FormatError("weights: file holds " + std::to_string(count) + " tensors, network needs " +
                          std::to_string(2 * (net.conv_count() + net.fc_count())));
    }
    auto get_tensor = [&]() {
        const std::uint8_t rank = in.u8();
        if (rank == 0 || rank > 4) throw CorruptionError("weights: tensor rank " + std::to_string(rank));
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = in.u32();
        const std::size_t n = Tensor::element_count(shape);
        if (n * 8 > in.remaining()) throw TruncationError("weights: tensor data", in.offset());
        std::vector<double> values(n);
        for (auto& v : values) v = in.f64();
        return Tensor(std::move(shape), std::move(values));
    };
    FloatWeights w;
    for (std::size_t i = 0; i < net.conv_count(); ++i) {
        Tensor k = get_tensor();
        Tensor b = get_tensor();
        w.conv.push_back({std::move(k), b.values()});
    }
    for (std::size_t i = 0; i < net.fc_count(); ++i) {
        Tensor k = get_tensor();
        Tensor b = get_tensor();
        w.fc.push_back({std::move(k), b.values()});
    }
    if (!in.at_end()) throw FormatError("weights: trailing bytes after last tensor");
    try {
        check_weights(net, w);
    } catch (const ShapeError& e) {
        throw FormatError(std::string("weights: ") + e.what());
    }
    return w;
}

}  // namespace qcnn
