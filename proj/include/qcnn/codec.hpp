#pragma once

// Bit-exact compressed model container (.qcm) and compression accounting.
//
// Layout:
//   "QCM2" | version u8 = 1 | layer_count u16 LE
//   per conv layer:
//     out u16 LE | in u16 LE | stride u8 | padding u8 | m u8 | e u8 (two's complement)
//     scalars: out*in bytes
//     masks:   out*in*9*m bits, MSB-first, zero-padded to a byte
//     biases:  out*12 bits, MSB-first, zero-padded to a byte
//   metadata: u32 LE length | UTF-8 "key value" lines
//
// Metadata keys: input C H W, pools i j ..., policy <name>, source <16 hex digits>.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qcnn/bytes.hpp"
#include "qcnn/error.hpp"
#include "qcnn/network.hpp"
#include "qcnn/quantizer.hpp"

namespace qcnn {

inline constexpr std::string_view kModelMagic = "QCM2";
inline constexpr std::uint8_t kModelVersion = 1;
inline constexpr std::size_t kModelHeaderBytes = 4 + 1 + 2;
inline constexpr std::size_t kLayerHeaderBytes = 8;

/// Mask width per conv layer; the scalar width is fixed at 8 bits.
struct BitAllocationProfile {
    std::vector<int> mask_bits;
    int scalar_bits = kScalarBits;

    [[nodiscard]] std::size_t size() const noexcept { return mask_bits.size(); }
    friend bool operator==(const BitAllocationProfile&, const BitAllocationProfile&) = default;
};

/// Parses the run-length grammar "3x7,1x6" (m=3 for 7 layers, then m=1 for 6).
/// A bare "3" means one layer.
inline BitAllocationProfile parse_profile(std::string_view text) {
    BitAllocationProfile p;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = std::min(text.find(',', start), text.size());
        const std::string_view item = text.substr(start, comma - start);
        const std::size_t x = item.find('x');
        int bits = 0, count = 1;
        auto parse_int = [&](std::string_view s, int& v) {
            const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
        };
        const bool ok = x == std::string_view::npos ? parse_int(item, bits)
                                                    : parse_int(item.substr(0, x), bits) && parse_int(item.substr(x + 1), count);
        if (!ok || count <= 0) throw FormatError("profile: cannot parse '" + std::string(item) + "'");
        if (bits < kMinMaskBits || bits > kMaxMaskBits) {
            throw FormatError("profile: mask width " + std::to_string(bits) + " outside [1,5]");
        }
        p.mask_bits.insert(p.mask_bits.end(), static_cast<std::size_t>(count), bits);
        start = comma + 1;
        if (comma == text.size()) break;
    }
    return p;
}

inline std::string format_profile(const BitAllocationProfile& p) {
    std::string s;
    for (std::size_t i = 0; i < p.mask_bits.size();) {
        std::size_t j = i;
        while (j < p.mask_bits.size() && p.mask_bits[j] == p.mask_bits[i]) ++j;
        if (!s.empty()) s += ',';
        s += std::to_string(p.mask_bits[i]) + "x" + std::to_string(j - i);
        i = j;
    }
    return s;
}

struct Provenance {
    QuantPolicy policy = QuantPolicy::XnorAbsMean;
    std::uint64_t source_checksum = 0;
    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct CompressedModel {
    Architecture arch;
    std::vector<QuantizedLayer> layers;
    Provenance provenance;

    [[nodiscard]] BitAllocationProfile profile() const {
        BitAllocationProfile p;
        for (const auto& l : layers) p.mask_bits.push_back(l.mask_bits);
        return p;
    }

    friend bool operator==(const CompressedModel&, const CompressedModel&) = default;
};

/// r = 32 z / (z m + s) with z = 9.
inline double ratio_formula(int mask_bits, int scalar_bits) {
    if (mask_bits < 1 || scalar_bits < 0) throw DomainError("ratio_formula: need m >= 1, s >= 0");
    constexpr double z = ConvLayerShape::kKernelArea;
    return 32.0 * z / (z * mask_bits + scalar_bits);
}

inline void check_profile(const Architecture& arch, const BitAllocationProfile& profile) {
    if (profile.size() != arch.convs.size()) {
        throw ShapeError("profile has " + std::to_string(profile.size()) + " entries, architecture has " +
                         std::to_string(arch.convs.size()) + " conv layers");
    }
    for (int m : profile.mask_bits) check_mask_bits(m);
}

/// Weight-only compression ratio over all conv layers (biases excluded, as in the per-kernel formula).
inline double model_ratio(const Architecture& arch, const BitAllocationProfile& profile) {
    check_profile(arch, profile);
    double original = 0.0, compressed = 0.0;
    for (std::size_t i = 0; i < arch.convs.size(); ++i) {
        const auto pairs = static_cast<double>(arch.convs[i].kernel_pairs());
        original += 32.0 * 9.0 * pairs;
        compressed += pairs * (9.0 * profile.mask_bits[i] + profile.scalar_bits);
    }
    return compressed == 0.0 ? 1.0 : original / compressed;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string encode_metadata(const Architecture& arch, const Provenance& prov) {
    std::ostringstream s;
    s << "input " << arch.input.channels << ' ' << arch.input.height << ' ' << arch.input.width << '\n';
    s << "pools";
    for (auto p : arch.pool_after) s << ' ' << p;
    s << '\n';
    s << "policy " << to_string(prov.policy) << '\n';
    s << "source " << hex64(prov.source_checksum) << '\n';
    return s.str();
}

inline std::size_t layer_payload_bytes(const ConvLayerShape& s, int mask_bits) {
    const std::size_t pairs = s.kernel_pairs();
    return kLayerHeaderBytes + pairs + bytes_for_bits(pairs * 9 * static_cast<std::size_t>(mask_bits)) +
           bytes_for_bits(s.out_channels * kBiasBits);
}

struct ModelSizes {
    std::uint64_t float_bytes = 0;       // 4 bytes per weight and bias
    std::uint64_t compressed_bytes = 0;  // exact container length
};

inline ModelSizes model_sizes(const Architecture& arch, const BitAllocationProfile& profile,
                              const Provenance& prov = {}) {
    check_profile(arch, profile);
    if (profile.scalar_bits != kScalarBits) throw DomainError("container stores 8-bit scalars only");
    ModelSizes r;
    r.compressed_bytes = kModelHeaderBytes + 4 + encode_metadata(arch, prov).size();
    for (std::size_t i = 0; i < arch.convs.size(); ++i) {
        const auto& s = arch.convs[i];
        r.float_bytes += 4 * (s.weight_count() + s.out_channels);
        r.compressed_bytes += layer_payload_bytes(s, profile.mask_bits[i]);
    }
    return r;
}

inline ModelSizes model_sizes(const CompressedModel& m) { return model_sizes(m.arch, m.profile(), m.provenance); }

inline void validate(const CompressedModel& m) {
    if (m.layers.size() != m.arch.convs.size()) {
        throw InvariantError("model has " + std::to_string(m.layers.size()) + " layers, architecture lists " +
                             std::to_string(m.arch.convs.size()));
    }
    if (m.layers.size() > 0xFFFF) throw InvariantError("too many layers for a u16 count");
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        validate(m.layers[i], i);
        if (!(m.layers[i].shape == m.arch.convs[i])) {
            throw InvariantError("layer " + std::to_string(i) + ": shape differs from architecture");
        }
    }
    for (auto p : m.arch.pool_after)
        if (p >= m.layers.size()) throw InvariantError("pool placement " + std::to_string(p) + " past last layer");
}

inline Bytes encode(const CompressedModel& model) {
    validate(model);
    Bytes out;
    out.reserve(model_sizes(model).compressed_bytes);
    {
        ByteWriter w;
        w.raw(kModelMagic);
        w.u8(kModelVersion);
        w.u16(static_cast<std::uint16_t>(model.layers.size()));
        out = std::move(w).take();
    }
    for (const auto& l : model.layers) {
        ByteWriter w;
        w.u16(static_cast<std::uint16_t>(l.shape.out_channels));
        w.u16(static_cast<std::uint16_t>(l.shape.in_channels));
        w.u8(static_cast<std::uint8_t>(l.shape.stride));
        w.u8(static_cast<std::uint8_t>(l.shape.padding));
        w.u8(static_cast<std::uint8_t>(l.mask_bits));
        w.u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(l.shift)));
        for (const auto& k : l.kernels) w.u8(k.scalar);
        out.insert(out.end(), w.bytes().begin(), w.bytes().end());
        {
            BitWriter bits(out);
            const auto field_mask = static_cast<std::uint32_t>((1u << l.mask_bits) - 1);
            for (const auto& k : l.kernels)
                for (auto v : k.mask) {
                    if (l.mask_bits == 1) bits.put(v > 0 ? 1u : 0u, 1);
                    else bits.put(static_cast<std::uint32_t>(v) & field_mask, l.mask_bits);
                }
        }
        {
            BitWriter bits(out);
            for (auto b : l.biases) bits.put(static_cast<std::uint32_t>(b) & 0xFFFu, kBiasBits);
        }
    }
    const std::string meta = encode_metadata(model.arch, model.provenance);
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(meta.size()));
    w.raw(meta);
    out.insert(out.end(), w.bytes().begin(), w.bytes().end());
    return out;
}

namespace detail {

inline void parse_metadata(const std::string& text, CompressedModel& m) {
    std::istringstream in(text);
    std::string line;
    bool have_input = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "input") {
            if (!(ls >> m.arch.input.channels >> m.arch.input.height >> m.arch.input.width)) {
                throw CorruptionError("metadata: malformed input line");
            }
            have_input = true;
        } else if (key == "pools") {
            for (std::size_t p; ls >> p;) m.arch.pool_after.push_back(p);
            if (!ls.eof()) throw CorruptionError("metadata: malformed pools line");
        } else if (key == "policy") {
            std::string name;
            ls >> name;
            try {
                m.provenance.policy = parse_policy(name);
            } catch (const DomainError&) {
                throw CorruptionError("metadata: unknown policy '" + name + "'");
            }
        } else if (key == "source") {
            std::string hex;
            ls >> hex;
            const auto [ptr, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), m.provenance.source_checksum, 16);
            if (ec != std::errc{} || ptr != hex.data() + hex.size()) throw CorruptionError("metadata: bad source checksum");
        }
        // Unknown keys are tolerated for forward compatibility.
    }
    if (!have_input) throw CorruptionError("metadata: missing input line");
}

}  // namespace detail

inline CompressedModel decode(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes, "model");
    if (bytes.size() < kModelMagic.size() ||
        std::string_view(reinterpret_cast<const char*>(bytes.data()), kModelMagic.size()) != kModelMagic) {
        throw FormatError("model: bad magic (expected QCM2)");
    }
    in.raw(kModelMagic.size());
    const std::uint8_t version = in.u8();
    if (version != kModelVersion) {
        throw UnsupportedVersionError("model: unsupported container version " + std::to_string(version));
    }
    const std::uint16_t count = in.u16();
    CompressedModel m;
    m.layers.reserve(count);
    for (std::size_t li = 0; li < count; ++li) {
        const std::string where = "model layer " + std::to_string(li);
        QuantizedLayer l;
        l.shape.out_channels = in.u16();
        l.shape.in_channels = in.u16();
        l.shape.stride = in.u8();
        l.shape.padding = in.u8();
        l.mask_bits = in.u8();
        l.shift = static_cast<std::int8_t>(in.u8());
        if (l.mask_bits < kMinMaskBits || l.mask_bits > kMaxMaskBits) {
            throw CorruptionError(where + ": mask width " + std::to_string(l.mask_bits) + " outside [1,5]");
        }
        if (l.shift < kMinShift || l.shift > kMaxShift) {
            throw CorruptionError(where + ": shift " + std::to_string(l.shift) + " outside [-8,7]");
        }
        if (l.shape.out_channels == 0 || l.shape.in_channels == 0 || l.shape.stride == 0) {
            throw CorruptionError(where + ": zero channel count or stride");
        }
        const std::size_t pairs = l.shape.kernel_pairs();
        const auto scalars = in.raw(pairs);
        l.kernels.resize(pairs);
        for (std::size_t p = 0; p < pairs; ++p) l.kernels[p].scalar = scalars[p];

        BitReader masks(in.raw(bytes_for_bits(pairs * 9 * static_cast<std::size_t>(l.mask_bits))));
        for (auto& k : l.kernels)
            for (auto& v : k.mask) {
                const std::uint32_t raw = masks.get(l.mask_bits);
                const int value = l.mask_bits == 1 ? (raw ? 1 : -1) : sign_extend(raw, l.mask_bits);
                if (!mask_value_valid(value, l.mask_bits)) {
                    throw CorruptionError(where + ": mask code outside the symmetric range");
                }
                v = static_cast<std::int8_t>(value);
            }
        BitReader biases(in.raw(bytes_for_bits(l.shape.out_channels * kBiasBits)));
        l.biases.resize(l.shape.out_channels);
        for (auto& b : l.biases) b = static_cast<std::int16_t>(sign_extend(biases.get(kBiasBits), kBiasBits));
        m.arch.convs.push_back(l.shape);
        m.layers.push_back(std::move(l));
    }
    const std::uint32_t meta_len = in.u32();
    detail::parse_metadata(in.str(meta_len), m);
    if (!in.at_end()) throw FormatError("model: " + std::to_string(in.remaining()) + " trailing bytes");
    try {
        validate(m);
    } catch (const InvariantError& e) {
        throw CorruptionError(std::string("model: ") + e.what());
    }
    return m;
}

/// Quantizes every conv layer of a float network under a profile.
inline CompressedModel compress(const NetworkDefinition& net, const FloatWeights& weights,
                                const BitAllocationProfile& profile, QuantPolicy policy,
                                std::vector<QuantizationStats>* stats = nullptr) {
    check_weights(net, weights);
    const Architecture arch = net.architecture();
    check_profile(arch, profile);
    CompressedModel m;
    m.arch = arch;
    m.provenance.policy = policy;
    m.provenance.source_checksum = fnv1a64(encode_weights(weights));
    for (std::size_t i = 0; i < weights.conv.size(); ++i) {
        auto q = quantize_layer(weights.conv[i].weights, weights.conv[i].bias, profile.mask_bits[i], policy,
                                arch.convs[i]);
        if (stats) stats->push_back(q.stats);
        m.layers.push_back(std::move(q.layer));
    }
    return m;
}

/// True when the model's conv geometry matches the network's.
inline bool matches(const NetworkDefinition& net, const CompressedModel& m) {
    const Architecture a = net.architecture();
    return a.convs == m.arch.convs && a.input == m.arch.input && a.pool_after == m.arch.pool_after;
}

}  // namespace qcnn
