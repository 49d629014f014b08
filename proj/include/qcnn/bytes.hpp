#pragma once

// Little-endian byte I/O and MSB-first bit packing shared by the file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qcnn/error.hpp"

namespace qcnn {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v));
        u8(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }

    [[nodiscard]] std::size_t size() const noexcept { return out_.size(); }
    [[nodiscard]] Bytes take() && { return std::move(out_); }
    [[nodiscard]] const Bytes& bytes() const noexcept { return out_; }

private:
    Bytes out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> in, std::string context = "stream")
        : in_(in), context_(std::move(context)) {}

    std::uint8_t u8() {
        need(1);
        return in_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        const auto v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str(std::size_t n) {
        auto s = raw(n);
        return {s.begin(), s.end()};
    }

    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return in_.size() - pos_; }
    [[nodiscard]] bool at_end() const noexcept { return pos_ == in_.size(); }
    [[nodiscard]] const std::string& context() const noexcept { return context_; }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw TruncationError(context_ + ": needed " + std::to_string(n) + " more bytes", pos_);
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
    std::string context_;
};

/// Packs fields MSB-first into bytes; flush() zero-pads to the next byte boundary.
class BitWriter {
public:
    explicit BitWriter(Bytes& out) : out_(out) {}
    ~BitWriter() { flush(); }
    BitWriter(const BitWriter&) = delete;
    BitWriter& operator=(const BitWriter&) = delete;

    void put(std::uint32_t value, int bits) {
        for (int b = bits - 1; b >= 0; --b) {
            acc_ = static_cast<std::uint8_t>((acc_ << 1) | ((value >> b) & 1u));
            if (++fill_ == 8) {
                out_.push_back(acc_);
                acc_ = 0;
                fill_ = 0;
            }
        }
    }

    void flush() {
        if (fill_ == 0) return;
        out_.push_back(static_cast<std::uint8_t>(acc_ << (8 - fill_)));
        acc_ = 0;
        fill_ = 0;
    }

private:
    Bytes& out_;
    std::uint8_t acc_ = 0;
    int fill_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint32_t get(int bits) {
        std::uint32_t v = 0;
        for (int b = 0; b < bits; ++b) {
            const std::size_t byte = bit_ / 8;
            const int shift = 7 - static_cast<int>(bit_ % 8);
            v = (v << 1) | ((in_[byte] >> shift) & 1u);
            ++bit_;
        }
        return v;
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t bit_ = 0;
};

constexpr std::size_t bytes_for_bits(std::size_t bits) { return (bits + 7) / 8; }

/// Sign-extends the low `bits` bits of v.
constexpr int sign_extend(std::uint32_t v, int bits) {
    const std::uint32_t sign = 1u << (bits - 1);
    return static_cast<int>((v ^ sign)) - static_cast<int>(sign);
}

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> data, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (auto b : data) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError("short write to '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
    const Bytes b = read_file(path);
    return {b.begin(), b.end()};
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace qcnn
