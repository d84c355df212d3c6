#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "idp/embeddings/dataset.hpp"

// Feature container layout (all integers little-endian):
//   "IDPF" | u32 version=1 | u8 role | u16 W | u16 H | u32 D | u32 class_count
//   | class_count x (u16 name_len, UTF-8 bytes) | u64 record_count
//   | record_count x (u64 sample_id, u32 label, W*H*D x f32)
namespace idp {

inline constexpr std::array<char, 4> kContainerMagic = {'I', 'D', 'P', 'F'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    [[nodiscard]] const std::vector<std::uint8_t>& bytes() const noexcept { return buf_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        require(remaining() >= n, ErrorKind::CorruptRecord, "container truncated at byte " + std::to_string(pos_));
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t{data_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

inline bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t extra = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            extra = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= s.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        static constexpr std::uint32_t min_cp[] = {0, 0x80, 0x800, 0x10000};
        if (cp < min_cp[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
        i += extra + 1;
    }
    return true;
}

}  // namespace detail

/// Serializes a validated dataset to the container byte stream.
inline std::vector<std::uint8_t> encode_container(const FeatureDataset& ds) {
    validate(ds);
    detail::ByteWriter w;
    w.raw(std::string_view(kContainerMagic.data(), kContainerMagic.size()));
    w.u32(kContainerVersion);
    w.u8(static_cast<std::uint8_t>(ds.labels.role));
    w.u16(ds.shape.width);
    w.u16(ds.shape.height);
    w.u32(ds.shape.channels);
    w.u32(static_cast<std::uint32_t>(ds.labels.size()));
    for (const auto& name : ds.labels.names) {
        require(name.size() <= 0xFFFF, ErrorKind::InvalidArgument, "class name longer than 65535 bytes");
        require(detail::valid_utf8(name), ErrorKind::InvalidArgument, "class name is not valid UTF-8");
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.raw(name);
    }
    w.u64(ds.records.size());
    for (const auto& rec : ds.records) {
        w.u64(rec.sample_id);
        w.u32(rec.label);
        for (Eigen::Index i = 0; i < rec.data.size(); ++i) w.f32(static_cast<float>(rec.data.data()[i]));
    }
    return w.bytes();
}

inline FeatureDataset decode_container(std::span<const std::uint8_t> bytes) {
    require(bytes.size() >= 4 && std::memcmp(bytes.data(), kContainerMagic.data(), 4) == 0, ErrorKind::BadMagic,
            "missing IDPF magic");
    detail::ByteReader r(bytes.subspan(4));
    const auto version = r.u32();
    require(version == kContainerVersion, ErrorKind::VersionUnsupported,
            "container version " + std::to_string(version));
    FeatureDataset ds;
    const auto role = r.u8();
    require(role <= 1, ErrorKind::CorruptRecord, "unknown role byte " + std::to_string(role));
    ds.labels.role = static_cast<DomainRole>(role);
    ds.shape.width = r.u16();
    ds.shape.height = r.u16();
    ds.shape.channels = r.u32();
    require(ds.shape.valid(), ErrorKind::CorruptRecord, "feature shape has a zero dimension");
    const auto class_count = r.u32();
    // every class needs at least its 2-byte length prefix
    require(class_count <= r.remaining() / 2, ErrorKind::CorruptRecord, "class count exceeds file size");
    ds.labels.names.reserve(class_count);
    for (std::uint32_t c = 0; c < class_count; ++c) {
        const auto len = r.u16();
        auto name = r.raw(len);
        require(detail::valid_utf8(name), ErrorKind::CorruptRecord, "class name is not valid UTF-8");
        ds.labels.names.push_back(std::move(name));
    }
    const auto record_count = r.u64();
    const std::uint64_t floats = static_cast<std::uint64_t>(ds.shape.positions()) * ds.shape.channels;
    const std::uint64_t record_bytes = 12 + 4 * floats;
    require(record_count <= r.remaining() / record_bytes, ErrorKind::CorruptRecord,
            "record count " + std::to_string(record_count) + " exceeds payload");
    ds.records.reserve(record_count);
    for (std::uint64_t i = 0; i < record_count; ++i) {
        FeatureMap rec;
        rec.sample_id = r.u64();
        rec.label = r.u32();
        rec.data.resize(ds.shape.positions(), ds.shape.dim());
        for (Eigen::Index k = 0; k < rec.data.size(); ++k) rec.data.data()[k] = static_cast<double>(r.f32());
        ds.records.push_back(std::move(rec));
    }
    require(r.remaining() == 0, ErrorKind::CorruptRecord,
            std::to_string(r.remaining()) + " trailing bytes after last record");
    validate(ds);
    return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::IoFailure, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::IoFailure, "write failed for " + path.string());
}

inline FeatureDataset read_container(const std::filesystem::path& path) {
    return decode_container(read_file_bytes(path));
}

inline void write_container(const FeatureDataset& ds, const std::filesystem::path& path) {
    write_file_bytes(path, encode_container(ds));
}

/// Rounds every feature to float32, the precision the container stores.
inline void quantize_to_f32(FeatureDataset& ds) {
    for (auto& rec : ds.records) rec.data = rec.data.cast<float>().cast<double>();
}

}  // namespace idp
