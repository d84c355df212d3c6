#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "idp/numerics/matrix.hpp"

namespace idp {

/// Incremental FNV-1a (64-bit). Fingerprints artifacts and configs.
class Fingerprint {
public:
    Fingerprint& bytes(const void* data, std::size_t n) noexcept {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001B3ULL;
        }
        return *this;
    }
    Fingerprint& str(std::string_view s) noexcept {
        u64(s.size());
        return bytes(s.data(), s.size());
    }
    Fingerprint& u64(std::uint64_t v) noexcept {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        return bytes(b, 8);
    }
    Fingerprint& f64(double v) noexcept { return u64(std::bit_cast<std::uint64_t>(v)); }
    Fingerprint& matrix(const Matrix& m) noexcept {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
        return *this;
    }
    [[nodiscard]] std::uint64_t value() const noexcept { return state_; }
    [[nodiscard]] std::string hex() const {
        static constexpr char digits[] = "0123456789abcdef";
        std::string out(16, '0');
        for (int i = 0; i < 16; ++i) out[15 - i] = digits[(state_ >> (4 * i)) & 0xF];
        return out;
    }

private:
    std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

}  // namespace idp
