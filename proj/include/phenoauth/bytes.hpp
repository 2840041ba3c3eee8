#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "phenoauth/prng.hpp"

namespace phenoauth {

using Bytes = std::vector<uint8_t>;

inline void put_u32le(Bytes& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline void put_u64le(Bytes& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline uint32_t read_u32le(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

inline uint64_t read_u64le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void append(Bytes& out, const Bytes& more) { out.insert(out.end(), more.begin(), more.end()); }

inline std::string to_hex(const uint8_t* p, size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(2 * n);
    for (size_t i = 0; i < n; ++i) {
        s.push_back(digits[p[i] >> 4]);
        s.push_back(digits[p[i] & 0xf]);
    }
    return s;
}

inline std::string to_hex(const Bytes& b) { return to_hex(b.data(), b.size()); }

inline Bytes from_hex(const std::string& s) {
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw std::invalid_argument("bad hex digit");
    };
    if (s.size() % 2 != 0) throw std::invalid_argument("odd hex length");
    Bytes out(s.size() / 2);
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<uint8_t>(nib(s[2 * i]) << 4 | nib(s[2 * i + 1]));
    return out;
}

inline std::string base64_encode(const Bytes& in) {
    static const char* tab = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= in.size(); i += 3) {
        uint32_t v = in[i] << 16 | in[i + 1] << 8 | in[i + 2];
        out.push_back(tab[v >> 18]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
    }
    if (i + 1 == in.size()) {
        uint32_t v = in[i] << 16;
        out.push_back(tab[v >> 18]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == in.size()) {
        uint32_t v = in[i] << 16 | in[i + 1] << 8;
        out.push_back(tab[v >> 18]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline Bytes base64_decode(const std::string& in) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    Bytes out;
    uint32_t buf = 0;
    int bits = 0;
    for (char c : in) {
        if (c == '=') break;
        int v = val(c);
        if (v < 0) throw std::invalid_argument("bad base64 character");
        buf = buf << 6 | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<uint8_t>(buf >> bits));
        }
    }
    return out;
}

/// Fixed-width bit sequence, packed MSB-first within each byte. Bit i of the
/// sequence is bit (7 - i%8) of byte i/8, which makes the byte view of a
/// response equal to its image pixel row without any repacking.
class BitString {
public:
    BitString() = default;
    explicit BitString(size_t nbits) : bits_(nbits), bytes_((nbits + 7) / 8, 0) {}

    static BitString from_bytes(Bytes b, size_t nbits) {
        if (b.size() != (nbits + 7) / 8) throw std::invalid_argument("bit length / byte size mismatch");
        BitString s;
        s.bits_ = nbits;
        s.bytes_ = std::move(b);
        return s;
    }

    static BitString random(size_t nbits, Rng& rng) {
        BitString s(nbits);
        for (auto& b : s.bytes_) b = rng.byte();
        s.mask_tail();
        return s;
    }

    size_t size() const { return bits_; }
    bool empty() const { return bits_ == 0; }
    const Bytes& bytes() const { return bytes_; }

    bool get(size_t i) const { return (bytes_[i >> 3] >> (7 - (i & 7))) & 1; }

    void set(size_t i, bool v) {
        uint8_t m = static_cast<uint8_t>(1u << (7 - (i & 7)));
        if (v)
            bytes_[i >> 3] |= m;
        else
            bytes_[i >> 3] &= static_cast<uint8_t>(~m);
    }

    void flip(size_t i) { bytes_[i >> 3] ^= static_cast<uint8_t>(1u << (7 - (i & 7))); }

    BitString operator^(const BitString& o) const {
        if (bits_ != o.bits_) throw std::invalid_argument("xor of different bit lengths");
        BitString r(bits_);
        for (size_t i = 0; i < bytes_.size(); ++i) r.bytes_[i] = bytes_[i] ^ o.bytes_[i];
        return r;
    }

    bool operator==(const BitString& o) const { return bits_ == o.bits_ && bytes_ == o.bytes_; }
    bool operator!=(const BitString& o) const { return !(*this == o); }

    size_t hamming_distance(const BitString& o) const {
        if (bits_ != o.bits_) throw std::invalid_argument("distance of different bit lengths");
        size_t d = 0;
        for (size_t i = 0; i < bytes_.size(); ++i) d += static_cast<size_t>(__builtin_popcount(bytes_[i] ^ o.bytes_[i]));
        return d;
    }

    /// First n bits as a new BitString (n must be a multiple of 8 here).
    BitString prefix(size_t n) const {
        if (n > bits_ || n % 8 != 0) throw std::invalid_argument("bad prefix length");
        return from_bytes(Bytes(bytes_.begin(), bytes_.begin() + n / 8), n);
    }

private:
    void mask_tail() {
        size_t rem = bits_ & 7;
        if (rem != 0 && !bytes_.empty()) bytes_.back() &= static_cast<uint8_t>(0xff << (8 - rem));
    }

    size_t bits_ = 0;
    Bytes bytes_;
};

}  // namespace phenoauth
