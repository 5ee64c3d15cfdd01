#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sesemi {

using Bytes = std::vector<uint8_t>;
using ByteView = std::span<const uint8_t>;

inline Bytes to_bytes(const std::string& s) {
    return Bytes(s.begin(), s.end());
}

inline std::string to_string(ByteView b) {
    return std::string(b.begin(), b.end());
}

inline void append(Bytes& out, ByteView more) {
    out.insert(out.end(), more.begin(), more.end());
}

inline void append(Bytes& out, const std::string& s) {
    out.insert(out.end(), s.begin(), s.end());
}

inline void put_u16_be(Bytes& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void put_u32_be(Bytes& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void put_u32_le(Bytes& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 24));
}

inline void put_f64_le(Bytes& out, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(u >> (8 * i)));
}

class ByteReader {
  public:
    explicit ByteReader(ByteView data) : data_(data) {}

    size_t remaining() const { return data_.size() - pos_; }

    uint16_t u16_be() {
        need(2);
        uint16_t v = static_cast<uint16_t>(data_[pos_] << 8 | data_[pos_ + 1]);
        pos_ += 2;
        return v;
    }

    uint32_t u32_be() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = v << 8 | data_[pos_ + i];
        pos_ += 4;
        return v;
    }

    uint32_t u32_le() {
        need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = v << 8 | data_[pos_ + i];
        pos_ += 4;
        return v;
    }

    double f64_le() {
        need(8);
        uint64_t u = 0;
        for (int i = 7; i >= 0; --i) u = u << 8 | data_[pos_ + i];
        pos_ += 8;
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }

    Bytes take(size_t n) {
        need(n);
        Bytes out(data_.begin() + pos_, data_.begin() + pos_ + n);
        pos_ += n;
        return out;
    }

    template <size_t N>
    std::array<uint8_t, N> take_array() {
        need(N);
        std::array<uint8_t, N> out;
        std::memcpy(out.data(), data_.data() + pos_, N);
        pos_ += N;
        return out;
    }

  private:
    void need(size_t n) const {
        if (remaining() < n) throw std::out_of_range("byte reader underrun");
    }

    ByteView data_;
    size_t pos_ = 0;
};

std::string to_hex(ByteView b);
Bytes from_hex(const std::string& hex);
std::string b64_encode(ByteView b);
Bytes b64_decode(const std::string& s);

/// True iff `needle` occurs as a contiguous byte sequence in `haystack`.
bool contains_bytes(ByteView haystack, ByteView needle);

}  // namespace sesemi
