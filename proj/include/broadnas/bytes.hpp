// SPDX-License-Identifier: Apache-2.0
//
// Little-endian byte streams for checkpoints.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "broadnas/tensor.hpp"

namespace broadnas {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public Error {
public:
    using Error::Error;
};

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Independent seed for a named random stream (and optional index).
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ fnv1a(name)) + index);
}

class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        buf_.append(reinterpret_cast<const char*>(&value), sizeof(T));
    }
    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }
    void put_blob(std::string_view s) {
        put<std::uint64_t>(s.size());
        buf_.append(s);
    }
    void put_doubles(std::span<const double> values) {
        buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
    }
    const std::string& bytes() const noexcept { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes, std::string context = "checkpoint")
        : bytes_(bytes), context_(std::move(context)) {}

    template <typename T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(bytes_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::string get_blob() {
        const auto n = get<std::uint64_t>();
        need(n);
        std::string s(bytes_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    void get_doubles(std::span<double> out) {
        need(out.size() * sizeof(double));
        std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
        pos_ += out.size() * sizeof(double);
    }
    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_) {
            throw CheckpointError(context_ + ": truncated at offset " + std::to_string(pos_) + " (need " +
                                  std::to_string(n) + " more bytes, " + std::to_string(bytes_.size() - pos_) +
                                  " available)");
        }
    }

    std::string_view bytes_;
    std::string context_;
    std::size_t pos_ = 0;
};

}  // namespace broadnas
