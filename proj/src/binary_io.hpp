#pragma once

// Little-endian byte buffers with offset tracking for the on-disk formats.

#include "bt/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace bt::io {

class Writer {
public:
    void bytes(std::string_view s) { buf_.append(s); }

    template <class T>
    void put(T v) {
        static_assert(std::is_arithmetic_v<T>);
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
        buf_.append(reinterpret_cast<const char*>(raw), sizeof(T));
    }

    const std::string& data() const noexcept { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw TruncatedFile(pos_);
    }

    std::string_view bytes(std::size_t n) {
        need(n);
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    template <class T>
    T get() {
        static_assert(std::is_arithmetic_v<T>);
        need(sizeof(T));
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, data_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
        T v;
        std::memcpy(&v, raw, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::size_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == data_.size(); }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

void expect_magic(Reader& r, std::string_view magic);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view data);

}  // namespace bt::io
