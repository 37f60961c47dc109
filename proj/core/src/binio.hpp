#pragma once

// Little-endian byte buffer helpers shared by the weight and dataset
// containers. Readers bounds-check and report the failing offset.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg::binio {

class Writer {
public:
    void u16(uint16_t v) { put(&v, 2); }
    void u32(uint32_t v) { put(&v, 4); }
    void f64(double v) { put(&v, 8); }
    void bytes(const void* p, size_t n) { put(p, n); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        put(s.data(), s.size());
    }
    size_t size() const { return buf_.size(); }
    const std::vector<uint8_t>& buffer() const { return buf_; }
    // Patch a previously written u32 (for offsets known only later).
    void patch_u32(size_t at, uint32_t v) { std::memcpy(buf_.data() + at, &v, 4); }

private:
    void put(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<uint8_t> buf_;
};

class Reader {
public:
    Reader(const uint8_t* data, size_t size, std::string what) : data_(data), size_(size), what_(std::move(what)) {}

    uint16_t u16() { return get<uint16_t>(); }
    uint32_t u32() { return get<uint32_t>(); }
    double f64() { return get<double>(); }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    void bytes(void* out, size_t n) {
        need(n);
        std::memcpy(out, data_ + pos_, n);
        pos_ += n;
    }
    size_t pos() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }
    void expect_magic(const char magic[4]) {
        char got[5] = {0, 0, 0, 0, 0};
        bytes(got, 4);
        if (std::memcmp(got, magic, 4) != 0)
            throw DataError(fmt::format("{}: bad magic '{}' (expected '{}')", what_, got, magic));
    }

private:
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(size_t n) {
        if (pos_ + n > size_)
            throw DataError(fmt::format("{}: truncated at offset {} (need {} bytes, {} left)", what_, pos_, n, size_ - pos_));
    }
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    std::string what_;
};

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace tg::binio
