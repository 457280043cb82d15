#pragma once

// Internal little-endian serialization helpers shared by the binary file
// formats (embedding dumps, checkpoints). Not installed; include from src/.

#include <cstdint>
#include <cstring>
#include <string>

#include "alope/common.hpp"

namespace alope::binio {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u32(out, bits);
}

// Sequential little-endian reader over an in-memory buffer.
class ByteReader {
  public:
    ByteReader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                     buf_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(
                     buf_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos_ += 8;
        return v;
    }

    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    void f32_array(float* dst, std::size_t count) {
        need(4 * count, "f32 array");
        for (std::size_t i = 0; i < count; ++i) dst[i] = f32_unchecked();
    }

    std::string bytes(std::size_t count, const char* what) {
        need(count, what);
        std::string out = buf_.substr(pos_, count);
        pos_ += count;
        return out;
    }

    void raw_magic(char out[4]) {
        need(4, "magic");
        std::memcpy(out, buf_.data() + pos_, 4);
        pos_ += 4;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }
    const std::string& path() const { return path_; }

  private:
    float f32_unchecked() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                     buf_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos_ += 4;
        float f;
        std::memcpy(&f, &v, sizeof(f));
        return f;
    }

    void need(std::size_t n, const char* what) const {
        if (buf_.size() - pos_ < n)
            throw TruncatedFileError(path_ + ": truncated while reading " + std::string(what) +
                                     " (need " + std::to_string(n) + " bytes, have " +
                                     std::to_string(buf_.size() - pos_) + ")");
    }

    const std::string& buf_;
    std::size_t pos_ = 0;
    std::string path_;
};

}  // namespace alope::binio
