#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kginject/error.hpp"

namespace kginject {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// Append-only little-endian byte sink.
class ByteWriter {
public:
    template <class T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
    void put_string(std::string_view s) {
        bytes_.insert(bytes_.end(), reinterpret_cast<const std::uint8_t*>(s.data()),
                      reinterpret_cast<const std::uint8_t*>(s.data()) + s.size());
    }
    void put_f32(std::span<const float> v) {
        put_bytes({reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(float)});
    }

    const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

// Bounds-checked little-endian reader. Running past the end throws ParseError.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <class T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void get_bytes(std::span<std::uint8_t> out) {
        need(out.size());
        std::memcpy(out.data(), bytes_.data() + pos_, out.size());
        pos_ += out.size();
    }
    void get_f32(std::span<float> out) {
        need(out.size() * sizeof(float));
        std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(float));
        pos_ += out.size() * sizeof(float);
    }

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size())
            throw ParseError("unexpected end of data at byte " + std::to_string(pos_) + " (need " +
                             std::to_string(n) + ")");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace kginject
