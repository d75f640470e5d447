#pragma once

#include <cstddef>
#include <string_view>

namespace kginject::utf8 {

// Length in bytes of the code point starting with lead byte c (1 for invalid leads).
inline std::size_t sequence_length(unsigned char c) noexcept {
    if (c < 0x80) return 1;
    if ((c >> 5) == 0x6) return 2;
    if ((c >> 4) == 0xE) return 3;
    if ((c >> 3) == 0x1E) return 4;
    return 1;
}

inline std::size_t length(std::string_view s) noexcept {
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.size(); i += sequence_length(static_cast<unsigned char>(s[i]))) ++n;
    return n;
}

// Byte offset of code point index cp; s.size() when cp == length(s).
// Returns npos when cp is past the end.
inline std::size_t byte_offset(std::string_view s, std::size_t cp) noexcept {
    std::size_t i = 0;
    for (std::size_t n = 0; n < cp; ++n) {
        if (i >= s.size()) return std::string_view::npos;
        i += sequence_length(static_cast<unsigned char>(s[i]));
    }
    return i <= s.size() ? i : std::string_view::npos;
}

inline std::size_t codepoint_offset(std::string_view s, std::size_t byte) noexcept {
    return length(s.substr(0, byte));
}

}  // namespace kginject::utf8
