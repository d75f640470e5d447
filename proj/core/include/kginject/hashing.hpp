#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace kginject {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(std::string_view bytes);
Digest sha256_file(const std::filesystem::path& path);

std::string to_hex(const Digest& d);
Digest digest_from_hex(std::string_view hex);

}  // namespace kginject
