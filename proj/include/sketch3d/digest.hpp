#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sketch3d {

using Sha256 = std::array<std::uint8_t, 32>;

Sha256 sha256(std::span<const std::uint8_t> bytes);
Sha256 sha256(std::string_view text);
std::string to_hex(std::span<const std::uint8_t> bytes);
inline std::string sha256_hex(std::string_view text) { return to_hex(sha256(text)); }
inline std::string sha256_hex(std::span<const std::uint8_t> bytes) { return to_hex(sha256(bytes)); }
// Hex digest of a file's contents; throws std::runtime_error if unreadable.
std::string file_sha256_hex(const std::string& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Whitespace is ignored; throws std::invalid_argument on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace sketch3d
