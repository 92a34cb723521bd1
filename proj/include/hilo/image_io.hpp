#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hilo/phosphene.hpp"

namespace hilo {

/// Brightness at which display images saturate to white.
inline constexpr double kDefaultDisplayCap = 10.0;

/// 8-bit grayscale rendering: round(255 * min(v, cap) / cap).
[[nodiscard]] std::vector<std::uint8_t> to_gray8(const Image& img, double cap = kDefaultDisplayCap);

[[nodiscard]] std::string encode_pgm(const Image& img, double cap = kDefaultDisplayCap);
[[nodiscard]] std::string encode_png(const Image& img, double cap = kDefaultDisplayCap);

/// Decodes an 8-bit grayscale PNG into raw bytes (row-major). Used to check
/// the encoder; not a general PNG reader.
[[nodiscard]] std::vector<std::uint8_t> decode_gray_png(const std::string& png, int& height, int& width);

/// Raw float container: "PCPT", u32 height, u32 width, f32 data row-major,
/// all little-endian.
[[nodiscard]] std::string encode_pcpt(const Image& img);
[[nodiscard]] Image decode_pcpt(const std::string& bytes);

void write_file(const std::filesystem::path& path, const std::string& bytes);
[[nodiscard]] std::string read_file(const std::filesystem::path& path);

[[nodiscard]] std::string base64_encode(const std::string& bytes);

}  // namespace hilo
