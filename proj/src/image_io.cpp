#include "hilo/image_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <png.h>

namespace hilo {

namespace {

static_assert(std::endian::native == std::endian::little, "PCPT I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

}  // namespace

std::vector<std::uint8_t> to_gray8(const Image& img, double cap) {
  if (!(cap > 0)) throw std::invalid_argument("display cap must be positive");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(img.size()));
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      const double v = std::clamp(img(r, c) / cap, 0.0, 1.0);
      out[i++] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
  }
  return out;
}

std::string encode_pgm(const Image& img, double cap) {
  const auto gray = to_gray8(img, cap);
  std::string out = "P5\n" + std::to_string(img.cols()) + " " + std::to_string(img.rows()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(gray.data()), gray.size());
  return out;
}

std::string encode_png(const Image& img, double cap) {
  const auto gray = to_gray8(img, cap);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.cols());
  image.height = static_cast<png_uint_32>(img.rows());
  image.format = PNG_FORMAT_GRAY;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, gray.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, gray.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> decode_gray_png(const std::string& png, int& height, int& width) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, png.data(), png.size())) {
    throw std::runtime_error(std::string("png decode failed: ") + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> out(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png decode failed: ") + image.message);
  }
  height = static_cast<int>(image.height);
  width = static_cast<int>(image.width);
  return out;
}

std::string encode_pcpt(const Image& img) {
  std::string out = "PCPT";
  put_u32(out, static_cast<std::uint32_t>(img.rows()));
  put_u32(out, static_cast<std::uint32_t>(img.cols()));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(img.size()));
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      const float f = static_cast<float>(img(r, c));
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  return out;
}

Image decode_pcpt(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "PCPT") != 0) throw std::runtime_error("not a PCPT file");
  const std::uint32_t h = get_u32(bytes, 4);
  const std::uint32_t w = get_u32(bytes, 8);
  if (bytes.size() != 12 + 4ull * h * w) throw std::runtime_error("PCPT payload size mismatch");
  Image img(h, w);
  std::size_t at = 12;
  for (std::uint32_t r = 0; r < h; ++r) {
    for (std::uint32_t c = 0; c < w; ++c, at += 4) {
      float f;
      std::memcpy(&f, bytes.data() + at, 4);
      img(r, c) = f;
    }
  }
  return img;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string base64_encode(const std::string& bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto n = (std::uint32_t(std::uint8_t(bytes[i])) << 16) | (std::uint32_t(std::uint8_t(bytes[i + 1])) << 8) |
                   std::uint8_t(bytes[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t n = std::uint32_t(std::uint8_t(bytes[i])) << 16;
    if (i + 1 < bytes.size()) n |= std::uint32_t(std::uint8_t(bytes[i + 1])) << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += (i + 1 < bytes.size()) ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

}  // namespace hilo
