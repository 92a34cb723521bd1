#include "hilo/mnist.hpp"

#include <array>

#include <fmt/format.h>
#include <zlib.h>

namespace hilo {

namespace {

// Whole-file read through zlib, which passes non-gzip input through unchanged.
std::string read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf;
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), n);
  int err = Z_OK;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_BUF_ERROR)) {
    throw IdxFormatError(fmt::format("{}: read error ({})", path.string(), msg ? msg : "?"));
  }
  return out;
}

std::uint32_t be32(const std::string& b, std::size_t at) {
  return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto& name : {stem, stem + ".gz"}) {
    if (std::filesystem::exists(dir / name)) return dir / name;
  }
  throw std::runtime_error(fmt::format("no {} (or .gz) in {}", stem, dir.string()));
}

}  // namespace

std::string digit_label(int digit) {
  static constexpr std::array<const char*, 10> kNames{"zero", "one", "two",   "three", "four",
                                                      "five", "six", "seven", "eight", "nine"};
  if (digit < 0 || digit > 9) throw std::invalid_argument(fmt::format("not a digit label: {}", digit));
  return std::string("number ") + kNames[static_cast<std::size_t>(digit)];
}

std::vector<TargetImage> load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels,
                                    int resize) {
  const std::string img = read_maybe_gzip(images);
  const std::string lab = read_maybe_gzip(labels);
  if (img.size() < 16) throw IdxFormatError(images.string() + ": truncated header");
  if (lab.size() < 8) throw IdxFormatError(labels.string() + ": truncated header");
  if (be32(img, 0) != kIdxImageMagic) {
    throw IdxFormatError(fmt::format("{}: bad magic 0x{:08x}", images.string(), be32(img, 0)));
  }
  if (be32(lab, 0) != kIdxLabelMagic) {
    throw IdxFormatError(fmt::format("{}: bad magic 0x{:08x}", labels.string(), be32(lab, 0)));
  }
  const std::uint32_t count = be32(img, 4);
  const std::uint32_t rows = be32(img, 8);
  const std::uint32_t cols = be32(img, 12);
  const std::uint32_t label_count = be32(lab, 4);
  if (count != label_count) {
    throw IdxFormatError(fmt::format("image count {} does not match label count {}", count, label_count));
  }
  const std::size_t pixels = std::size_t{rows} * cols;
  if (img.size() < 16 + pixels * count) throw IdxFormatError(images.string() + ": truncated image data");
  if (lab.size() < 8 + std::size_t{count}) throw IdxFormatError(labels.string() + ": truncated label data");

  std::vector<TargetImage> out;
  out.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    Image px(rows, cols);
    const std::size_t base = 16 + pixels * n;
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) px(r, c) = std::uint8_t(img[base + r * cols + c]) / 255.0;
    }
    if (resize > 0) px = area_resample(px, resize, resize);
    const int digit = std::uint8_t(lab[8 + n]);
    out.emplace_back(std::move(px), digit_label(digit), digit);
  }
  return out;
}

std::vector<TargetImage> load_mnist_split(const std::filesystem::path& dir, std::string_view split, int resize) {
  const std::string s{split};
  return load_mnist(find_idx(dir, s + "-images-idx3-ubyte"), find_idx(dir, s + "-labels-idx1-ubyte"), resize);
}

}  // namespace hilo
