#include <doctest.h>

#include <filesystem>
#include <string>

#include <unistd.h>

#include "hilo/image_io.hpp"
#include "hilo/mnist.hpp"

using namespace hilo;
namespace fs = std::filesystem;

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s += static_cast<char>((v >> shift) & 0xff);
}

std::string idx_images(std::uint32_t magic, std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                       const std::string& pixels) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, count);
  put_be32(s, rows);
  put_be32(s, cols);
  return s + pixels;
}

std::string idx_labels(std::uint32_t magic, const std::string& labels) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, static_cast<std::uint32_t>(labels.size()));
  return s + labels;
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("hilo_mnist_" + std::to_string(::getpid()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("digit labels") {
  CHECK(digit_label(8) == "number eight");
  CHECK(digit_label(0) == "number zero");
  CHECK_THROWS_AS((void)digit_label(10), std::invalid_argument);
}

TEST_CASE("synthetic IDX files") {
  TempDir dir;
  const auto img = dir.path / "img";
  const auto lab = dir.path / "lab";
  std::string pixels(2 * 2 * 3, '\0');
  pixels[4] = static_cast<char>(255);
  pixels[5] = static_cast<char>(51);

  SUBCASE("valid") {
    write_file(img, idx_images(kIdxImageMagic, 3, 2, 2, pixels));
    write_file(lab, idx_labels(kIdxLabelMagic, std::string{0, 8, 3}));
    const auto ds = load_mnist(img, lab);
    REQUIRE(ds.size() == 3);
    CHECK(ds[0].pixels().isZero(0.0));
    CHECK(ds[1].pixels()(0, 0) == 1.0);
    CHECK(ds[1].pixels()(0, 1) == doctest::Approx(0.2));
    CHECK(ds[1].label() == "number eight");
    CHECK(ds[1].digit() == 8);
    const auto small = load_mnist(img, lab, 1);
    CHECK(small[1].pixels()(0, 0) == doctest::Approx(0.3));
  }
  SUBCASE("bad magic") {
    write_file(img, idx_images(0x00000804, 3, 2, 2, pixels));
    write_file(lab, idx_labels(kIdxLabelMagic, std::string{0, 8, 3}));
    CHECK_THROWS_AS((void)load_mnist(img, lab), IdxFormatError);
    write_file(img, idx_images(kIdxImageMagic, 3, 2, 2, pixels));
    write_file(lab, idx_labels(kIdxImageMagic, std::string{0, 8, 3}));
    CHECK_THROWS_AS((void)load_mnist(img, lab), IdxFormatError);
  }
  SUBCASE("truncated") {
    write_file(img, idx_images(kIdxImageMagic, 3, 2, 2, pixels.substr(0, 7)));
    write_file(lab, idx_labels(kIdxLabelMagic, std::string{0, 8, 3}));
    CHECK_THROWS_AS((void)load_mnist(img, lab), IdxFormatError);
    write_file(img, std::string("\0\0\x08", 3));
    CHECK_THROWS_AS((void)load_mnist(img, lab), IdxFormatError);
  }
  SUBCASE("count mismatch") {
    write_file(img, idx_images(kIdxImageMagic, 3, 2, 2, pixels));
    write_file(lab, idx_labels(kIdxLabelMagic, std::string{0, 8}));
    CHECK_THROWS_AS((void)load_mnist(img, lab), IdxFormatError);
  }
}

TEST_CASE("bundled MNIST files parse") {
  const fs::path dir = HILO_MNIST_DIR;
  const auto test = load_mnist_split(dir, "t10k");
  CHECK(test.size() == 1500);
  CHECK(test[0].height() == 28);
  CHECK(test[0].width() == 28);
  const auto train = load_mnist_split(dir, "train", 16);
  CHECK(train.size() == 8500);
  CHECK(train[0].height() == 16);
  int seen[10] = {};
  for (const auto& t : train) {
    REQUIRE(t.digit() >= 0);
    REQUIRE(t.digit() <= 9);
    ++seen[t.digit()];
    CHECK(t.label() == digit_label(t.digit()));
  }
  for (int count : seen) CHECK(count > 500);
  CHECK_THROWS((void)load_mnist_split(dir, "nope"));
}
