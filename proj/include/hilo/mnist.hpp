#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hilo/encoders.hpp"

namespace hilo {

class IdxFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// "number zero" ... "number nine".
[[nodiscard]] std::string digit_label(int digit);

/// Reads an IDX image file and its label file (plain or gzip-compressed).
/// Pixels are scaled to [0, 1]; `resize` > 0 area-resamples each image to
/// resize x resize.
[[nodiscard]] std::vector<TargetImage> load_mnist(const std::filesystem::path& images,
                                                  const std::filesystem::path& labels, int resize = 0);

/// Loads `<dir>/<split>-images-idx3-ubyte[.gz]` with its labels; split is
/// "train" or "t10k".
[[nodiscard]] std::vector<TargetImage> load_mnist_split(const std::filesystem::path& dir, std::string_view split,
                                                        int resize = 0);

}  // namespace hilo
