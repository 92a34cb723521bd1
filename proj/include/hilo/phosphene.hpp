#pragma once

// Forward model of an epiretinal implant: electrode geometry, one Gaussian
// phosphene per supra-threshold electrode, and additive summation of the
// phosphenes over the visual field.

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace hilo {

inline constexpr std::size_t kNumUserParams = 13;

using ParamVector = std::array<double, kNumUserParams>;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// User-specific perceptual parameters. Field order is the canonical order of
/// the 13-vector used by the optimizer and by serialization.
struct UserParams {
  double rho = 200.0;          ///< phosphene base size, µm on the retina
  double lambda = 0.3;         ///< elongation along the axon, [0, 1)
  double od_x = 15.0;          ///< optic disc center, deg
  double od_y = 0.0;           ///< optic disc center, deg
  double impl_x = 0.0;         ///< implant center offset, µm
  double impl_y = 0.0;         ///< implant center offset, µm
  double impl_rot = 0.0;       ///< implant rotation, rad
  double bright_scale = 1.0;   ///< brightness gain, > 0
  double size_gain = 0.25;     ///< amplitude -> size coupling, >= 0
  double streak_scale = 0.6;   ///< axonal streak spread, > 0
  double theta_mean = 40.0;    ///< mean threshold, µA
  double theta_spread = 0.15;  ///< relative per-electrode threshold variation, >= 0
  double freq_gain = 0.5;      ///< frequency -> brightness coupling

  [[nodiscard]] ParamVector to_vector() const;
  [[nodiscard]] static UserParams from_vector(const ParamVector& v);

  /// Throws std::invalid_argument when a field violates its domain.
  void validate() const;
  [[nodiscard]] bool is_valid() const noexcept;

  [[nodiscard]] static const std::array<std::string_view, kNumUserParams>& names();

  bool operator==(const UserParams&) const = default;
};

struct ArraySpec {
  int rows = 10;
  int cols = 10;
  double pitch_um = 400.0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Pixel grid over a square visual field centered on the fovea. Row 0 is the
/// top of the field (largest y).
struct GridSpec {
  int height = 48;
  int width = 48;
  double half_extent_deg = 14.0;

  [[nodiscard]] double pixel_x(int col) const;
  [[nodiscard]] double pixel_y(int row) const;
  [[nodiscard]] double pixel_size_x() const { return 2.0 * half_extent_deg / width; }
  [[nodiscard]] double pixel_size_y() const { return 2.0 * half_extent_deg / height; }
  bool operator==(const GridSpec&) const = default;
};

/// Fixed constants of the forward model that are not user-specific.
struct ForwardConfig {
  GridSpec grid{};
  double reference_frequency_hz = 20.0;
  double reference_pulse_ms = 0.45;
  double pulse_duration_gain = 0.0;  // no perceptual effect by default
  double microns_per_degree = 280.0;
};

struct Pulse {
  double amplitude = 0.0;     ///< µA, or multiples of threshold (see calibrate())
  double frequency = 20.0;    ///< Hz
  double pulse_duration = 0.45;  ///< ms

  bool operator==(const Pulse&) const = default;
};

/// One pulse train per electrode, in electrode order (row-major over the grid).
struct Stimulus {
  std::vector<Pulse> pulses;

  Stimulus() = default;
  explicit Stimulus(std::size_t n_electrodes, Pulse fill = {}) : pulses(n_electrodes, fill) {}

  [[nodiscard]] std::size_t size() const { return pulses.size(); }
  /// Throws std::invalid_argument on shape mismatch or a value outside its domain.
  void validate(std::size_t n_electrodes) const;
};

/// Converts per-electrode amplitudes expressed in threshold units into µA using
/// the given per-electrode thresholds.
[[nodiscard]] Stimulus calibrate(const Stimulus& threshold_units, std::span<const double> thresholds_ua);

/// Electrode positions on the retina and their thresholds for one user.
struct ElectrodeArray {
  ArraySpec spec;
  std::vector<Vec2> positions_um;
  std::vector<double> thresholds_ua;

  [[nodiscard]] std::size_t size() const { return positions_um.size(); }
};

/// Canonical grid centered at the origin, rotated by impl_rot and translated by
/// (impl_x, impl_y). Electrode e = row * cols + col; row 0 is the top row.
[[nodiscard]] std::vector<Vec2> electrode_positions(const ArraySpec& spec, const UserParams& user);

/// Standard-normal offsets clipped to [-0.9, 3], one per electrode, drawn from `seed`.
[[nodiscard]] std::vector<double> draw_threshold_offsets(std::size_t n_electrodes, std::uint64_t seed);

/// theta_e = theta_mean * (1 + theta_spread * u_e).
[[nodiscard]] std::vector<double> electrode_thresholds(const UserParams& user, std::span<const double> offsets);

[[nodiscard]] ElectrodeArray make_electrode_array(const ArraySpec& spec, const UserParams& user,
                                                  std::span<const double> threshold_offsets);

/// Array whose thresholds are all 1, so amplitudes are read in threshold units.
[[nodiscard]] ElectrodeArray make_unit_threshold_array(const ArraySpec& spec, const UserParams& user);

struct PhospheneParams {
  Vec2 center_deg = Vec2::Zero();
  Mat2 covariance = Mat2::Identity();  // deg^2
  double brightness = 0.0;
};

/// Orientation (rad) of the simplified axon path through a visual-field point:
/// the circle through the optic disc that is tangent to the horizontal there.
[[nodiscard]] double axon_direction(const Vec2& point_deg, const UserParams& user);

/// Brightness law. Zero below threshold; `amplitude / threshold` at the
/// reference frequency and pulse duration with bright_scale = 1.
[[nodiscard]] double phosphene_brightness(const Pulse& pulse, double threshold, const UserParams& user,
                                          const ForwardConfig& config = {});

[[nodiscard]] PhospheneParams phosphene_params(const ElectrodeArray& array, std::size_t electrode,
                                               const Pulse& pulse, const UserParams& user,
                                               const ForwardConfig& config = {});

/// Rendered brightness over the visual field, in threshold-scale units.
class Percept {
 public:
  Percept() = default;
  Percept(GridSpec grid, Image data);

  [[nodiscard]] const GridSpec& grid() const { return grid_; }
  [[nodiscard]] const Image& data() const { return data_; }
  [[nodiscard]] double max_brightness() const { return max_brightness_; }
  [[nodiscard]] int height() const { return static_cast<int>(data_.rows()); }
  [[nodiscard]] int width() const { return static_cast<int>(data_.cols()); }

  bool operator==(const Percept& other) const;

 private:
  GridSpec grid_{};
  Image data_;
  double max_brightness_ = 0.0;
};

/// Squared Mahalanobis radius beyond which a phosphene contributes nothing
/// (the Gaussian has decayed below 4e-6 of its peak there).
inline constexpr double kPhospheneCutoff = 25.0;

/// Adds one phosphene to `out` (an image laid out on `grid`).
void accumulate_phosphene(const PhospheneParams& p, const GridSpec& grid, Image& out);

[[nodiscard]] Percept render_percept(const Stimulus& stimulus, const UserParams& user, const ElectrodeArray& array,
                                     const ForwardConfig& config = {});

/// Mean squared pixel difference. Throws std::invalid_argument on shape mismatch.
[[nodiscard]] double percept_mse(const Percept& a, const Percept& b);

/// Displayed brightness number: max brightness rounded to one decimal.
[[nodiscard]] double displayed_brightness(const Percept& p);

}  // namespace hilo
