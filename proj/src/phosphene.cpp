#include "hilo/phosphene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "hilo/random.hpp"

namespace hilo {

ParamVector UserParams::to_vector() const {
  return {rho,          lambda,    od_x,       od_y,         impl_x,     impl_y,   impl_rot,
          bright_scale, size_gain, streak_scale, theta_mean, theta_spread, freq_gain};
}

UserParams UserParams::from_vector(const ParamVector& v) {
  UserParams p;
  p.rho = v[0];
  p.lambda = v[1];
  p.od_x = v[2];
  p.od_y = v[3];
  p.impl_x = v[4];
  p.impl_y = v[5];
  p.impl_rot = v[6];
  p.bright_scale = v[7];
  p.size_gain = v[8];
  p.streak_scale = v[9];
  p.theta_mean = v[10];
  p.theta_spread = v[11];
  p.freq_gain = v[12];
  return p;
}

const std::array<std::string_view, kNumUserParams>& UserParams::names() {
  static constexpr std::array<std::string_view, kNumUserParams> kNames{
      "rho",          "lambda",    "od_x",         "od_y",       "impl_x",       "impl_y",   "impl_rot",
      "bright_scale", "size_gain", "streak_scale", "theta_mean", "theta_spread", "freq_gain"};
  return kNames;
}

bool UserParams::is_valid() const noexcept {
  const auto v = to_vector();
  if (!std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); })) return false;
  // theta_spread * 0.9 < 1 keeps every clipped per-electrode threshold positive.
  return rho > 0 && lambda >= 0 && lambda < 1 && bright_scale > 0 && size_gain >= 0 && streak_scale > 0 &&
         theta_mean > 0 && theta_spread >= 0 && theta_spread < 1.0 / 0.9;
}

void UserParams::validate() const {
  if (!is_valid()) {
    const auto v = to_vector();
    std::string desc;
    for (std::size_t i = 0; i < kNumUserParams; ++i) desc += fmt::format(" {}={}", names()[i], v[i]);
    throw std::invalid_argument("invalid user parameters:" + desc);
  }
}

double GridSpec::pixel_x(int col) const { return -half_extent_deg + (col + 0.5) * pixel_size_x(); }

double GridSpec::pixel_y(int row) const { return half_extent_deg - (row + 0.5) * pixel_size_y(); }

void Stimulus::validate(std::size_t n_electrodes) const {
  if (pulses.size() != n_electrodes) {
    throw std::invalid_argument(
        fmt::format("stimulus has {} rows but the array has {} electrodes", pulses.size(), n_electrodes));
  }
  for (std::size_t e = 0; e < pulses.size(); ++e) {
    const auto& p = pulses[e];
    if (!std::isfinite(p.amplitude) || p.amplitude < 0 || !std::isfinite(p.frequency) || p.frequency <= 0 ||
        !std::isfinite(p.pulse_duration) || p.pulse_duration <= 0) {
      throw std::invalid_argument(fmt::format("electrode {}: invalid pulse (amp={}, freq={}, dur={})", e,
                                              p.amplitude, p.frequency, p.pulse_duration));
    }
  }
}

Stimulus calibrate(const Stimulus& threshold_units, std::span<const double> thresholds_ua) {
  if (threshold_units.size() != thresholds_ua.size()) {
    throw std::invalid_argument("calibrate: threshold count does not match stimulus");
  }
  Stimulus out = threshold_units;
  for (std::size_t e = 0; e < out.size(); ++e) out.pulses[e].amplitude *= thresholds_ua[e];
  return out;
}

std::vector<Vec2> electrode_positions(const ArraySpec& spec, const UserParams& user) {
  const double c = std::cos(user.impl_rot);
  const double s = std::sin(user.impl_rot);
  const Vec2 offset{user.impl_x, user.impl_y};
  std::vector<Vec2> out;
  out.reserve(spec.size());
  for (int r = 0; r < spec.rows; ++r) {
    for (int col = 0; col < spec.cols; ++col) {
      const double x = (col - 0.5 * (spec.cols - 1)) * spec.pitch_um;
      const double y = (0.5 * (spec.rows - 1) - r) * spec.pitch_um;
      out.emplace_back(Vec2{c * x - s * y, s * x + c * y} + offset);
    }
  }
  return out;
}

std::vector<double> draw_threshold_offsets(std::size_t n_electrodes, std::uint64_t seed) {
  Rng rng{seed};
  std::vector<double> out(n_electrodes);
  for (auto& u : out) u = std::clamp(standard_normal(rng), -0.9, 3.0);
  return out;
}

std::vector<double> electrode_thresholds(const UserParams& user, std::span<const double> offsets) {
  std::vector<double> out(offsets.size());
  for (std::size_t e = 0; e < offsets.size(); ++e) out[e] = user.theta_mean * (1.0 + user.theta_spread * offsets[e]);
  return out;
}

ElectrodeArray make_electrode_array(const ArraySpec& spec, const UserParams& user,
                                    std::span<const double> threshold_offsets) {
  if (threshold_offsets.size() != spec.size()) {
    throw std::invalid_argument("threshold offsets do not match the array size");
  }
  ElectrodeArray array{spec, electrode_positions(spec, user), electrode_thresholds(user, threshold_offsets)};
  for (double t : array.thresholds_ua) {
    if (!(t > 0)) throw std::invalid_argument("electrode threshold must be positive");
  }
  return array;
}

ElectrodeArray make_unit_threshold_array(const ArraySpec& spec, const UserParams& user) {
  return {spec, electrode_positions(spec, user), std::vector<double>(spec.size(), 1.0)};
}

double axon_direction(const Vec2& point_deg, const UserParams& user) {
  const double dx = point_deg.x() - user.od_x;
  const double dy = point_deg.y() - user.od_y;
  if (dx == 0.0 && dy == 0.0) return 0.0;
  // Tangent of the circle through the disc, tangent to the horizontal at the
  // disc, is (dx^2 - dy^2, 2 dx dy): twice the polar angle seen from the disc.
  return 2.0 * std::atan2(dy, dx);
}

double phosphene_brightness(const Pulse& pulse, double threshold, const UserParams& user,
                            const ForwardConfig& config) {
  if (!(pulse.amplitude >= threshold)) return 0.0;
  const double ratio = pulse.amplitude / threshold;
  const double freq = 1.0 + user.freq_gain * (pulse.frequency / config.reference_frequency_hz - 1.0);
  const double dur = 1.0 + config.pulse_duration_gain * (pulse.pulse_duration / config.reference_pulse_ms - 1.0);
  return std::max(0.0, user.bright_scale * ratio * freq * dur);
}

PhospheneParams phosphene_params(const ElectrodeArray& array, std::size_t electrode, const Pulse& pulse,
                                 const UserParams& user, const ForwardConfig& config) {
  if (!std::isfinite(pulse.amplitude) || !std::isfinite(pulse.frequency) || !std::isfinite(pulse.pulse_duration)) {
    throw std::invalid_argument(fmt::format("electrode {}: non-finite stimulus", electrode));
  }
  if (pulse.amplitude < 0) throw std::invalid_argument(fmt::format("electrode {}: negative amplitude", electrode));
  const double threshold = array.thresholds_ua.at(electrode);

  PhospheneParams out;
  out.center_deg = array.positions_um.at(electrode) / config.microns_per_degree;
  out.brightness = phosphene_brightness(pulse, threshold, user, config);

  const double ratio = std::max(pulse.amplitude / threshold, 1.0);
  const double rho_eff = user.rho * (1.0 + user.size_gain * (ratio - 1.0));
  const double sigma_minor = rho_eff / config.microns_per_degree;
  const double sigma_major = sigma_minor * (1.0 + user.streak_scale * user.lambda / (1.0 - user.lambda));
  const double alpha = axon_direction(out.center_deg, user);
  Mat2 rot;
  rot << std::cos(alpha), -std::sin(alpha), std::sin(alpha), std::cos(alpha);
  const Mat2 diag = Vec2{sigma_major * sigma_major, sigma_minor * sigma_minor}.asDiagonal();
  out.covariance = rot * diag * rot.transpose();
  out.covariance(1, 0) = out.covariance(0, 1);
  return out;
}

Percept::Percept(GridSpec grid, Image data) : grid_(grid), data_(std::move(data)) {
  if (data_.rows() != grid_.height || data_.cols() != grid_.width) {
    throw std::invalid_argument("percept data does not match its grid");
  }
  max_brightness_ = data_.size() > 0 ? data_.maxCoeff() : 0.0;
}

bool Percept::operator==(const Percept& other) const {
  return grid_ == other.grid_ && data_.rows() == other.data_.rows() && data_.cols() == other.data_.cols() &&
         (data_ == other.data_).all();
}

void accumulate_phosphene(const PhospheneParams& p, const GridSpec& grid, Image& out) {
  if (p.brightness <= 0.0) return;
  const Mat2& s = p.covariance;
  const double det = s.determinant();
  const Mat2 inv = s.inverse();
  // 2*pi*b*det * N(x | mu, S) = b * sqrt(det) * exp(-q / 2)
  const double peak = p.brightness * std::sqrt(det);
  const double rx = std::sqrt(kPhospheneCutoff * s(0, 0));
  const double ry = std::sqrt(kPhospheneCutoff * s(1, 1));
  const double px = grid.pixel_size_x();
  const double py = grid.pixel_size_y();
  const double e = grid.half_extent_deg;
  const int c0 = std::max(0, static_cast<int>(std::floor((p.center_deg.x() - rx + e) / px)));
  const int c1 = std::min(grid.width - 1, static_cast<int>(std::ceil((p.center_deg.x() + rx + e) / px)));
  const int r0 = std::max(0, static_cast<int>(std::floor((e - p.center_deg.y() - ry) / py)));
  const int r1 = std::min(grid.height - 1, static_cast<int>(std::ceil((e - p.center_deg.y() + ry) / py)));
  for (int r = r0; r <= r1; ++r) {
    const double dy = grid.pixel_y(r) - p.center_deg.y();
    for (int c = c0; c <= c1; ++c) {
      const double dx = grid.pixel_x(c) - p.center_deg.x();
      const double q = inv(0, 0) * dx * dx + 2.0 * inv(0, 1) * dx * dy + inv(1, 1) * dy * dy;
      if (q <= kPhospheneCutoff) out(r, c) += peak * std::exp(-0.5 * q);
    }
  }
}

Percept render_percept(const Stimulus& stimulus, const UserParams& user, const ElectrodeArray& array,
                       const ForwardConfig& config) {
  stimulus.validate(array.size());
  Image img = Image::Zero(config.grid.height, config.grid.width);
  for (std::size_t e = 0; e < array.size(); ++e) {
    if (stimulus.pulses[e].amplitude < array.thresholds_ua[e]) continue;
    accumulate_phosphene(phosphene_params(array, e, stimulus.pulses[e], user, config), config.grid, img);
  }
  return Percept{config.grid, std::move(img)};
}

double percept_mse(const Percept& a, const Percept& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw std::invalid_argument(
        fmt::format("percept shapes differ: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
  }
  if (a.data().size() == 0) return 0.0;
  return (a.data() - b.data()).square().mean();
}

double displayed_brightness(const Percept& p) { return std::round(p.max_brightness() * 10.0) / 10.0; }

}  // namespace hilo
