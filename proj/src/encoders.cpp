#include "hilo/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "hilo/random.hpp"

namespace hilo {

TargetImage::TargetImage(Image pixels, std::string label, int digit)
    : pixels_(std::move(pixels)), label_(std::move(label)), digit_(digit) {
  if (label_.empty()) throw std::invalid_argument("target label must not be empty");
  if (pixels_.size() == 0) throw std::invalid_argument("target image is empty");
  pixels_ = pixels_.unaryExpr([](double v) { return std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0; });
}

namespace {

// rows_out x n_in matrix of overlap fractions between output cells and input
// cells along one axis; each row sums to 1.
Eigen::MatrixXd pooling_weights(int n_in, int n_out) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n_out, n_in);
  const double step = static_cast<double>(n_in) / n_out;
  for (int o = 0; o < n_out; ++o) {
    const double lo = o * step;
    const double hi = (o + 1) * step;
    for (int i = static_cast<int>(std::floor(lo)); i < n_in && i < hi; ++i) {
      const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0) w(o, i) = overlap / step;
    }
  }
  return w;
}

}  // namespace

Image area_resample(const Image& src, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("resample size must be positive");
  const Eigen::MatrixXd wy = pooling_weights(static_cast<int>(src.rows()), rows);
  const Eigen::MatrixXd wx = pooling_weights(static_cast<int>(src.cols()), cols);
  const Eigen::MatrixXd out = wy * src.matrix() * wx.transpose();
  return out.array();
}

Percept target_on_grid(const TargetImage& target, const GridSpec& grid, double half_extent_deg) {
  const Image& src = target.pixels();
  const int h = target.height();
  const int w = target.width();
  const double sx = 2.0 * half_extent_deg / w;
  const double sy = 2.0 * half_extent_deg / h;
  Image out = Image::Zero(grid.height, grid.width);
  for (int r = 0; r < grid.height; ++r) {
    const double y = grid.pixel_y(r);
    if (y < -half_extent_deg || y > half_extent_deg) continue;
    const double v = std::clamp((half_extent_deg - y) / sy - 0.5, 0.0, h - 1.0);
    const int i0 = std::min(static_cast<int>(v), h - 1);
    const int i1 = std::min(i0 + 1, h - 1);
    const double fy = v - i0;
    for (int c = 0; c < grid.width; ++c) {
      const double x = grid.pixel_x(c);
      if (x < -half_extent_deg || x > half_extent_deg) continue;
      const double u = std::clamp((x + half_extent_deg) / sx - 0.5, 0.0, w - 1.0);
      const int j0 = std::min(static_cast<int>(u), w - 1);
      const int j1 = std::min(j0 + 1, w - 1);
      const double fx = u - j0;
      out(r, c) = (1 - fy) * ((1 - fx) * src(i0, j0) + fx * src(i0, j1)) +
                  fy * ((1 - fx) * src(i1, j0) + fx * src(i1, j1));
    }
  }
  return Percept{grid, std::move(out)};
}

double array_half_extent_deg(const ArraySpec& spec, const ForwardConfig& config) {
  return 0.5 * std::max(spec.rows, spec.cols) * spec.pitch_um / config.microns_per_degree;
}

PhiBox PhiBox::defaults() {
  PhiBox box;
  //            rho    lambda od_x  od_y  impl_x  impl_y  rot   bright size  streak theta spread freq
  box.low = {100.0, 0.0, 13.0, -3.0, -500.0, -500.0, -0.5, 0.5, 0.0, 0.2, 20.0, 0.0, 0.0};
  box.high = {300.0, 0.6, 17.0, 3.0, 500.0, 500.0, 0.5, 1.5, 0.5, 1.0, 60.0, 0.3, 1.0};
  return box;
}

void PhiBox::validate() const {
  for (std::size_t i = 0; i < kNumUserParams; ++i) {
    if (!(low[i] < high[i])) {
      throw std::invalid_argument(
          fmt::format("phi box: {} has low {} >= high {}", UserParams::names()[i], low[i], high[i]));
    }
  }
}

UserParams PhiBox::midpoint() const {
  ParamVector half;
  half.fill(0.5);
  return denormalize(half);
}

bool PhiBox::contains(const UserParams& p) const {
  const auto v = p.to_vector();
  for (std::size_t i = 0; i < kNumUserParams; ++i) {
    if (v[i] < low[i] || v[i] > high[i]) return false;
  }
  return true;
}

PhiBox PhiBox::expanded(double fraction) const {
  PhiBox out = *this;
  for (std::size_t i = 0; i < kNumUserParams; ++i) {
    const double pad = fraction * (high[i] - low[i]);
    out.low[i] -= pad;
    out.high[i] += pad;
  }
  return out;
}

ParamVector PhiBox::normalize(const UserParams& p) const {
  const auto v = p.to_vector();
  ParamVector out;
  for (std::size_t i = 0; i < kNumUserParams; ++i) out[i] = (v[i] - low[i]) / (high[i] - low[i]);
  return out;
}

UserParams PhiBox::denormalize(const ParamVector& unit) const {
  ParamVector v;
  for (std::size_t i = 0; i < kNumUserParams; ++i) v[i] = low[i] * (1.0 - unit[i]) + high[i] * unit[i];
  return UserParams::from_vector(v);
}

UserParams PhiBox::sample_uniform(std::uint64_t seed) const {
  Rng rng{seed};
  ParamVector v;
  for (std::size_t i = 0; i < kNumUserParams; ++i) v[i] = uniform(rng, low[i], high[i]);
  return UserParams::from_vector(v);
}

UserParams dse_default_phi(const PhiBox& box) {
  box.validate();
  return box.midpoint();
}

Stimulus naive_encode(const TargetImage& target, const ArraySpec& array, double amp_max,
                      const ForwardConfig& config) {
  if (!(amp_max > 0)) throw std::invalid_argument("naive_encode: amp_max must be positive");
  const Image pooled = area_resample(target.pixels(), array.rows, array.cols);
  Stimulus out(array.size(), Pulse{0.0, config.reference_frequency_hz, config.reference_pulse_ms});
  for (int r = 0; r < array.rows; ++r) {
    for (int c = 0; c < array.cols; ++c) out.pulses[static_cast<std::size_t>(r * array.cols + c)].amplitude = pooled(r, c) * amp_max;
  }
  return out;
}

std::vector<PhospheneGeometry> phosphene_geometry(const ArraySpec& spec, const UserParams& user,
                                                  const ForwardConfig& config) {
  const auto positions = electrode_positions(spec, user);
  const double k = 1.0 + user.streak_scale * user.lambda / (1.0 - user.lambda);
  std::vector<PhospheneGeometry> out;
  out.reserve(positions.size());
  for (const auto& p : positions) {
    const Vec2 center = p / config.microns_per_degree;
    const double alpha = axon_direction(center, user);
    out.push_back({center, std::cos(alpha), std::sin(alpha), k});
  }
  return out;
}

DifferentiableRenderer::DifferentiableRenderer(ArraySpec array, ForwardConfig config)
    : array_(array), config_(config) {}

Image DifferentiableRenderer::forward(const UserParams& user, std::span<const double> amplitude,
                                      std::span<const double> frequency, std::span<const double> pulse_ms) {
  const std::size_t n = array_.size();
  if (amplitude.size() != n || frequency.size() != n || pulse_ms.size() != n) {
    throw std::invalid_argument("differentiable renderer: stimulus does not match the array");
  }
  const GridSpec& grid = config_.grid;
  const auto geometry = phosphene_geometry(array_, user, config_);
  Image img = Image::Zero(grid.height, grid.width);
  tape_.assign(n, {});
  taps_.clear();

  const double px = grid.pixel_size_x();
  const double py = grid.pixel_size_y();
  const double ext = grid.half_extent_deg;
  for (std::size_t e = 0; e < n; ++e) {
    ElectrodeTape& t = tape_[e];
    t.begin = t.end = taps_.size();
    const double a = amplitude[e];
    if (!std::isfinite(a) || !std::isfinite(frequency[e])) {
      throw std::invalid_argument(fmt::format("differentiable renderer: non-finite stimulus at electrode {}", e));
    }
    const bool on = a >= 1.0;
    if (!on && !surrogate_) continue;

    const double freq = 1.0 + user.freq_gain * (frequency[e] / config_.reference_frequency_hz - 1.0);
    const double dur = 1.0 + config_.pulse_duration_gain * (pulse_ms[e] / config_.reference_pulse_ms - 1.0);
    const double raw = user.bright_scale * a * freq * dur;
    if (raw <= 0.0) continue;
    t.virtual_only = !on;
    t.brightness = raw;
    t.db_da = user.bright_scale * freq * dur;
    if (on) {
      t.db_df = user.bright_scale * a * user.freq_gain / config_.reference_frequency_hz * dur;
      t.sigma = user.rho * (1.0 + user.size_gain * (a - 1.0)) / config_.microns_per_degree;
      t.dsigma_da = user.rho * user.size_gain / config_.microns_per_degree;
    } else {
      t.sigma = user.rho / config_.microns_per_degree;
    }

    const PhospheneGeometry& g = geometry[e];
    t.k = g.elongation;
    const double major2 = (t.sigma * t.k) * (t.sigma * t.k);
    const double minor2 = t.sigma * t.sigma;
    const double sxx = major2 * g.cos_a * g.cos_a + minor2 * g.sin_a * g.sin_a;
    const double syy = major2 * g.sin_a * g.sin_a + minor2 * g.cos_a * g.cos_a;
    const double rx = std::sqrt(kPhospheneCutoff * sxx);
    const double ry = std::sqrt(kPhospheneCutoff * syy);
    const Vec2& mu = g.center_deg;
    const int c0 = std::max(0, static_cast<int>(std::floor((mu.x() - rx + ext) / px)));
    const int c1 = std::min(grid.width - 1, static_cast<int>(std::ceil((mu.x() + rx + ext) / px)));
    const int r0 = std::max(0, static_cast<int>(std::floor((ext - mu.y() - ry) / py)));
    const int r1 = std::min(grid.height - 1, static_cast<int>(std::ceil((ext - mu.y() + ry) / py)));

    const double inv_k2 = 1.0 / (t.k * t.k);
    const double inv_s2 = 1.0 / minor2;
    const double peak = t.brightness * t.k * minor2;
    for (int r = r0; r <= r1; ++r) {
      const double dy = grid.pixel_y(r) - mu.y();
      for (int c = c0; c <= c1; ++c) {
        const double dx = grid.pixel_x(c) - mu.x();
        const double u = g.cos_a * dx + g.sin_a * dy;
        const double v = -g.sin_a * dx + g.cos_a * dy;
        const double q = (u * u * inv_k2 + v * v) * inv_s2;
        if (q > kPhospheneCutoff) continue;
        const double ex = std::exp(-0.5 * q);
        if (on) img(r, c) += peak * ex;
        taps_.push_back({r * grid.width + c, q, ex});
      }
    }
    t.end = taps_.size();
  }
  return img;
}

void DifferentiableRenderer::backward(const Image& d_image, std::span<double> d_amplitude,
                                      std::span<double> d_frequency) const {
  const double* dimg = d_image.data();
  for (std::size_t e = 0; e < tape_.size(); ++e) {
    const ElectrodeTape& t = tape_[e];
    double g_b = 0.0;
    double g_s = 0.0;
    for (std::size_t i = t.begin; i < t.end; ++i) {
      const Tap& tap = taps_[i];
      const double w = dimg[tap.pixel] * tap.e;
      g_b += w;
      g_s += w * (2.0 + tap.q);
    }
    // d/db = k s^2 E ; d/ds = b k s E (2 + q)
    g_b *= t.k * t.sigma * t.sigma;
    g_s *= t.brightness * t.k * t.sigma;
    d_amplitude[e] = g_b * t.db_da + (t.virtual_only ? 0.0 : g_s * t.dsigma_da);
    d_frequency[e] = t.virtual_only ? 0.0 : g_b * t.db_df;
  }
}

}  // namespace hilo
