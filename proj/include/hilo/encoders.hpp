#pragma once

// Stimulus encoders: the naive per-pixel encoder and the deep stimulus encoder
// (DSE), a residual MLP trained through a differentiable copy of the forward
// model to invert it for any user parameters in a training box.
//
// Encoders emit amplitudes in threshold units (multiples of each electrode's
// threshold). calibrate() turns them into µA with whatever thresholds the
// device believes in.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hilo/phosphene.hpp"

namespace hilo {

/// Grayscale target in [0, 1] with a text description ("number eight").
class TargetImage {
 public:
  TargetImage(Image pixels, std::string label, int digit = -1);

  [[nodiscard]] const Image& pixels() const { return pixels_; }
  [[nodiscard]] const std::string& label() const { return label_; }
  [[nodiscard]] int digit() const { return digit_; }
  [[nodiscard]] int height() const { return static_cast<int>(pixels_.rows()); }
  [[nodiscard]] int width() const { return static_cast<int>(pixels_.cols()); }

 private:
  Image pixels_;
  std::string label_;
  int digit_;
};

/// Area-weighted average pooling of an image onto a rows x cols grid.
[[nodiscard]] Image area_resample(const Image& src, int rows, int cols);

/// Bilinear placement of the target onto the percept grid: the target covers
/// the square [-half_extent, half_extent]^2 (deg), zero outside.
[[nodiscard]] Percept target_on_grid(const TargetImage& target, const GridSpec& grid, double half_extent_deg);

/// Half-width (deg) of the array's nominal footprint, cols * pitch / 2.
[[nodiscard]] double array_half_extent_deg(const ArraySpec& spec, const ForwardConfig& config = {});

/// Per-dimension search/training ranges for the 13 user parameters.
struct PhiBox {
  ParamVector low{};
  ParamVector high{};

  /// Ranges used throughout the experiments.
  [[nodiscard]] static PhiBox defaults();

  void validate() const;
  [[nodiscard]] UserParams midpoint() const;
  [[nodiscard]] bool contains(const UserParams& p) const;
  /// Box widened by `fraction` of its width on every side.
  [[nodiscard]] PhiBox expanded(double fraction) const;
  /// Maps into [0, 1]^13 (values outside the box map outside [0, 1]).
  [[nodiscard]] ParamVector normalize(const UserParams& p) const;
  [[nodiscard]] UserParams denormalize(const ParamVector& unit) const;
  [[nodiscard]] UserParams sample_uniform(std::uint64_t seed) const;

  bool operator==(const PhiBox&) const = default;
};

/// The DSE's fallback guess when nothing is known about the user.
[[nodiscard]] UserParams dse_default_phi(const PhiBox& box);

/// Pools the target to the array resolution; amplitude_e = pooled_e * amp_max.
[[nodiscard]] Stimulus naive_encode(const TargetImage& target, const ArraySpec& array, double amp_max,
                                    const ForwardConfig& config = {});

/// Per-phosphene geometry that does not depend on the stimulus.
struct PhospheneGeometry {
  Vec2 center_deg;
  double cos_a = 1.0;
  double sin_a = 0.0;
  double elongation = 1.0;  ///< sigma_major / sigma_minor
};

[[nodiscard]] std::vector<PhospheneGeometry> phosphene_geometry(const ArraySpec& spec, const UserParams& user,
                                                                const ForwardConfig& config = {});

/// Differentiable forward model over threshold-unit amplitudes. Agrees with
/// render_percept() on a unit-threshold array.
class DifferentiableRenderer {
 public:
  DifferentiableRenderer(ArraySpec array, ForwardConfig config);

  /// When enabled, backward() also reports a straight-through gradient for
  /// sub-threshold electrodes, as if the linear brightness law continued below
  /// threshold at base size. Forward output is unaffected. Off by default, in
  /// which case backward() is the exact gradient.
  void set_subthreshold_surrogate(bool on) { surrogate_ = on; }
  [[nodiscard]] bool subthreshold_surrogate() const { return surrogate_; }

  /// Renders and records what backward() needs.
  [[nodiscard]] Image forward(const UserParams& user, std::span<const double> amplitude,
                              std::span<const double> frequency, std::span<const double> pulse_ms);
  /// Gradient of a scalar loss w.r.t. amplitude and frequency given dL/dimage.
  void backward(const Image& d_image, std::span<double> d_amplitude, std::span<double> d_frequency) const;

  [[nodiscard]] const ArraySpec& array() const { return array_; }
  [[nodiscard]] const ForwardConfig& config() const { return config_; }

 private:
  struct Tap {
    int pixel;
    double q;  // squared Mahalanobis radius
    double e;  // exp(-q / 2)
  };
  struct ElectrodeTape {
    double brightness = 0.0;
    double sigma = 0.0;     // sigma_minor, deg
    double k = 1.0;         // elongation
    double db_da = 0.0;
    double db_df = 0.0;
    double dsigma_da = 0.0;
    bool virtual_only = false;  // sub-threshold; taps only feed the surrogate
    std::size_t begin = 0, end = 0;  // range into taps_
  };

  ArraySpec array_;
  ForwardConfig config_;
  std::vector<ElectrodeTape> tape_;
  std::vector<Tap> taps_;
  bool surrogate_ = false;
};

struct DseArchitecture {
  int target_height = 16;
  int target_width = 16;
  int width = 256;
  int blocks = 4;
  int n_electrodes = 100;
  double leaky_slope = 0.01;
  double amp_max = 10.0;  ///< threshold units
  double freq_min = 5.0;
  double freq_max = 60.0;
  double pulse_ms = 0.45;
  double bn_eps = 1e-5;

  [[nodiscard]] int input_size() const { return target_height * target_width + static_cast<int>(kNumUserParams); }
  bool operator==(const DseArchitecture&) const = default;
};

/// Residual MLP: input layer, `blocks` residual blocks
/// h <- h + lrelu(BN(W h + b)), and a linear head squashed into the stimulus
/// ranges by sigmoids.
class DseModel {
 public:
  DseModel() = default;
  DseModel(DseArchitecture arch, PhiBox box, std::uint64_t seed);

  [[nodiscard]] const DseArchitecture& architecture() const { return arch_; }
  [[nodiscard]] const PhiBox& phi_box() const { return box_; }

  /// Trainable tensors in a fixed order: W_in, b_in, {W, b, gamma, beta} per
  /// block, W_out, b_out.
  [[nodiscard]] std::vector<Eigen::MatrixXd>& params() { return params_; }
  [[nodiscard]] const std::vector<Eigen::MatrixXd>& params() const { return params_; }
  [[nodiscard]] std::vector<Eigen::VectorXd>& running_mean() { return running_mean_; }
  [[nodiscard]] const std::vector<Eigen::VectorXd>& running_mean() const { return running_mean_; }
  [[nodiscard]] std::vector<Eigen::VectorXd>& running_var() { return running_var_; }
  [[nodiscard]] const std::vector<Eigen::VectorXd>& running_var() const { return running_var_; }

  /// Network input column for one (target, phi) pair.
  [[nodiscard]] Eigen::VectorXd make_input(const TargetImage& target, const UserParams& phi) const;

  /// Raw head outputs (2 * n_e x batch) in inference mode.
  [[nodiscard]] Eigen::MatrixXd infer_logits(const Eigen::MatrixXd& inputs) const;

  [[nodiscard]] bool all_finite() const;

  void save(std::ostream& out) const;
  [[nodiscard]] static DseModel load(std::istream& in);
  void save(const std::filesystem::path& path) const;
  [[nodiscard]] static DseModel load(const std::filesystem::path& path);

 private:
  DseArchitecture arch_{};
  PhiBox box_{};
  std::vector<Eigen::MatrixXd> params_;
  std::vector<Eigen::VectorXd> running_mean_;
  std::vector<Eigen::VectorXd> running_var_;
};

/// Maps head logits for one sample into a threshold-unit stimulus.
[[nodiscard]] Stimulus logits_to_stimulus(const DseArchitecture& arch, const Eigen::Ref<const Eigen::VectorXd>& logits);

/// Inference-mode encoding; output amplitudes lie in [0, amp_max] threshold units.
[[nodiscard]] Stimulus dse_forward(const DseModel& model, const TargetImage& target, const UserParams& phi);
[[nodiscard]] std::vector<Stimulus> dse_forward_batch(const DseModel& model, std::span<const TargetImage> targets,
                                                      const UserParams& phi);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One training example: a target and the user parameters it is rendered for.
struct TrainingPair {
  const TargetImage* target;
  UserParams phi;
};

struct DseGradients {
  std::vector<Eigen::MatrixXd> params;
  std::vector<Eigen::VectorXd> batch_mean;  ///< per block, for running statistics
  std::vector<Eigen::VectorXd> batch_var;   ///< biased
};

/// Mean percept MSE over the batch with batch-statistics normalization
/// (training mode). Fills `grads` when non-null. `renderer` must match the
/// model's electrode count.
double dse_batch_loss(const DseModel& model, std::span<const TrainingPair> batch, DifferentiableRenderer& renderer,
                      double target_half_extent_deg, DseGradients* grads);

/// Mean percept MSE over pairs, inference mode.
[[nodiscard]] double dse_eval_loss(const DseModel& model, std::span<const TrainingPair> pairs,
                                   const ArraySpec& array, const ForwardConfig& config,
                                   double target_half_extent_deg);

struct DseTrainConfig {
  ArraySpec array{};
  ForwardConfig forward{};
  DseArchitecture arch{};
  int steps = 50000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double min_learning_rate = 1e-5;
  int eval_every = 250;
  int plateau_patience = 4;  ///< evaluations without improvement before halving
  int validation_pairs = 256;
  double bn_momentum = 0.1;
  bool subthreshold_surrogate = true;
  std::uint64_t seed = 1;
  double target_half_extent_deg = 0.0;  ///< 0 selects the array footprint
};

struct TrainingCurvePoint {
  int step;
  double train_loss;
  double val_loss;
  double learning_rate;
};

struct DseTrainResult {
  DseModel model;  ///< best-validation checkpoint
  int best_step = 0;
  double best_val_loss = 0.0;
  double initial_val_loss = 0.0;
  std::vector<TrainingCurvePoint> curve;
};

using TrainingProgress = std::function<void(const TrainingCurvePoint&)>;

/// Trains a DSE with phi ~ U(box) and targets drawn from `train`; validation
/// uses a fixed set of pairs from `validation`.
[[nodiscard]] DseTrainResult dse_train(const PhiBox& box, std::span<const TargetImage> train,
                                       std::span<const TargetImage> validation, const DseTrainConfig& config,
                                       const TrainingProgress& progress = {});

void write_training_curve_csv(const std::filesystem::path& path, std::span<const TrainingCurvePoint> curve);

}  // namespace hilo
