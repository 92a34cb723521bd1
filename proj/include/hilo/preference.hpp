#pragma once

// Preferential Gaussian process: probit pairwise likelihood, Laplace
// approximation of the posterior over latent utilities at the duel points,
// and the Gaussian predictive at new inputs.
//
// Inputs are points in a normalized space (the optimizer maps phi into the
// unit cube before calling in here).

#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace hilo {

/// Standard normal CDF.
[[nodiscard]] double probit(double x);

/// P(first preferred) = probit(g1 - g2).
[[nodiscard]] double pref_likelihood(double g1, double g2);

/// log probit(z), accurate far into the lower tail.
[[nodiscard]] double log_probit(double z);

/// d/dz log probit(z) = pdf(z) / cdf(z).
[[nodiscard]] double inverse_mills(double z);

/// Squared-exponential kernel with per-dimension lengthscales. The jitter is a
/// nugget added whenever two inputs coincide exactly, so it appears on the
/// diagonal of every Gram matrix and in the prior variance.
class SeKernel {
 public:
  SeKernel() = default;
  SeKernel(double signal_variance, Eigen::VectorXd lengthscales, double jitter);
  /// Same lengthscale in every one of `dims` dimensions.
  [[nodiscard]] static SeKernel isotropic(int dims, double signal_variance = 1.0, double lengthscale = 0.2,
                                          double jitter = 1e-6);

  [[nodiscard]] double operator()(const Eigen::Ref<const Eigen::VectorXd>& a,
                                  const Eigen::Ref<const Eigen::VectorXd>& b) const;
  /// Rows of `x` are points.
  [[nodiscard]] Eigen::MatrixXd gram(const Eigen::MatrixXd& x) const;
  [[nodiscard]] Eigen::VectorXd cross(const Eigen::MatrixXd& x, const Eigen::Ref<const Eigen::VectorXd>& p) const;

  [[nodiscard]] double prior_variance() const { return signal_variance_ + jitter_; }
  [[nodiscard]] double signal_variance() const { return signal_variance_; }
  [[nodiscard]] const Eigen::VectorXd& lengthscales() const { return lengthscales_; }
  [[nodiscard]] double jitter() const { return jitter_; }
  [[nodiscard]] int dims() const { return static_cast<int>(lengthscales_.size()); }
  [[nodiscard]] SeKernel with_jitter(double jitter) const;

 private:
  double signal_variance_ = 1.0;
  Eigen::VectorXd lengthscales_;
  double jitter_ = 1e-6;
};

/// One observed preference: `winner` was chosen over `loser`.
struct PairwiseDuel {
  Eigen::VectorXd winner;
  Eigen::VectorXd loser;
};

/// Unique duel points in order of first appearance, and each duel as a
/// (winner, loser) index pair into them.
struct DuelDesign {
  Eigen::MatrixXd points;
  std::vector<std::pair<int, int>> pairs;
};

/// Throws std::invalid_argument for a duel whose two points coincide or whose
/// dimensions disagree.
[[nodiscard]] DuelDesign make_design(std::span<const PairwiseDuel> duels);

/// Laplace objective up to a constant: sum log probit(g_w - g_l) - g' K^-1 g / 2.
/// `g` is ordered like design.points; a design may hold points without duels.
[[nodiscard]] double log_posterior(const DuelDesign& design, const Eigen::VectorXd& g, const SeKernel& kernel);
[[nodiscard]] Eigen::VectorXd grad_log_posterior(const DuelDesign& design, const Eigen::VectorXd& g,
                                                 const SeKernel& kernel);
[[nodiscard]] double log_posterior(std::span<const PairwiseDuel> duels, const Eigen::VectorXd& g,
                                   const SeKernel& kernel);
[[nodiscard]] Eigen::VectorXd grad_log_posterior(std::span<const PairwiseDuel> duels, const Eigen::VectorXd& g,
                                                 const SeKernel& kernel);

struct LaplaceOptions {
  int max_iterations = 100;
  double tolerance = 1e-6;  ///< on the max-norm of the objective gradient
  double max_jitter = 1e-2;
};

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;
};

/// Joint Gaussian of (g(a), g(b)).
struct PairPrediction {
  double mean_a = 0.0, mean_b = 0.0;
  double var_a = 0.0, var_b = 0.0;
  double cov = 0.0;
};

/// Laplace posterior. Immutable once built; safe to query concurrently.
class PreferencePosterior {
 public:
  /// The prior: no data, mean 0 and prior variance everywhere.
  explicit PreferencePosterior(SeKernel kernel);

  [[nodiscard]] const SeKernel& kernel() const { return kernel_; }
  [[nodiscard]] const Eigen::MatrixXd& points() const { return design_.points; }
  [[nodiscard]] const std::vector<std::pair<int, int>>& pairs() const { return design_.pairs; }
  /// MAP utilities at points().
  [[nodiscard]] const Eigen::VectorXd& utilities() const { return g_; }
  [[nodiscard]] std::size_t num_duels() const { return design_.pairs.size(); }

  [[nodiscard]] Prediction predict(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  [[nodiscard]] PairPrediction predict_pair(const Eigen::Ref<const Eigen::VectorXd>& a,
                                            const Eigen::Ref<const Eigen::VectorXd>& b) const;

  /// Covariance of the Laplace posterior over utilities(), (K^-1 + W)^-1.
  [[nodiscard]] Eigen::MatrixXd laplace_covariance() const;
  /// Cholesky factor of D^-1 + M K M' (duels x duels), the matrix every
  /// prediction solves against. Positive definite by construction.
  [[nodiscard]] const Eigen::LLT<Eigen::MatrixXd>& hessian_factor() const { return s_factor_; }

  [[nodiscard]] int iterations() const { return iterations_; }
  [[nodiscard]] double gradient_norm() const { return gradient_norm_; }
  [[nodiscard]] bool converged() const { return converged_; }

 private:
  friend PreferencePosterior fit_laplace(std::span<const PairwiseDuel>, const SeKernel&, const LaplaceOptions&);

  SeKernel kernel_;
  DuelDesign design_;
  Eigen::MatrixXd k_;      // Gram matrix of points
  Eigen::VectorXd alpha_;  // K^-1 g
  Eigen::VectorXd g_;
  Eigen::VectorXd c_;      // per-duel curvature at the MAP
  Eigen::LLT<Eigen::MatrixXd> s_factor_;
  int iterations_ = 0;
  double gradient_norm_ = 0.0;
  bool converged_ = true;
};

/// Newton's method with backtracking on the Laplace objective. Returns the
/// prior for an empty duel list. Non-convergence is logged and reported via
/// converged()/gradient_norm(); a Gram matrix that cannot be factored has its
/// jitter raised tenfold (logged) up to max_jitter.
[[nodiscard]] PreferencePosterior fit_laplace(std::span<const PairwiseDuel> duels, const SeKernel& kernel,
                                              const LaplaceOptions& options = {});

}  // namespace hilo
