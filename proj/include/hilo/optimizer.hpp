#pragma once

// Human-in-the-loop duel loop: champion = argmax of the posterior mean over a
// fixed candidate pool, challenger = argmax of Var[probit(g(x) - g(champion))].

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "hilo/encoders.hpp"
#include "hilo/preference.hpp"

namespace hilo {

class StaleTrialError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  PhiBox box = PhiBox::defaults();
  /// Dimensions the GP searches; the rest stay at the box midpoint.
  std::array<bool, kNumUserParams> active = [] {
    std::array<bool, kNumUserParams> a{};
    a.fill(true);
    return a;
  }();
  double signal_variance = 1.0;
  double lengthscale = 0.2;  ///< in normalized units, every active dimension
  double jitter = 1e-6;
  int pool_size = 512;  ///< including the box midpoint at index 0
  int mc_samples = 256;
  std::uint64_t seed = 0;
  LaplaceOptions laplace{};
  /// Replaces the generated pool (rows are normalized points over the active
  /// dimensions). Used for small exhaustive checks.
  std::optional<Eigen::MatrixXd> pool_override;

  [[nodiscard]] int active_dims() const;
};

/// Midpoint followed by pool_size - 1 points of a digitally shifted Sobol
/// sequence over the active dimensions, all in [0, 1].
[[nodiscard]] Eigen::MatrixXd make_candidate_pool(int active_dims, int pool_size, std::uint64_t seed);

/// Common standard normals for the challenger criterion.
[[nodiscard]] std::vector<double> acquisition_normals(std::uint64_t seed, int count);

/// Monte Carlo estimate of Var[probit(D)] for D ~ N(mean, variance), using
/// the given standard normals (population variance).
[[nodiscard]] double probit_variance(double mean, double variance, std::span<const double> normals);

/// Index of the largest value; the lowest index wins ties.
[[nodiscard]] std::size_t argmax_lowest(std::span<const double> values);

struct DuelOutcome {
  UserParams phi_win;
  UserParams phi_lose;
  int trial_index = 0;
};

struct DuelProposal {
  int trial = 0;  ///< 1-based
  UserParams phi1;  ///< champion
  UserParams phi2;  ///< challenger
  std::size_t pool_index1 = 0;
  std::size_t pool_index2 = 0;
};

class HiloOptimizer {
 public:
  explicit HiloOptimizer(OptimizerConfig config);

  /// The pending duel for the next trial. Repeated calls without a recorded
  /// choice return the same proposal.
  [[nodiscard]] const DuelProposal& propose();
  /// Records the choice for the pending trial and refits. Throws
  /// StaleTrialError if `trial` is not the pending trial (or nothing is
  /// pending).
  void record_choice(int trial, bool chose_first);

  /// Champion under the current posterior. Throws std::logic_error before the
  /// first recorded duel.
  [[nodiscard]] UserParams best_phi() const;

  [[nodiscard]] int trial_count() const { return static_cast<int>(history_.size()); }
  [[nodiscard]] const std::vector<DuelOutcome>& history() const { return history_; }
  [[nodiscard]] const std::vector<bool>& choices() const { return choices_; }
  [[nodiscard]] const PreferencePosterior& posterior() const { return posterior_; }
  [[nodiscard]] const Eigen::MatrixXd& pool() const { return pool_; }
  [[nodiscard]] const OptimizerConfig& config() const { return config_; }
  [[nodiscard]] const std::optional<DuelProposal>& pending() const { return pending_; }

  /// Pool row (normalized, active dimensions) to full user parameters.
  [[nodiscard]] UserParams to_phi(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  [[nodiscard]] Eigen::VectorXd to_unit(const UserParams& phi) const;

  /// Rebuilds an optimizer by proposing and recording each choice in order.
  [[nodiscard]] static HiloOptimizer replay(OptimizerConfig config, const std::vector<bool>& choices);

 private:
  [[nodiscard]] std::size_t champion_index() const;

  OptimizerConfig config_;
  SeKernel kernel_;
  Eigen::MatrixXd pool_;
  std::vector<double> normals_;
  std::vector<PairwiseDuel> duels_;
  std::vector<DuelOutcome> history_;
  std::vector<bool> choices_;
  PreferencePosterior posterior_;
  std::optional<DuelProposal> pending_;
};

}  // namespace hilo
