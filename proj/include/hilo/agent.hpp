#pragma once

// Simulated participant: prefers the percept with the lower error against the
// target, probabilistically, with an optional lapse rate of purely random
// choices.

#include <cstdint>
#include <span>
#include <vector>

#include "hilo/phosphene.hpp"
#include "hilo/random.hpp"

namespace hilo {

struct AgentConfig {
  double temperature = 0.01;  ///< MSE difference that shifts p by one probit unit
  double lapse_rate = 0.0;    ///< probability of a uniformly random choice
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument outside temperature > 0, lapse in [0, 1].
  void validate() const;
};

struct AgentDecision {
  bool chose_first = false;
  /// Overall probability of choosing the first percept, lapses included.
  double p_choose_first = 0.5;
};

/// lapse / 2 + (1 - lapse) * probit((mse2 - mse1) / temperature).
[[nodiscard]] double agent_probability(double mse1, double mse2, const AgentConfig& config);

/// Draws exactly two uniforms from `rng` per call.
[[nodiscard]] AgentDecision agent_choose(const Percept& first, const Percept& second, const Percept& target,
                                         const AgentConfig& config, Rng& rng);

/// Same, with the generator derived from config.seed and the trial index.
[[nodiscard]] AgentDecision agent_choose(const Percept& first, const Percept& second, const Percept& target,
                                         const AgentConfig& config, std::int64_t trial);

/// Fraction of trials where the human picked the agent's more probable
/// percept; trials with p exactly 0.5 count half. Throws on length mismatch or
/// empty input.
[[nodiscard]] double agreement(const std::vector<bool>& human_chose_first, std::span<const double> agent_p_first);

/// Temperature at which a lapse-free agent picks the lower-error percept with
/// mean probability `target_accuracy` over duels with the given MSE
/// differences (sign ignored). Throws std::invalid_argument when the target is
/// not reachable (outside (0.5, limit as T -> 0)).
[[nodiscard]] double calibrate_temperature(std::span<const double> mse_differences, double target_accuracy = 0.85);

}  // namespace hilo
