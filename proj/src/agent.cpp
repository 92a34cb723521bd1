#include "hilo/agent.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "hilo/preference.hpp"

namespace hilo {

void AgentConfig::validate() const {
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw std::invalid_argument(fmt::format("agent temperature must be positive, got {}", temperature));
  }
  if (!(lapse_rate >= 0 && lapse_rate <= 1)) {
    throw std::invalid_argument(fmt::format("agent lapse rate must lie in [0, 1], got {}", lapse_rate));
  }
}

namespace {

// Evaluated on |z| and reflected, so swapping the percepts gives exactly 1 - p.
double rational_probability(double mse1, double mse2, double temperature) {
  const double z = (mse2 - mse1) / temperature;
  return z >= 0 ? probit(z) : 1.0 - probit(-z);
}

}  // namespace

double agent_probability(double mse1, double mse2, const AgentConfig& config) {
  config.validate();
  const double rational = rational_probability(mse1, mse2, config.temperature);
  if (config.lapse_rate == 0.0) return rational;
  return 0.5 * config.lapse_rate + (1.0 - config.lapse_rate) * rational;
}

AgentDecision agent_choose(const Percept& first, const Percept& second, const Percept& target,
                           const AgentConfig& config, Rng& rng) {
  const double mse1 = percept_mse(first, target);
  const double mse2 = percept_mse(second, target);
  config.validate();
  const double rational = rational_probability(mse1, mse2, config.temperature);
  const double u_lapse = uniform01(rng);
  const double u_choice = uniform01(rng);
  AgentDecision d;
  d.p_choose_first = agent_probability(mse1, mse2, config);
  d.chose_first = u_lapse < config.lapse_rate ? u_choice < 0.5 : u_choice < rational;
  return d;
}

AgentDecision agent_choose(const Percept& first, const Percept& second, const Percept& target,
                           const AgentConfig& config, std::int64_t trial) {
  Rng rng{derive_seed(config.seed, static_cast<std::uint64_t>(trial) ^ 0xa6e7ULL)};
  return agent_choose(first, second, target, config, rng);
}

double agreement(const std::vector<bool>& human_chose_first, std::span<const double> agent_p_first) {
  if (human_chose_first.size() != agent_p_first.size()) {
    throw std::invalid_argument(fmt::format("agreement: {} choices but {} agent probabilities",
                                            human_chose_first.size(), agent_p_first.size()));
  }
  if (human_chose_first.empty()) throw std::invalid_argument("agreement: no trials");
  double matched = 0.0;
  for (std::size_t i = 0; i < agent_p_first.size(); ++i) {
    const double p = agent_p_first[i];
    if (p == 0.5) {
      matched += 0.5;
    } else if ((p > 0.5) == human_chose_first[i]) {
      matched += 1.0;
    }
  }
  return matched / static_cast<double>(agent_p_first.size());
}

namespace {

double mean_accuracy(std::span<const double> diffs, double temperature) {
  double s = 0.0;
  for (double d : diffs) s += probit(std::abs(d) / temperature);
  return s / static_cast<double>(diffs.size());
}

}  // namespace

double calibrate_temperature(std::span<const double> mse_differences, double target_accuracy) {
  if (mse_differences.empty()) throw std::invalid_argument("calibrate_temperature: no duels");
  double limit = 0.0;
  double scale = 0.0;
  for (double d : mse_differences) {
    if (!std::isfinite(d)) throw std::invalid_argument("calibrate_temperature: non-finite MSE difference");
    limit += d != 0.0 ? 1.0 : 0.5;
    scale = std::max(scale, std::abs(d));
  }
  limit /= static_cast<double>(mse_differences.size());
  if (!(target_accuracy > 0.5 && target_accuracy < limit)) {
    throw std::invalid_argument(
        fmt::format("calibrate_temperature: accuracy {} not reachable (limit {})", target_accuracy, limit));
  }
  // Accuracy falls monotonically in T; bisect on log T.
  double lo = std::log(scale) - 60.0;
  double hi = std::log(scale) + 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mean_accuracy(mse_differences, std::exp(mid)) > target_accuracy) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace hilo
