#include "hilo/optimizer.hpp"

#include <cmath>

#include <boost/random/sobol.hpp>
#include <fmt/format.h>

#include "hilo/random.hpp"

namespace hilo {

int OptimizerConfig::active_dims() const {
  int n = 0;
  for (bool a : active) n += a;
  return n;
}

Eigen::MatrixXd make_candidate_pool(int active_dims, int pool_size, std::uint64_t seed) {
  if (active_dims <= 0) throw std::invalid_argument("candidate pool needs at least one active dimension");
  if (pool_size < 2) throw std::invalid_argument("candidate pool needs at least two points");
  Eigen::MatrixXd pool(pool_size, active_dims);
  pool.row(0).setConstant(0.5);

  boost::random::sobol qrng(static_cast<unsigned>(active_dims));
  qrng.discard(static_cast<std::uintmax_t>(active_dims));  // skip the all-zero first point
  Rng rng{derive_seed(seed, 0x50b01)};
  std::vector<std::uint64_t> shift(static_cast<std::size_t>(active_dims));
  for (auto& s : shift) s = rng();
  for (int i = 1; i < pool_size; ++i) {
    for (int d = 0; d < active_dims; ++d) {
      const std::uint64_t bits = static_cast<std::uint64_t>(qrng()) ^ shift[static_cast<std::size_t>(d)];
      pool(i, d) = static_cast<double>(bits >> 11) * 0x1.0p-53;
    }
  }
  return pool;
}

std::vector<double> acquisition_normals(std::uint64_t seed, int count) {
  Rng rng{derive_seed(seed, 0xacc)};
  std::vector<double> z(static_cast<std::size_t>(count));
  for (auto& v : z) v = standard_normal(rng);
  return z;
}

double probit_variance(double mean, double variance, std::span<const double> normals) {
  if (normals.empty()) return 0.0;
  const double sd = std::sqrt(std::max(variance, 0.0));
  double sum = 0.0;
  std::vector<double> p(normals.size());
  for (std::size_t k = 0; k < normals.size(); ++k) {
    p[k] = probit(mean + sd * normals[k]);
    sum += p[k];
  }
  const double m = sum / static_cast<double>(normals.size());
  double ss = 0.0;
  for (double v : p) ss += (v - m) * (v - m);
  return ss / static_cast<double>(normals.size());
}

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

HiloOptimizer::HiloOptimizer(OptimizerConfig config)
    : config_(std::move(config)),
      kernel_(SeKernel::isotropic(std::max(config_.active_dims(), 1), config_.signal_variance, config_.lengthscale,
                                  config_.jitter)),
      posterior_(kernel_) {
  config_.box.validate();
  const int dims = config_.active_dims();
  if (dims == 0) throw std::invalid_argument("optimizer needs at least one active dimension");
  if (config_.mc_samples < 2) throw std::invalid_argument("optimizer needs at least two Monte Carlo samples");
  if (config_.pool_override) {
    pool_ = *config_.pool_override;
    if (pool_.cols() != dims || pool_.rows() < 2) {
      throw std::invalid_argument(fmt::format("pool override must be (>=2) x {}", dims));
    }
  } else {
    pool_ = make_candidate_pool(dims, config_.pool_size, config_.seed);
  }
  normals_ = acquisition_normals(config_.seed, config_.mc_samples);
}

UserParams HiloOptimizer::to_phi(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  ParamVector unit;
  unit.fill(0.5);
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < kNumUserParams; ++i) {
    if (config_.active[i]) unit[i] = x(k++);
  }
  return config_.box.denormalize(unit);
}

Eigen::VectorXd HiloOptimizer::to_unit(const UserParams& phi) const {
  const ParamVector unit = config_.box.normalize(phi);
  Eigen::VectorXd x(config_.active_dims());
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < kNumUserParams; ++i) {
    if (config_.active[i]) x(k++) = unit[i];
  }
  return x;
}

std::size_t HiloOptimizer::champion_index() const {
  std::vector<double> means(static_cast<std::size_t>(pool_.rows()));
  for (Eigen::Index i = 0; i < pool_.rows(); ++i) {
    means[static_cast<std::size_t>(i)] = posterior_.predict(pool_.row(i).transpose()).mean;
  }
  return argmax_lowest(means);
}

const DuelProposal& HiloOptimizer::propose() {
  if (pending_) return *pending_;
  const std::size_t champ = champion_index();
  const Eigen::VectorXd xc = pool_.row(static_cast<Eigen::Index>(champ)).transpose();
  std::vector<double> score(static_cast<std::size_t>(pool_.rows()), -1.0);
  for (Eigen::Index i = 0; i < pool_.rows(); ++i) {
    if (static_cast<std::size_t>(i) == champ) continue;
    const Eigen::VectorXd x = pool_.row(i).transpose();
    if (x == xc) continue;
    const PairPrediction pp = posterior_.predict_pair(x, xc);
    score[static_cast<std::size_t>(i)] =
        probit_variance(pp.mean_a - pp.mean_b, pp.var_a + pp.var_b - 2.0 * pp.cov, normals_);
  }
  const std::size_t chall = argmax_lowest(score);
  DuelProposal p;
  p.trial = trial_count() + 1;
  p.pool_index1 = champ;
  p.pool_index2 = chall;
  p.phi1 = to_phi(xc);
  p.phi2 = to_phi(pool_.row(static_cast<Eigen::Index>(chall)).transpose());
  pending_ = p;
  return *pending_;
}

void HiloOptimizer::record_choice(int trial, bool chose_first) {
  if (!pending_) throw StaleTrialError(fmt::format("no duel pending; trial {} rejected", trial));
  if (trial != pending_->trial) {
    throw StaleTrialError(fmt::format("trial {} is not the pending trial {}", trial, pending_->trial));
  }
  const DuelProposal p = *pending_;
  const Eigen::VectorXd x1 = pool_.row(static_cast<Eigen::Index>(p.pool_index1)).transpose();
  const Eigen::VectorXd x2 = pool_.row(static_cast<Eigen::Index>(p.pool_index2)).transpose();
  if (chose_first) {
    duels_.push_back({x1, x2});
    history_.push_back({p.phi1, p.phi2, p.trial});
  } else {
    duels_.push_back({x2, x1});
    history_.push_back({p.phi2, p.phi1, p.trial});
  }
  choices_.push_back(chose_first);
  posterior_ = fit_laplace(duels_, kernel_, config_.laplace);
  pending_.reset();
}

UserParams HiloOptimizer::best_phi() const {
  if (history_.empty()) throw std::logic_error("best_phi: no duels recorded yet");
  return to_phi(pool_.row(static_cast<Eigen::Index>(champion_index())).transpose());
}

HiloOptimizer HiloOptimizer::replay(OptimizerConfig config, const std::vector<bool>& choices) {
  HiloOptimizer opt(std::move(config));
  for (bool c : choices) {
    const int trial = opt.propose().trial;
    opt.record_choice(trial, c);
  }
  return opt;
}

}  // namespace hilo
