#include "hilo/preference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace hilo {

namespace {

constexpr double kTailCutoff = -30.0;
constexpr double kMinCurvature = 1e-12;

// Asymptotic series of cdf(z) / pdf(z) * |z| for z -> -inf.
double tail_series(double t) {
  const double t2 = 1.0 / (t * t);
  return 1.0 - t2 * (1.0 - 3.0 * t2 * (1.0 - 5.0 * t2 * (1.0 - 7.0 * t2)));
}

Eigen::LDLT<Eigen::MatrixXd> factor_gram(const Eigen::MatrixXd& k) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(k);
  if (ldlt.info() != Eigen::Success) throw std::runtime_error("Gram matrix factorization failed");
  return ldlt;
}

struct LikelihoodTerms {
  double value = 0.0;
  Eigen::VectorXd r;  // d log probit / dz per duel
  Eigen::VectorXd c;  // -d2 log probit / dz2 per duel
};

LikelihoodTerms likelihood_terms(const DuelDesign& d, const Eigen::VectorXd& g) {
  LikelihoodTerms t;
  const auto m = static_cast<Eigen::Index>(d.pairs.size());
  t.r.resize(m);
  t.c.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto [w, l] = d.pairs[static_cast<std::size_t>(i)];
    const double z = g(w) - g(l);
    t.value += log_probit(z);
    t.r(i) = inverse_mills(z);
    t.c(i) = t.r(i) * (z + t.r(i));
  }
  return t;
}

// M' v for the duel incidence matrix M (row i: +1 at winner, -1 at loser).
Eigen::VectorXd incidence_transpose(const DuelDesign& d, const Eigen::VectorXd& v, Eigen::Index n) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < d.pairs.size(); ++i) {
    out(d.pairs[i].first) += v(static_cast<Eigen::Index>(i));
    out(d.pairs[i].second) -= v(static_cast<Eigen::Index>(i));
  }
  return out;
}

Eigen::VectorXd incidence(const DuelDesign& d, const Eigen::VectorXd& v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(d.pairs.size()));
  for (std::size_t i = 0; i < d.pairs.size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = v(d.pairs[i].first) - v(d.pairs[i].second);
  }
  return out;
}

// M A M' for a square A.
Eigen::MatrixXd incidence_sandwich(const DuelDesign& d, const Eigen::MatrixXd& a) {
  const auto m = static_cast<Eigen::Index>(d.pairs.size());
  Eigen::MatrixXd out(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto [wi, li] = d.pairs[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j <= i; ++j) {
      const auto [wj, lj] = d.pairs[static_cast<std::size_t>(j)];
      out(i, j) = out(j, i) = a(wi, wj) - a(wi, lj) - a(li, wj) + a(li, lj);
    }
  }
  return out;
}

double objective(const DuelDesign& d, const Eigen::MatrixXd& k, const Eigen::VectorXd& alpha) {
  const Eigen::VectorXd g = k * alpha;
  double ll = 0.0;
  for (const auto& [w, l] : d.pairs) ll += log_probit(g(w) - g(l));
  return ll - 0.5 * alpha.dot(g);
}

}  // namespace

double probit(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double pref_likelihood(double g1, double g2) { return probit(g1 - g2); }

double log_probit(double z) {
  if (z >= kTailCutoff) return std::log(probit(z));
  const double t = -z;
  return -0.5 * t * t - std::log(t) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(tail_series(t));
}

double inverse_mills(double z) {
  if (z >= kTailCutoff) {
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return pdf / probit(z);
  }
  const double t = -z;
  return t / tail_series(t);
}

SeKernel::SeKernel(double signal_variance, Eigen::VectorXd lengthscales, double jitter)
    : signal_variance_(signal_variance), lengthscales_(std::move(lengthscales)), jitter_(jitter) {
  if (!(signal_variance_ > 0)) throw std::invalid_argument("kernel signal variance must be positive");
  if (lengthscales_.size() == 0 || !(lengthscales_.array() > 0).all()) {
    throw std::invalid_argument("kernel lengthscales must be positive");
  }
  if (!(jitter_ >= 0)) throw std::invalid_argument("kernel jitter must be non-negative");
}

SeKernel SeKernel::isotropic(int dims, double signal_variance, double lengthscale, double jitter) {
  return SeKernel(signal_variance, Eigen::VectorXd::Constant(dims, lengthscale), jitter);
}

SeKernel SeKernel::with_jitter(double jitter) const { return SeKernel(signal_variance_, lengthscales_, jitter); }

double SeKernel::operator()(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) const {
  if (a.size() != lengthscales_.size() || b.size() != lengthscales_.size()) {
    throw std::invalid_argument(fmt::format("kernel expects {}-dimensional inputs", lengthscales_.size()));
  }
  const double q = ((a - b).array() / lengthscales_.array()).square().sum();
  double v = signal_variance_ * std::exp(-0.5 * q);
  if (a == b) v += jitter_;
  return v;
}

Eigen::MatrixXd SeKernel::gram(const Eigen::MatrixXd& x) const {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) k(i, j) = k(j, i) = (*this)(x.row(i).transpose(), x.row(j).transpose());
  }
  return k;
}

Eigen::VectorXd SeKernel::cross(const Eigen::MatrixXd& x, const Eigen::Ref<const Eigen::VectorXd>& p) const {
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = (*this)(x.row(i).transpose(), p);
  return out;
}

DuelDesign make_design(std::span<const PairwiseDuel> duels) {
  DuelDesign d;
  std::vector<Eigen::VectorXd> pts;
  auto index_of = [&](const Eigen::VectorXd& p) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (pts[i] == p) return static_cast<int>(i);
    }
    pts.push_back(p);
    return static_cast<int>(pts.size() - 1);
  };
  for (const auto& duel : duels) {
    if (duel.winner.size() != duel.loser.size() || duel.winner.size() == 0) {
      throw std::invalid_argument("duel points must share a positive dimension");
    }
    if (!pts.empty() && duel.winner.size() != pts.front().size()) {
      throw std::invalid_argument("duel points differ in dimension");
    }
    if (duel.winner == duel.loser) throw std::invalid_argument("duel between identical points");
    const int w = index_of(duel.winner);
    const int l = index_of(duel.loser);
    d.pairs.emplace_back(w, l);
  }
  if (!pts.empty()) {
    d.points.resize(static_cast<Eigen::Index>(pts.size()), pts.front().size());
    for (std::size_t i = 0; i < pts.size(); ++i) d.points.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  }
  return d;
}

double log_posterior(const DuelDesign& design, const Eigen::VectorXd& g, const SeKernel& kernel) {
  if (g.size() != design.points.rows()) throw std::invalid_argument("utility vector does not match the design");
  if (g.size() == 0) return 0.0;
  const Eigen::VectorXd kinv_g = factor_gram(kernel.gram(design.points)).solve(g);
  return likelihood_terms(design, g).value - 0.5 * g.dot(kinv_g);
}

Eigen::VectorXd grad_log_posterior(const DuelDesign& design, const Eigen::VectorXd& g, const SeKernel& kernel) {
  if (g.size() != design.points.rows()) throw std::invalid_argument("utility vector does not match the design");
  if (g.size() == 0) return g;
  const Eigen::VectorXd kinv_g = factor_gram(kernel.gram(design.points)).solve(g);
  return incidence_transpose(design, likelihood_terms(design, g).r, g.size()) - kinv_g;
}

double log_posterior(std::span<const PairwiseDuel> duels, const Eigen::VectorXd& g, const SeKernel& kernel) {
  return log_posterior(make_design(duels), g, kernel);
}

Eigen::VectorXd grad_log_posterior(std::span<const PairwiseDuel> duels, const Eigen::VectorXd& g,
                                   const SeKernel& kernel) {
  return grad_log_posterior(make_design(duels), g, kernel);
}

PreferencePosterior::PreferencePosterior(SeKernel kernel) : kernel_(std::move(kernel)) {}

Prediction PreferencePosterior::predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const double prior = kernel_(x, x);
  if (design_.pairs.empty()) return {0.0, prior};
  const Eigen::VectorXd ks = kernel_.cross(design_.points, x);
  const Eigen::VectorXd v = incidence(design_, ks);
  const double var = prior - v.dot(s_factor_.solve(v));
  return {ks.dot(alpha_), std::max(var, 1e-12 * prior)};
}

PairPrediction PreferencePosterior::predict_pair(const Eigen::Ref<const Eigen::VectorXd>& a,
                                                 const Eigen::Ref<const Eigen::VectorXd>& b) const {
  PairPrediction out;
  out.var_a = kernel_(a, a);
  out.var_b = kernel_(b, b);
  out.cov = kernel_(a, b);
  if (design_.pairs.empty()) return out;
  const Eigen::VectorXd ka = kernel_.cross(design_.points, a);
  const Eigen::VectorXd kb = kernel_.cross(design_.points, b);
  const Eigen::VectorXd va = incidence(design_, ka);
  const Eigen::VectorXd vb = incidence(design_, kb);
  const Eigen::VectorXd sa = s_factor_.solve(va);
  out.mean_a = ka.dot(alpha_);
  out.mean_b = kb.dot(alpha_);
  out.var_a = std::max(out.var_a - va.dot(sa), 1e-12 * out.var_a);
  out.var_b = std::max(out.var_b - vb.dot(s_factor_.solve(vb)), 1e-12 * out.var_b);
  out.cov -= vb.dot(sa);
  return out;
}

Eigen::MatrixXd PreferencePosterior::laplace_covariance() const {
  if (design_.pairs.empty()) return k_;
  // (K^-1 + M' D M)^-1 = K - K M' S^-1 M K
  const Eigen::Index n = k_.rows();
  const auto m = static_cast<Eigen::Index>(design_.pairs.size());
  Eigen::MatrixXd mk(m, n);
  for (Eigen::Index j = 0; j < n; ++j) mk.col(j) = incidence(design_, k_.col(j));
  return k_ - mk.transpose() * s_factor_.solve(mk);
}

PreferencePosterior fit_laplace(std::span<const PairwiseDuel> duels, const SeKernel& kernel,
                                const LaplaceOptions& options) {
  PreferencePosterior post(kernel);
  if (duels.empty()) return post;
  post.design_ = make_design(duels);
  const DuelDesign& d = post.design_;
  const Eigen::Index n = d.points.rows();

  SeKernel kern = kernel;
  for (;;) {
    post.k_ = kern.gram(d.points);
    Eigen::LLT<Eigen::MatrixXd> check(post.k_);
    if (check.info() == Eigen::Success) break;
    const double next = std::max(kern.jitter() * 10.0, 1e-10);
    if (next > options.max_jitter) throw std::runtime_error("Gram matrix is singular even with maximal jitter");
    spdlog::warn("fit_laplace: Gram matrix not positive definite, jitter {} -> {}", kern.jitter(), next);
    kern = kern.with_jitter(next);
  }
  post.kernel_ = kern;
  const Eigen::MatrixXd& k = post.k_;

  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
  double psi = objective(d, k, alpha);
  post.converged_ = false;
  int it = 0;
  for (;; ++it) {
    const LikelihoodTerms t = likelihood_terms(d, g);
    const Eigen::VectorXd grad = incidence_transpose(d, t.r, n) - alpha;
    post.gradient_norm_ = grad.cwiseAbs().maxCoeff();
    if (post.gradient_norm_ < options.tolerance) {
      post.converged_ = true;
      break;
    }
    if (it >= options.max_iterations) break;

    const Eigen::VectorXd c = t.c.cwiseMax(kMinCurvature);
    Eigen::MatrixXd s = incidence_sandwich(d, k);
    s.diagonal() += c.cwiseInverse();
    const Eigen::LLT<Eigen::MatrixXd> sf(s);
    const Eigen::VectorXd b = incidence_transpose(d, c.cwiseProduct(incidence(d, g)) + t.r, n);
    const Eigen::VectorXd target = b - incidence_transpose(d, sf.solve(incidence(d, k * b)), n);

    const Eigen::VectorXd step = target - alpha;
    double scale = 1.0;
    double next_psi = objective(d, k, alpha + step);
    while (!(next_psi >= psi) && scale > 1e-10) {
      scale *= 0.5;
      next_psi = objective(d, k, alpha + scale * step);
    }
    if (!(next_psi >= psi)) break;  // no ascent direction left at working precision
    alpha += scale * step;
    g = k * alpha;
    psi = next_psi;
  }
  post.iterations_ = it;
  if (!post.converged_) {
    spdlog::warn("fit_laplace: not converged after {} iterations (gradient max-norm {:.3g})", it,
                 post.gradient_norm_);
  }

  post.alpha_ = alpha;
  post.g_ = g;
  post.c_ = likelihood_terms(d, g).c.cwiseMax(kMinCurvature);
  Eigen::MatrixXd s = incidence_sandwich(d, k);
  s.diagonal() += post.c_.cwiseInverse();
  post.s_factor_.compute(s);
  if (post.s_factor_.info() != Eigen::Success) throw std::runtime_error("Laplace Hessian factor is not positive definite");
  return post;
}

}  // namespace hilo
