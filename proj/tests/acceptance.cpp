// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria.
//
// The encoder for criteria 5-9 is trained once and cached next to this binary
// (HILO_ACCEPTANCE_DIR); delete the checkpoint to retrain.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "hilo/agent.hpp"
#include "hilo/experiment.hpp"
#include "hilo/optimizer.hpp"
#include "hilo/preference.hpp"
#include "hilo/random.hpp"
#include "hilo/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hilo;

namespace {

constexpr std::uint64_t kSeed = 2024;
constexpr int kTrainSteps = 24000;
constexpr int kSubjects = 10;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// 1. Forward model analytics

Outcome forward_analytics() {
  UserParams u;
  u.rho = 280.0;
  u.size_gain = 0.0;
  u.streak_scale = 0.8;
  u.bright_scale = 1.3;
  u.freq_gain = 0.4;
  u.impl_x = 0.05 * 280.0;
  u.impl_y = -0.03 * 280.0;
  double worst_peak = 0.0;
  double min_px_per_sigma = INFINITY;
  for (double lambda : {0.0, 0.3, 0.6}) {
    u.lambda = lambda;
    ElectrodeArray arr = make_unit_threshold_array(ArraySpec{1, 1, 400.0}, u);
    arr.thresholds_ua = {10.0};
    const Pulse pulse{23.0, 35.0, 0.45};
    const auto p = phosphene_params(arr, 0, pulse, u);
    const double analytic = p.brightness * std::sqrt(p.covariance.determinant());
    ForwardConfig fc;
    fc.grid = GridSpec{121, 121, 6.05};
    const double sigma_minor = std::sqrt(p.covariance.eigenvalues().real().minCoeff());
    min_px_per_sigma = std::min(min_px_per_sigma, sigma_minor / fc.grid.pixel_size_x());
    const Percept img = render_percept(Stimulus(1, pulse), u, arr, fc);
    worst_peak = std::max(worst_peak, std::abs(img.max_brightness() / analytic - 1.0));
  }

  UserParams v;
  const ArraySpec spec{10, 10, 400.0};
  const ElectrodeArray arr = make_electrode_array(spec, v, draw_threshold_offsets(spec.size(), 9));
  Rng rng{5};
  Stimulus s(spec.size());
  for (std::size_t e = 0; e < spec.size(); ++e) {
    s.pulses[e] = Pulse{uniform(rng, 0.0, 3.0) * arr.thresholds_ua[e], uniform(rng, 5, 60), 0.45};
  }
  const Percept all = render_percept(s, v, arr);
  Image sum = Image::Zero(all.height(), all.width());
  for (std::size_t e = 0; e < spec.size(); ++e) {
    Stimulus one(spec.size(), Pulse{0.0, 20, 0.45});
    one.pulses[e] = s.pulses[e];
    sum += render_percept(one, v, arr).data();
  }
  const double additivity = (all.data() - sum).abs().maxCoeff();
  return {worst_peak <= 0.02 && min_px_per_sigma >= 8.0 && additivity <= 1e-12,
          fmt::format("peak vs b*sqrt(det Sigma) rel. error {:.2e} (<= 2e-2) at {:.1f} px/sigma (>= 8); "
                      "100-electrode sum of singles max |diff| {:.1e} (<= 1e-12)",
                      worst_peak, min_px_per_sigma, additivity)};
}

// ---------------------------------------------------------------------------
// 2. Brightness anchors

Outcome brightness_anchors() {
  UserParams u;
  u.rho = 280.0;
  u.lambda = 0.0;
  u.size_gain = 0.0;
  u.freq_gain = 0.7;
  u.bright_scale = 1.0;
  const GridSpec grid{};
  u.impl_x = grid.pixel_x(30) * 280.0;
  u.impl_y = grid.pixel_y(20) * 280.0;
  ElectrodeArray arr = make_unit_threshold_array(ArraySpec{1, 1, 400.0}, u);
  const double theta = 37.0;
  arr.thresholds_ua = {theta};
  const ForwardConfig fc;
  auto shown = [&](double amp) {
    return displayed_brightness(
        render_percept(Stimulus(1, Pulse{amp, fc.reference_frequency_hz, fc.reference_pulse_ms}), u, arr, fc));
  };
  const double at_threshold = shown(theta);
  const double at_twice = shown(2 * theta);
  const auto scale = Session::brightness_anchors(fc);
  bool scale_ok = scale.size() == Session::kAnchorLevels.size();
  for (std::size_t i = 0; scale_ok && i < scale.size(); ++i) {
    scale_ok = displayed_brightness(scale[i]) == Session::kAnchorLevels[i];
  }
  return {at_threshold == 1.0 && at_twice == 2.0 && scale_ok,
          fmt::format("amplitude = theta shows {:.1f}, 2 theta shows {:.1f} (exact 1.0 / 2.0); "
                      "tutorial scale 0/2/5/10 exact: {}",
                      at_threshold, at_twice, scale_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 3. Preference model oracles

// Mode of p(gA, gB) ∝ probit(gA - gB) N(g | 0, K), by grid search with a zoomed
// second pass.
Eigen::Vector2d quadrature_mode(const Eigen::Matrix2d& k) {
  const Eigen::Matrix2d inv = k.inverse();
  auto log_density = [&](double a, double b) {
    const Eigen::Vector2d g{a, b};
    return std::log(0.5 * std::erfc(-(a - b) / std::sqrt(2.0))) - 0.5 * g.dot(inv * g);
  };
  double best = -INFINITY;
  Eigen::Vector2d arg = Eigen::Vector2d::Zero();
  const double h = 0.004;
  for (double a = -3.0; a <= 3.0 + 1e-9; a += h) {
    for (double b = -3.0; b <= 3.0 + 1e-9; b += h) {
      if (const double ld = log_density(a, b); ld > best) {
        best = ld;
        arg = {a, b};
      }
    }
  }
  const Eigen::Vector2d c = arg;
  for (double a = c.x() - 2 * h; a <= c.x() + 2 * h; a += 2e-5) {
    for (double b = c.y() - 2 * h; b <= c.y() + 2 * h; b += 2e-5) {
      if (const double ld = log_density(a, b); ld > best) {
        best = ld;
        arg = {a, b};
      }
    }
  }
  return arg;
}

Eigen::VectorXd point1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

Outcome preference_oracles() {
  double symmetry = 0.0;
  for (double x = -8.0; x <= 8.0; x += 0.01) {
    symmetry = std::max(symmetry, std::abs(pref_likelihood(x, 0.0) + pref_likelihood(0.0, x) - 1.0));
  }

  double map_err = 0.0;
  for (double distance : {0.1, 0.25, 0.6, 2.0}) {
    const SeKernel k = SeKernel::isotropic(1);
    const std::vector<PairwiseDuel> duel{{point1(0.3), point1(0.3 + distance)}};
    const auto post = fit_laplace(duel, k);
    const Eigen::Vector2d mode = quadrature_mode(k.gram(post.points()));
    map_err = std::max(map_err, (post.utilities() - mode).cwiseAbs().maxCoeff());
  }

  double grad_err = 0.0;
  Rng rng{7};
  for (int rep = 0; rep < 5; ++rep) {
    const SeKernel k = SeKernel::isotropic(3, 1.0, 0.3);
    std::vector<Eigen::VectorXd> pts;
    for (int i = 0; i < 6; ++i) {
      Eigen::VectorXd p(3);
      for (int d = 0; d < 3; ++d) p(d) = uniform01(rng);
      pts.push_back(p);
    }
    std::vector<PairwiseDuel> duels;
    while (duels.size() < 10) {
      const auto a = uniform_index(rng, pts.size());
      const auto b = uniform_index(rng, pts.size());
      if (a != b) duels.push_back({pts[a], pts[b]});
    }
    const DuelDesign design = make_design(duels);
    Eigen::VectorXd g(design.points.rows());
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = uniform(rng, -1.5, 1.5);
    const Eigen::VectorXd grad = grad_log_posterior(design, g, k);
    Eigen::VectorXd numeric(g.size());
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      Eigen::VectorXd up = g, down = g;
      up(i) += h;
      down(i) -= h;
      numeric(i) = (log_posterior(design, up, k) - log_posterior(design, down, k)) / (2 * h);
    }
    grad_err = std::max(grad_err, (grad - numeric).norm() / numeric.norm());
  }
  return {symmetry <= 1e-12 && map_err <= 1e-3 && grad_err <= 1e-5,
          fmt::format("probit symmetry {:.1e} (<= 1e-12); Laplace MAP vs quadrature {:.1e} (<= 1e-3); "
                      "gradient vs central differences rel. {:.1e} (<= 1e-5)",
                      symmetry, map_err, grad_err)};
}

// ---------------------------------------------------------------------------
// 4. Acquisition brute force

std::pair<std::size_t, std::size_t> exhaustive(const OptimizerConfig& cfg, const std::vector<PairwiseDuel>& duels) {
  const Eigen::MatrixXd& pool = *cfg.pool_override;
  const SeKernel k = SeKernel::isotropic(1, cfg.signal_variance, cfg.lengthscale, cfg.jitter);
  const PreferencePosterior post = fit_laplace(duels, k, cfg.laplace);
  std::size_t champ = 0;
  double best = -INFINITY;
  for (Eigen::Index i = 0; i < pool.rows(); ++i) {
    // strict comparison: ties go to the lowest index
    if (const double m = post.predict(pool.row(i).transpose()).mean; m > best) {
      best = m;
      champ = static_cast<std::size_t>(i);
    }
  }
  const auto z = acquisition_normals(cfg.seed, cfg.mc_samples);
  std::size_t chall = 0;
  double best_v = -INFINITY;
  for (Eigen::Index i = 0; i < pool.rows(); ++i) {
    if (static_cast<std::size_t>(i) == champ) continue;
    const PairPrediction pp =
        post.predict_pair(pool.row(i).transpose(), pool.row(static_cast<Eigen::Index>(champ)).transpose());
    const double mu = pp.mean_a - pp.mean_b;
    const double sd = std::sqrt(pp.var_a + pp.var_b - 2 * pp.cov);
    double mean = 0.0;
    for (double zk : z) mean += probit(mu + sd * zk);
    mean /= static_cast<double>(z.size());
    double var = 0.0;
    for (double zk : z) var += (probit(mu + sd * zk) - mean) * (probit(mu + sd * zk) - mean);
    var /= static_cast<double>(z.size());
    if (var > best_v) {
      best_v = var;
      chall = static_cast<std::size_t>(i);
    }
  }
  return {champ, chall};
}

Outcome acquisition_brute_force() {
  int checked = 0;
  int matched = 0;
  for (double best : {0.73, 0.12, 0.5}) {
    OptimizerConfig cfg;
    cfg.active.fill(false);
    cfg.active[0] = true;
    Eigen::MatrixXd pool(101, 1);
    for (int i = 0; i < 101; ++i) pool(i, 0) = i / 100.0;
    cfg.pool_override = pool;
    cfg.seed = 99;
    HiloOptimizer opt(cfg);
    std::vector<PairwiseDuel> duels;
    for (int t = 0; t <= 6; ++t) {
      const DuelProposal p = opt.propose();
      const auto [c1, c2] = exhaustive(cfg, duels);
      ++checked;
      if (p.pool_index1 == c1 && p.pool_index2 == c2) ++matched;
      if (t == 6) break;
      const double u1 = pool(static_cast<Eigen::Index>(p.pool_index1), 0);
      const double u2 = pool(static_cast<Eigen::Index>(p.pool_index2), 0);
      const bool first = std::abs(u1 - best) < std::abs(u2 - best);
      duels.push_back(first ? PairwiseDuel{point1(u1), point1(u2)} : PairwiseDuel{point1(u2), point1(u1)});
      opt.record_choice(p.trial, first);
    }
  }
  return {matched == checked, fmt::format("{}/{} proposals identical to exhaustive evaluation over the 101-point pool",
                                          matched, checked)};
}

// ---------------------------------------------------------------------------
// Shared simulation state for 5-10

struct Rollouts {
  std::shared_ptr<const ExperimentContext> ctx;
  double temperature = 0.0;
  SimulationResult main;
  SimulationResult lapse;
  SimulationResult tm;
  SimulationResult ood;
  fs::path main_logs;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DseModel acceptance_model(const fs::path& dir) {
  const fs::path path = dir / fmt::format("dse_{}.bin", kTrainSteps);
  if (fs::exists(path)) {
    spdlog::info("using cached encoder {}", path.string());
    return DseModel::load(path);
  }
  spdlog::info("training the encoder ({} steps); cached afterwards at {}", kTrainSteps, path.string());
  DseTrainConfig cfg;
  cfg.steps = kTrainSteps;
  const auto t0 = std::chrono::steady_clock::now();
  auto result = train_dse_on_mnist(HILO_MNIST_DIR, cfg, PhiBox::defaults(), 500, [&](const TrainingCurvePoint& p) {
    if (p.step % 2000 == 0) spdlog::info("step {:>6}  val {:.5f}  ({:.0f} s)", p.step, p.val_loss, seconds_since(t0));
  });
  write_training_curve_csv(dir / "dse_training_curve.csv", result.curve);
  result.model.save(path);
  // Checkpoints store float32; reload so the first run matches later ones.
  return DseModel::load(path);
}

SimulationResult run(const Rollouts& r, const Condition& condition, double lapse, const fs::path& logs) {
  SimulationConfig cfg;
  cfg.condition = condition;
  cfg.subjects = kSubjects;
  cfg.seed = kSeed;
  cfg.agent = AgentConfig{r.temperature, lapse, 0};
  if (!logs.empty()) fs::create_directories(logs);
  return simulate(r.ctx, cfg, logs);
}

// ---------------------------------------------------------------------------
// 5-8. Simulated experiments

Outcome convergence(const Rollouts& r) {
  const auto& m = r.main.mse.median;
  const double ratio = m.back() / m.front();
  const auto w = window_means(m, 10);
  bool monotone = true;
  for (std::size_t i = 1; i < w.size(); ++i) monotone = monotone && w[i] <= w[i - 1];
  std::string windows;
  for (double x : w) windows += fmt::format("{}{:.5f}", windows.empty() ? "" : " ", x);
  return {m.size() == 60 && ratio <= 0.6 && monotone,
          fmt::format("median held-out MSE duel 1 {:.5f} -> duel 60 {:.5f}, ratio {:.3f} (<= 0.6); "
                      "10-duel window means [{}] non-increasing: {}",
                      m.front(), m.back(), ratio, windows, monotone ? "yes" : "no")};
}

Outcome preference_outcome(const Rollouts& r) {
  const auto& l = r.main.vs_naive;
  const double share = static_cast<double>(l.favoring_hilo) / static_cast<double>(l.per_subject.size());
  return {share >= 0.8 && l.p_value < 0.05 && l.pooled < 0,
          fmt::format("{}/{} subjects with log odds < 0 vs naive (>= 80%); pooled {:.3f} +- {:.3f}, p = {:.2e} (< 0.05)",
                      l.favoring_hilo, l.per_subject.size(), l.pooled, l.pooled_se, l.p_value)};
}

Outcome noise_robustness(const Rollouts& r) {
  const auto& l = r.lapse.vs_naive;
  return {l.pooled < 0, fmt::format("lapse 2/3: pooled log odds vs naive {:.3f} +- {:.3f} (< 0), p = {:.2e}; "
                                    "{}/{} subjects below 0",
                                    l.pooled, l.pooled_se, l.p_value, l.favoring_hilo, l.per_subject.size())};
}

Outcome condition_behavior(const Rollouts& r) {
  const auto& tm = r.tm.vs_naive;
  const auto& ood = r.ood.vs_naive;
  return {tm.pooled < 0 && tm.p_value < 0.05 && ood.pooled < 0,
          fmt::format("TM: pooled {:.3f}, p = {:.2e} (< 0.05), {}/{} subjects below 0; "
                      "OOD: pooled {:.3f} (< 0), {}/{} subjects below 0",
                      tm.pooled, tm.p_value, tm.favoring_hilo, tm.per_subject.size(), ood.pooled, ood.favoring_hilo,
                      ood.per_subject.size())};
}

// ---------------------------------------------------------------------------
// 9. Encoder quality

Outcome encoder_quality(const Rollouts& r) {
  const auto& ctx = *r.ctx;
  const auto& heldout = ctx.heldout_targets();
  const int pairs = 500;
  int better = 0;
  for (int i = 0; i < pairs; ++i) {
    const SubjectSpec s =
        make_subject(Condition::main(), ctx.settings().box, ctx.settings().array, derive_seed(kSeed ^ 0xd5e, i));
    const TargetImage& t = heldout[static_cast<std::size_t>(i) % heldout.size()];
    const Percept target = ctx.target_percept(t);
    const double dse = percept_mse(s.perceive(ctx.encode_dse(t, s.true_phi), ctx.settings().forward), target);
    const double naive = percept_mse(s.perceive(ctx.encode_naive(t), ctx.settings().forward), target);
    if (dse < naive) ++better;
  }

  // Central differences of the training loss of the trained network.
  DseModel model = ctx.model();
  Rng rng{kSeed};
  std::vector<TrainingPair> batch;
  for (int i = 0; i < 8; ++i) {
    batch.push_back({&heldout[uniform_index(rng, heldout.size())], ctx.settings().box.sample_uniform(rng())});
  }
  DifferentiableRenderer dr(ctx.settings().array, ctx.settings().forward);
  DseGradients grads;
  (void)dse_batch_loss(model, batch, dr, ctx.target_half_extent(), &grads);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < model.params().size(); ++k) {
    auto& p = model.params()[k];
    double num2 = 0.0;
    double err2 = 0.0;
    for (int s = 0; s < 4; ++s) {
      const auto i = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(p.rows())));
      const auto j = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(p.cols())));
      const double orig = p(i, j);
      p(i, j) = orig + h;
      const double up = dse_batch_loss(model, batch, dr, ctx.target_half_extent(), nullptr);
      p(i, j) = orig - h;
      const double down = dse_batch_loss(model, batch, dr, ctx.target_half_extent(), nullptr);
      p(i, j) = orig;
      const double numeric = (up - down) / (2 * h);
      num2 += numeric * numeric;
      err2 += (numeric - grads.params[k](i, j)) * (numeric - grads.params[k](i, j));
    }
    if (num2 > 1e-18) worst = std::max(worst, std::sqrt(err2 / num2));
  }
  const double share = static_cast<double>(better) / pairs;
  return {share >= 0.9 && worst <= 1e-3,
          fmt::format("DSE beats naive on {}/{} held-out (phi, digit) pairs = {:.1f}% (>= 90%); "
                      "training gradient vs central differences worst rel. error {:.1e} (<= 1e-3)",
                      better, pairs, 100 * share, worst)};
}

// ---------------------------------------------------------------------------
// 10. Replay determinism

Outcome replay_determinism(const Rollouts& r) {
  int identical = 0;
  int total = 0;
  std::vector<SessionResult> replayed;
  for (const auto& original : r.main.sessions) {
    const auto events = read_jsonl(r.main_logs / (original.subject_id + ".jsonl"));
    const auto session = replay_session(r.ctx, events);
    const SessionResult again = session->result();
    ++total;
    if (again.optimized_phi == original.optimized_phi && again.to_json() == original.to_json()) ++identical;
    replayed.push_back(again);
  }
  const bool summary_same = summarize(replayed).to_json() == r.main.to_json();

  // A live session through the service, restarted halfway.
  const fs::path dir = r.main_logs.parent_path() / "live";
  fs::remove_all(dir);
  std::string id;
  Rng coin{kSeed + 1};
  {
    DuelService service(r.ctx, dir);
    id = service.create_session({{"condition", "tm"}, {"seed", kSeed}}).body["id"];
    for (int i = 0; i < 50; ++i) {
      const auto d = service.get_duel(id);
      (void)service.post_choice(id, {{"trial", d.body["trial"]}, {"side", coin_flip(coin) ? "left" : "right"}});
    }
  }
  DuelService restarted(r.ctx, dir);
  for (;;) {
    const auto d = restarted.get_duel(id);
    if (d.status != 200) break;
    (void)restarted.post_choice(id, {{"trial", d.body["trial"]}, {"side", coin_flip(coin) ? "left" : "right"}});
  }
  const json live = restarted.get_results(id).body;
  const auto from_log = replay_session(r.ctx, read_jsonl(restarted.log_path(id)));
  json again = from_log->result().to_json();
  again["id"] = id;
  const bool live_same = live == again;
  ++total;
  if (live_same) ++identical;

  return {identical == total && summary_same,
          fmt::format("{}/{} logged sessions (10 simulated, 1 live with restart) replay to identical champion and "
                      "statistics; population summary identical: {}",
                      identical, total, summary_same ? "yes" : "no")};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::info);
  const fs::path dir = HILO_ACCEPTANCE_DIR;
  fs::create_directories(dir);

  std::vector<std::pair<std::string, Outcome>> results;
  auto record = [&](int n, const std::string& name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, fmt::format("error: {}", e.what())};
    }
    fmt::print("[{}] {:>2}. {}: {}\n", o.pass ? "PASS" : "FAIL", n, name, o.detail);
    std::fflush(stdout);
    results.emplace_back(name, o);
  };

  record(1, "forward model analytics", forward_analytics);
  record(2, "brightness anchors", brightness_anchors);
  record(3, "preference model oracles", preference_oracles);
  record(4, "acquisition brute force", acquisition_brute_force);

  Rollouts r;
  std::string setup_error;
  try {
    const auto t0 = std::chrono::steady_clock::now();
    auto base = ExperimentContext::from_model(acceptance_model(dir), HILO_MNIST_DIR);
    r.temperature = calibrate_agent_temperature(base, derive_seed(kSeed, 0x7e));
    ExperimentSettings settings = base->settings();
    settings.agent_temperature = r.temperature;
    r.ctx = std::make_shared<const ExperimentContext>(base->model(), base->duel_targets(), base->heldout_targets(),
                                                      settings);
    spdlog::info("rational agent: temperature {:.3e}, lapse 0", r.temperature);
    const auto t1 = std::chrono::steady_clock::now();
    r.main_logs = dir / "main";
    r.main = run(r, Condition::main(), 0.0, r.main_logs);
    spdlog::info("main condition: {:.0f} s", seconds_since(t1));
    r.lapse = run(r, Condition::main(), 2.0 / 3.0, {});
    r.tm = run(r, Condition::threshold_misspecification(), 0.0, {});
    r.ood = run(r, Condition::out_of_distribution(), 0.0, {});
    spdlog::info("setup and rollouts: {:.0f} s", seconds_since(t0));
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_rollouts = [&](Outcome (*f)(const Rollouts&)) {
    return [&, f] {
      if (!setup_error.empty()) return Outcome{false, fmt::format("setup failed: {}", setup_error)};
      return f(r);
    };
  };
  record(5, "convergence", needs_rollouts(convergence));
  record(6, "preference outcome", needs_rollouts(preference_outcome));
  record(7, "noise robustness", needs_rollouts(noise_robustness));
  record(8, "condition behavior", needs_rollouts(condition_behavior));
  record(9, "encoder quality", needs_rollouts(encoder_quality));
  record(10, "replay determinism", needs_rollouts(replay_determinism));

  int failed = 0;
  for (const auto& [name, o] : results) failed += o.pass ? 0 : 1;
  fmt::print("{}/{} criteria passed\n", results.size() - static_cast<std::size_t>(failed), results.size());
  return failed;
}
