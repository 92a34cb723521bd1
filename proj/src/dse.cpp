#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "hilo/encoders.hpp"
#include "hilo/random.hpp"

namespace hilo {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'E', '1'};
constexpr std::uint32_t kFormatVersion = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::size_t block_param(int block, int which) { return 2 + 4 * static_cast<std::size_t>(block) + which; }

Eigen::MatrixXd gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * standard_normal(rng);
  }
  return m;
}

double lrelu(double x, double slope) { return x > 0 ? x : slope * x; }

// Activations kept for the backward pass.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> h;       // block inputs, h[0] = input layer output
  std::vector<Eigen::MatrixXd> zhat;    // normalized pre-activations
  std::vector<Eigen::MatrixXd> y;       // gamma * zhat + beta
  std::vector<Eigen::VectorXd> inv_std;
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::VectorXd> var;
  Eigen::MatrixXd logits;
};

enum class Mode { train, infer };

void network_forward(const DseModel& model, const Eigen::MatrixXd& x, Mode mode, ForwardCache& cache) {
  const auto& arch = model.architecture();
  const auto& p = model.params();
  const Eigen::Index batch = x.cols();
  cache.h.assign(1, (p[0] * x).colwise() + p[1].col(0));
  cache.zhat.clear();
  cache.y.clear();
  cache.inv_std.clear();
  cache.mean.clear();
  cache.var.clear();
  for (int b = 0; b < arch.blocks; ++b) {
    const Eigen::MatrixXd& h = cache.h.back();
    Eigen::MatrixXd z = (p[block_param(b, 0)] * h).colwise() + p[block_param(b, 1)].col(0);
    Eigen::VectorXd mean;
    Eigen::VectorXd var;
    if (mode == Mode::train) {
      mean = z.rowwise().mean();
      var = (z.colwise() - mean).array().square().rowwise().sum().matrix() / static_cast<double>(batch);
    } else {
      mean = model.running_mean()[b];
      var = model.running_var()[b];
    }
    Eigen::VectorXd inv_std = (var.array() + arch.bn_eps).rsqrt().matrix();
    Eigen::MatrixXd zhat = (z.colwise() - mean).array().colwise() * inv_std.array();
    Eigen::MatrixXd y = (zhat.array().colwise() * p[block_param(b, 2)].col(0).array()).colwise() +
                        p[block_param(b, 3)].col(0).array();
    Eigen::MatrixXd next = h + y.unaryExpr([&](double v) { return lrelu(v, arch.leaky_slope); });
    cache.zhat.push_back(std::move(zhat));
    cache.y.push_back(std::move(y));
    cache.inv_std.push_back(std::move(inv_std));
    cache.mean.push_back(std::move(mean));
    cache.var.push_back(std::move(var));
    cache.h.push_back(std::move(next));
  }
  const std::size_t out = p.size() - 2;
  cache.logits = (p[out] * cache.h.back()).colwise() + p[out + 1].col(0);
}

void network_backward(const DseModel& model, const Eigen::MatrixXd& x, const ForwardCache& cache,
                      const Eigen::MatrixXd& d_logits, std::vector<Eigen::MatrixXd>& grads) {
  const auto& arch = model.architecture();
  const auto& p = model.params();
  const double batch = static_cast<double>(x.cols());
  const std::size_t out = p.size() - 2;
  grads[out] = d_logits * cache.h.back().transpose();
  grads[out + 1] = d_logits.rowwise().sum();
  Eigen::MatrixXd dh = p[out].transpose() * d_logits;
  for (int b = arch.blocks - 1; b >= 0; --b) {
    const Eigen::MatrixXd& y = cache.y[b];
    const Eigen::MatrixXd& zhat = cache.zhat[b];
    const Eigen::MatrixXd dy =
        dh.array() * y.unaryExpr([&](double v) { return v > 0 ? 1.0 : arch.leaky_slope; }).array();
    grads[block_param(b, 2)] = (dy.array() * zhat.array()).rowwise().sum().matrix();
    grads[block_param(b, 3)] = dy.rowwise().sum();
    const Eigen::MatrixXd dzhat = dy.array().colwise() * p[block_param(b, 2)].col(0).array();
    const Eigen::VectorXd sum_dzhat = dzhat.rowwise().sum();
    const Eigen::VectorXd sum_dzhat_zhat = (dzhat.array() * zhat.array()).rowwise().sum().matrix();
    Eigen::MatrixXd dz = (batch * dzhat.array()).colwise() - sum_dzhat.array();
    dz.array() -= zhat.array().colwise() * sum_dzhat_zhat.array();
    dz.array().colwise() *= cache.inv_std[b].array() / batch;
    const Eigen::MatrixXd& h = cache.h[b];
    grads[block_param(b, 0)] = dz * h.transpose();
    grads[block_param(b, 1)] = dz.rowwise().sum();
    dh += p[block_param(b, 0)].transpose() * dz;
  }
  grads[0] = dh * x.transpose();
  grads[1] = dh.rowwise().sum();
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("DSE checkpoint truncated");
  return v;
}

void put_tensor(std::ostream& out, const Eigen::MatrixXd& m) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) put<float>(out, static_cast<float>(m(i, j)));
  }
}

Eigen::MatrixXd get_tensor(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  const auto r = get<std::uint32_t>(in);
  const auto c = get<std::uint32_t>(in);
  if (r != rows || c != cols) {
    throw std::runtime_error(fmt::format("DSE checkpoint tensor is {}x{}, expected {}x{}", r, c, rows, cols));
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = get<float>(in);
  }
  return m;
}

}  // namespace

DseModel::DseModel(DseArchitecture arch, PhiBox box, std::uint64_t seed) : arch_(arch), box_(box) {
  box_.validate();
  if (arch_.width <= 0 || arch_.blocks < 0 || arch_.n_electrodes <= 0 || arch_.target_height <= 0 ||
      arch_.target_width <= 0) {
    throw std::invalid_argument("invalid DSE architecture");
  }
  Rng rng{seed};
  const int in = arch_.input_size();
  const int w = arch_.width;
  params_.push_back(gaussian_matrix(rng, w, in, std::sqrt(2.0 / in)));
  params_.push_back(Eigen::MatrixXd::Zero(w, 1));
  for (int b = 0; b < arch_.blocks; ++b) {
    params_.push_back(gaussian_matrix(rng, w, w, std::sqrt(2.0 / w)));
    params_.push_back(Eigen::MatrixXd::Zero(w, 1));
    params_.push_back(Eigen::MatrixXd::Constant(w, 1, 0.5));
    params_.push_back(Eigen::MatrixXd::Zero(w, 1));
    running_mean_.push_back(Eigen::VectorXd::Zero(w));
    running_var_.push_back(Eigen::VectorXd::Ones(w));
  }
  const int n = arch_.n_electrodes;
  params_.push_back(gaussian_matrix(rng, 2 * n, w, 0.1 / std::sqrt(static_cast<double>(w))));
  Eigen::MatrixXd bias = Eigen::MatrixXd::Zero(2 * n, 1);
  // Start every electrode just above threshold at mid-range frequency.
  const double start = 1.2 / arch_.amp_max;
  bias.topRows(n).setConstant(std::log(start / (1.0 - start)));
  params_.push_back(bias);
}

Eigen::VectorXd DseModel::make_input(const TargetImage& target, const UserParams& phi) const {
  if (target.height() != arch_.target_height || target.width() != arch_.target_width) {
    throw std::invalid_argument(fmt::format("DSE expects {}x{} targets, got {}x{}", arch_.target_height,
                                            arch_.target_width, target.height(), target.width()));
  }
  Eigen::VectorXd x(arch_.input_size());
  const Image& px = target.pixels();
  Eigen::Index i = 0;
  for (Eigen::Index r = 0; r < px.rows(); ++r) {
    for (Eigen::Index c = 0; c < px.cols(); ++c) x(i++) = px(r, c);
  }
  const auto unit = box_.normalize(phi);
  for (double u : unit) x(i++) = 2.0 * u - 1.0;
  return x;
}

Eigen::MatrixXd DseModel::infer_logits(const Eigen::MatrixXd& inputs) const {
  ForwardCache cache;
  network_forward(*this, inputs, Mode::infer, cache);
  return cache.logits;
}

bool DseModel::all_finite() const {
  for (const auto& p : params_) {
    if (!p.allFinite()) return false;
  }
  return true;
}

void DseModel::save(std::ostream& out) const {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(arch_.target_height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(arch_.target_width));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(arch_.width));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(arch_.blocks));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(arch_.n_electrodes));
  for (double v : {arch_.leaky_slope, arch_.amp_max, arch_.freq_min, arch_.freq_max, arch_.pulse_ms, arch_.bn_eps}) {
    put<double>(out, v);
  }
  for (double v : box_.low) put<double>(out, v);
  for (double v : box_.high) put<double>(out, v);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size() + 2 * running_mean_.size()));
  for (const auto& p : params_) put_tensor(out, p);
  for (std::size_t b = 0; b < running_mean_.size(); ++b) {
    put_tensor(out, running_mean_[b]);
    put_tensor(out, running_var_[b]);
  }
  if (!out) throw std::runtime_error("failed to write DSE checkpoint");
}

DseModel DseModel::load(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a DSE checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in);
  if (version != kFormatVersion) throw std::runtime_error(fmt::format("unsupported DSE checkpoint version {}", version));
  DseModel m;
  m.arch_.target_height = static_cast<int>(get<std::uint32_t>(in));
  m.arch_.target_width = static_cast<int>(get<std::uint32_t>(in));
  m.arch_.width = static_cast<int>(get<std::uint32_t>(in));
  m.arch_.blocks = static_cast<int>(get<std::uint32_t>(in));
  m.arch_.n_electrodes = static_cast<int>(get<std::uint32_t>(in));
  m.arch_.leaky_slope = get<double>(in);
  m.arch_.amp_max = get<double>(in);
  m.arch_.freq_min = get<double>(in);
  m.arch_.freq_max = get<double>(in);
  m.arch_.pulse_ms = get<double>(in);
  m.arch_.bn_eps = get<double>(in);
  for (auto& v : m.box_.low) v = get<double>(in);
  for (auto& v : m.box_.high) v = get<double>(in);
  m.box_.validate();
  const auto count = get<std::uint32_t>(in);
  const int blocks = m.arch_.blocks;
  if (count != static_cast<std::uint32_t>(4 + 6 * blocks)) {
    throw std::runtime_error(fmt::format("DSE checkpoint holds {} tensors, expected {}", count, 4 + 6 * blocks));
  }
  const int w = m.arch_.width;
  m.params_.push_back(get_tensor(in, w, m.arch_.input_size()));
  m.params_.push_back(get_tensor(in, w, 1));
  for (int b = 0; b < blocks; ++b) {
    m.params_.push_back(get_tensor(in, w, w));
    for (int k = 0; k < 3; ++k) m.params_.push_back(get_tensor(in, w, 1));
  }
  m.params_.push_back(get_tensor(in, 2 * m.arch_.n_electrodes, w));
  m.params_.push_back(get_tensor(in, 2 * m.arch_.n_electrodes, 1));
  for (int b = 0; b < blocks; ++b) {
    m.running_mean_.push_back(get_tensor(in, w, 1).col(0));
    m.running_var_.push_back(get_tensor(in, w, 1).col(0));
  }
  if (!m.all_finite()) throw std::runtime_error("DSE checkpoint contains non-finite weights");
  return m;
}

void DseModel::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  save(f);
}

DseModel DseModel::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open DSE checkpoint " + path.string());
  return load(f);
}

Stimulus logits_to_stimulus(const DseArchitecture& arch, const Eigen::Ref<const Eigen::VectorXd>& logits) {
  const int n = arch.n_electrodes;
  Stimulus s(static_cast<std::size_t>(n));
  for (int e = 0; e < n; ++e) {
    auto& p = s.pulses[static_cast<std::size_t>(e)];
    p.amplitude = arch.amp_max * sigmoid(logits(e));
    p.frequency = arch.freq_min + (arch.freq_max - arch.freq_min) * sigmoid(logits(n + e));
    p.pulse_duration = arch.pulse_ms;
  }
  return s;
}

Stimulus dse_forward(const DseModel& model, const TargetImage& target, const UserParams& phi) {
  const Eigen::MatrixXd logits = model.infer_logits(model.make_input(target, phi));
  return logits_to_stimulus(model.architecture(), logits.col(0));
}

std::vector<Stimulus> dse_forward_batch(const DseModel& model, std::span<const TargetImage> targets,
                                        const UserParams& phi) {
  Eigen::MatrixXd x(model.architecture().input_size(), static_cast<Eigen::Index>(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = model.make_input(targets[i], phi);
  const Eigen::MatrixXd logits = model.infer_logits(x);
  std::vector<Stimulus> out;
  out.reserve(targets.size());
  for (Eigen::Index i = 0; i < logits.cols(); ++i) out.push_back(logits_to_stimulus(model.architecture(), logits.col(i)));
  return out;
}

double dse_batch_loss(const DseModel& model, std::span<const TrainingPair> batch, DifferentiableRenderer& renderer,
                      double target_half_extent_deg, DseGradients* grads) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  const auto& arch = model.architecture();
  if (renderer.array().size() != static_cast<std::size_t>(arch.n_electrodes)) {
    throw std::invalid_argument("renderer array does not match the DSE output size");
  }
  const Eigen::Index bsz = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd x(arch.input_size(), bsz);
  for (Eigen::Index i = 0; i < bsz; ++i) x.col(i) = model.make_input(*batch[i].target, batch[i].phi);

  ForwardCache cache;
  network_forward(model, x, Mode::train, cache);
  if (!cache.logits.allFinite()) return std::numeric_limits<double>::quiet_NaN();

  const int n = arch.n_electrodes;
  const GridSpec& grid = renderer.config().grid;
  const double npix = static_cast<double>(grid.height) * grid.width;
  std::vector<double> amp(n), freq(n), dur(n, arch.pulse_ms), d_amp(n), d_freq(n);
  Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(2 * n, bsz);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < bsz; ++i) {
    std::vector<double> sig_a(n), sig_f(n);
    for (int e = 0; e < n; ++e) {
      sig_a[e] = sigmoid(cache.logits(e, i));
      sig_f[e] = sigmoid(cache.logits(n + e, i));
      amp[e] = arch.amp_max * sig_a[e];
      freq[e] = arch.freq_min + (arch.freq_max - arch.freq_min) * sig_f[e];
    }
    const Image img = renderer.forward(batch[i].phi, amp, freq, dur);
    const Percept target = target_on_grid(*batch[i].target, grid, target_half_extent_deg);
    const Image diff = img - target.data();
    loss += diff.square().sum() / npix;
    if (grads) {
      const Image d_img = diff * (2.0 / (npix * static_cast<double>(bsz)));
      renderer.backward(d_img, d_amp, d_freq);
      for (int e = 0; e < n; ++e) {
        d_logits(e, i) = d_amp[e] * arch.amp_max * sig_a[e] * (1.0 - sig_a[e]);
        d_logits(n + e, i) = d_freq[e] * (arch.freq_max - arch.freq_min) * sig_f[e] * (1.0 - sig_f[e]);
      }
    }
  }
  loss /= static_cast<double>(bsz);
  if (grads) {
    grads->params.resize(model.params().size());
    network_backward(model, x, cache, d_logits, grads->params);
    grads->batch_mean = cache.mean;
    grads->batch_var = cache.var;
  }
  return loss;
}

double dse_eval_loss(const DseModel& model, std::span<const TrainingPair> pairs, const ArraySpec& array,
                     const ForwardConfig& config, double target_half_extent_deg) {
  if (pairs.empty()) return 0.0;
  const auto& arch = model.architecture();
  Eigen::MatrixXd x(arch.input_size(), static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    x.col(static_cast<Eigen::Index>(i)) = model.make_input(*pairs[i].target, pairs[i].phi);
  }
  const Eigen::MatrixXd logits = model.infer_logits(x);
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Stimulus s = logits_to_stimulus(arch, logits.col(static_cast<Eigen::Index>(i)));
    const ElectrodeArray unit = make_unit_threshold_array(array, pairs[i].phi);
    const Percept p = render_percept(s, pairs[i].phi, unit, config);
    total += percept_mse(p, target_on_grid(*pairs[i].target, config.grid, target_half_extent_deg));
  }
  return total / static_cast<double>(pairs.size());
}

DseTrainResult dse_train(const PhiBox& box, std::span<const TargetImage> train,
                         std::span<const TargetImage> validation, const DseTrainConfig& config,
                         const TrainingProgress& progress) {
  box.validate();
  if (train.empty()) throw std::invalid_argument("dse_train: empty training set");
  if (validation.empty()) throw std::invalid_argument("dse_train: empty validation set");
  if (config.batch_size < 2) throw std::invalid_argument("dse_train: batch normalization needs batch_size >= 2");
  DseArchitecture arch = config.arch;
  arch.n_electrodes = static_cast<int>(config.array.size());
  const double extent = config.target_half_extent_deg > 0 ? config.target_half_extent_deg
                                                          : array_half_extent_deg(config.array, config.forward);

  DseModel model(arch, box, derive_seed(config.seed, 1));
  Rng rng{derive_seed(config.seed, 2)};

  std::vector<TrainingPair> val_pairs;
  {
    Rng vrng{derive_seed(config.seed, 3)};
    for (int i = 0; i < config.validation_pairs; ++i) {
      const auto& t = validation[static_cast<std::size_t>(i) % validation.size()];
      val_pairs.push_back({&t, box.sample_uniform(vrng())});
    }
  }

  DifferentiableRenderer renderer(config.array, config.forward);
  renderer.set_subthreshold_surrogate(config.subthreshold_surrogate);
  auto& params = model.params();
  std::vector<Eigen::MatrixXd> m1, m2;
  for (const auto& p : params) {
    m1.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    m2.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  DseTrainResult result;
  result.initial_val_loss = dse_eval_loss(model, val_pairs, config.array, config.forward, extent);
  result.best_val_loss = result.initial_val_loss;
  result.best_step = 0;
  result.model = model;
  result.curve.push_back({0, result.initial_val_loss, result.initial_val_loss, config.learning_rate});
  if (progress) progress(result.curve.back());

  double lr = config.learning_rate;
  int stale_evals = 0;
  double train_acc = 0.0;
  int train_count = 0;
  DseGradients grads;
  std::vector<TrainingPair> batch(static_cast<std::size_t>(config.batch_size));
  for (int step = 1; step <= config.steps; ++step) {
    for (auto& pair : batch) pair = {&train[uniform_index(rng, train.size())], box.sample_uniform(rng())};
    const double loss = dse_batch_loss(model, batch, renderer, extent, &grads);
    if (!std::isfinite(loss)) {
      throw TrainingError(fmt::format("non-finite training loss at step {} (lr={}, last val={})", step, lr,
                                      result.curve.back().val_loss));
    }
    train_acc += loss;
    ++train_count;

    const double c1 = 1.0 - std::pow(kBeta1, step);
    const double c2 = 1.0 - std::pow(kBeta2, step);
    for (std::size_t k = 0; k < params.size(); ++k) {
      m1[k] = kBeta1 * m1[k] + (1.0 - kBeta1) * grads.params[k];
      m2[k] = kBeta2 * m2[k] + (1.0 - kBeta2) * grads.params[k].cwiseAbs2();
      params[k].array() -= lr * (m1[k].array() / c1) / ((m2[k].array() / c2).sqrt() + kAdamEps);
    }
    const double unbias = static_cast<double>(config.batch_size) / (config.batch_size - 1);
    for (std::size_t b = 0; b < grads.batch_mean.size(); ++b) {
      model.running_mean()[b] = (1 - config.bn_momentum) * model.running_mean()[b] + config.bn_momentum * grads.batch_mean[b];
      model.running_var()[b] =
          (1 - config.bn_momentum) * model.running_var()[b] + config.bn_momentum * unbias * grads.batch_var[b];
    }

    if (step % config.eval_every == 0 || step == config.steps) {
      const double val = dse_eval_loss(model, val_pairs, config.array, config.forward, extent);
      if (!std::isfinite(val)) {
        throw TrainingError(fmt::format("non-finite validation loss at step {} (lr={})", step, lr));
      }
      result.curve.push_back({step, train_acc / train_count, val, lr});
      if (progress) progress(result.curve.back());
      train_acc = 0.0;
      train_count = 0;
      if (val < result.best_val_loss) {
        result.best_val_loss = val;
        result.best_step = step;
        result.model = model;
        stale_evals = 0;
      } else if (++stale_evals >= config.plateau_patience) {
        lr = std::max(config.min_learning_rate, 0.5 * lr);
        stale_evals = 0;
        spdlog::debug("dse_train: validation plateau at step {}, learning rate -> {}", step, lr);
      }
    }
  }
  return result;
}

void write_training_curve_csv(const std::filesystem::path& path, std::span<const TrainingCurvePoint> curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "step,train_loss,val_loss\n";
  for (const auto& p : curve) f << fmt::format("{},{:.8g},{:.8g}\n", p.step, p.train_loss, p.val_loss);
}

}  // namespace hilo
