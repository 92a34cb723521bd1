#include "hilo/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "hilo/mnist.hpp"
#include "hilo/preference.hpp"
#include "hilo/random.hpp"

namespace hilo {

using nlohmann::json;

namespace {

// Seed streams derived from a subject seed.
constexpr std::uint64_t kStreamPhi = 1;
constexpr std::uint64_t kStreamThresholds = 2;
constexpr std::uint64_t kStreamMisspecification = 3;
constexpr std::uint64_t kStreamOptimizer = 4;
constexpr std::uint64_t kStreamTrials = 5;
constexpr std::uint64_t kStreamHeldout = 6;
constexpr std::uint64_t kStreamAgent = 7;

json to_json_array(const ParamVector& v) { return json(std::vector<double>(v.begin(), v.end())); }

ParamVector param_vector_from_json(const json& j) {
  if (!j.is_array() || j.size() != kNumUserParams) throw ReplayError("expected a 13-element parameter array");
  ParamVector v{};
  for (std::size_t i = 0; i < kNumUserParams; ++i) v[i] = j[i].get<double>();
  return v;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace

// ---------------------------------------------------------------------------
// Conditions and subjects

Condition Condition::parse(std::string_view name) {
  if (name == "main") return main();
  if (name == "tm") return threshold_misspecification();
  if (name == "ood") return out_of_distribution();
  throw std::invalid_argument(fmt::format("unknown condition '{}' (expected main, tm or ood)", name));
}

std::string Condition::name() const {
  switch (kind) {
    case ConditionKind::main: return "main";
    case ConditionKind::threshold_misspecification: return "tm";
    case ConditionKind::out_of_distribution: return "ood";
  }
  return "main";
}

void Condition::validate() const {
  if (!(tm_factor_min > 0 && tm_factor_min <= tm_factor_max) || !std::isfinite(tm_factor_max)) {
    throw std::invalid_argument("condition: misspecification range must satisfy 0 < min <= max");
  }
  if (!(ood_fraction > 0) || !std::isfinite(ood_fraction)) {
    throw std::invalid_argument("condition: OOD widening must be positive");
  }
}

std::vector<double> SubjectSpec::threshold_ratios() const {
  std::vector<double> out(assumed_thresholds_ua.size());
  for (std::size_t e = 0; e < out.size(); ++e) out[e] = assumed_thresholds_ua[e] / true_array.thresholds_ua[e];
  return out;
}

Percept SubjectSpec::perceive(const Stimulus& threshold_units, const ForwardConfig& config) const {
  return render_percept(calibrate(threshold_units, assumed_thresholds_ua), true_phi, true_array, config);
}

SubjectSpec make_subject(const Condition& condition, const PhiBox& box, const ArraySpec& array, std::uint64_t seed,
                         std::string id) {
  condition.validate();
  box.validate();
  SubjectSpec s;
  s.id = id.empty() ? fmt::format("{}-{:016x}", condition.name(), seed) : std::move(id);
  s.condition = condition;
  s.seed = seed;

  const std::uint64_t phi_seed = derive_seed(seed, kStreamPhi);
  if (condition.kind == ConditionKind::out_of_distribution) {
    const PhiBox wide = box.expanded(condition.ood_fraction);
    bool found = false;
    for (std::uint64_t attempt = 0; attempt < 100000 && !found; ++attempt) {
      const UserParams candidate = wide.sample_uniform(derive_seed(phi_seed, attempt));
      if (candidate.is_valid() && !box.contains(candidate)) {
        s.true_phi = candidate;
        found = true;
      }
    }
    if (!found) throw std::runtime_error("make_subject: no valid parameters outside the box");
  } else {
    s.true_phi = box.sample_uniform(phi_seed);
  }

  s.threshold_offsets = draw_threshold_offsets(array.size(), derive_seed(seed, kStreamThresholds));
  s.true_array = make_electrode_array(array, s.true_phi, s.threshold_offsets);
  s.assumed_thresholds_ua = s.true_array.thresholds_ua;
  if (condition.kind == ConditionKind::threshold_misspecification) {
    Rng rng{derive_seed(seed, kStreamMisspecification)};
    for (auto& t : s.assumed_thresholds_ua) t *= uniform(rng, condition.tm_factor_min, condition.tm_factor_max);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Shared resources

ExperimentContext::ExperimentContext(DseModel model, std::vector<TargetImage> duel_targets,
                                     std::vector<TargetImage> heldout_targets, ExperimentSettings settings)
    : model_(std::move(model)),
      duel_targets_(std::move(duel_targets)),
      heldout_targets_(std::move(heldout_targets)),
      settings_(std::move(settings)) {
  if (duel_targets_.empty()) throw std::invalid_argument("experiment: no duel targets");
  if (heldout_targets_.size() < static_cast<std::size_t>(settings_.heldout_count)) {
    throw std::invalid_argument(fmt::format("experiment: {} held-out targets, {} needed", heldout_targets_.size(),
                                            settings_.heldout_count));
  }
  if (settings_.tutorial_duels < 0 || settings_.optimization_duels < 0 || settings_.evaluation_duels < 0) {
    throw std::invalid_argument("experiment: negative phase length");
  }
  if (model_.architecture().n_electrodes != static_cast<int>(settings_.array.size())) {
    throw std::invalid_argument("experiment: model electrode count does not match the array");
  }
  if (!(settings_.agent_temperature > 0)) throw std::invalid_argument("experiment: agent temperature must be > 0");
  settings_.box.validate();
  half_extent_ = array_half_extent_deg(settings_.array, settings_.forward);
  std::ostringstream bytes;
  model_.save(bytes);
  digest_ = fnv1a_hex(bytes.str());
}

std::shared_ptr<const ExperimentContext> ExperimentContext::from_model(DseModel model,
                                                                       const std::filesystem::path& mnist_dir,
                                                                       ExperimentSettings settings) {
  const auto& arch = model.architecture();
  if (arch.target_height != arch.target_width) throw std::invalid_argument("experiment: DSE input must be square");
  auto digits = load_mnist_split(mnist_dir, "t10k", arch.target_height);
  const auto n_duel = static_cast<std::size_t>(settings.duel_pool_size);
  if (digits.size() <= n_duel) {
    throw std::invalid_argument(fmt::format("experiment: {} test digits, need more than {}", digits.size(), n_duel));
  }
  std::vector<TargetImage> duel(digits.begin(), digits.begin() + static_cast<std::ptrdiff_t>(n_duel));
  std::vector<TargetImage> heldout(digits.begin() + static_cast<std::ptrdiff_t>(n_duel), digits.end());
  return std::make_shared<const ExperimentContext>(std::move(model), std::move(duel), std::move(heldout),
                                                   std::move(settings));
}

std::shared_ptr<const ExperimentContext> ExperimentContext::load(const std::filesystem::path& model_path,
                                                                 const std::filesystem::path& mnist_dir,
                                                                 ExperimentSettings settings) {
  return from_model(DseModel::load(model_path), mnist_dir, std::move(settings));
}

DseTrainResult train_dse_on_mnist(const std::filesystem::path& mnist_dir, const DseTrainConfig& config,
                                  const PhiBox& box, int validation_digits, const TrainingProgress& progress) {
  auto digits = load_mnist_split(mnist_dir, "train", config.arch.target_height);
  if (validation_digits < 1 || static_cast<std::size_t>(validation_digits) >= digits.size()) {
    throw std::invalid_argument(fmt::format("train_dse_on_mnist: cannot hold back {} of {} digits", validation_digits,
                                            digits.size()));
  }
  const auto split = digits.end() - validation_digits;
  const std::vector<TargetImage> train(digits.begin(), split);
  const std::vector<TargetImage> validation(split, digits.end());
  return dse_train(box, train, validation, config, progress);
}

Percept ExperimentContext::target_percept(const TargetImage& target) const {
  return target_on_grid(target, settings_.forward.grid, half_extent_);
}

Stimulus ExperimentContext::encode_dse(const TargetImage& target, const UserParams& phi) const {
  return dse_forward(model_, target, phi);
}

Stimulus ExperimentContext::encode_naive(const TargetImage& target) const {
  return naive_encode(target, settings_.array, settings_.naive_amp_max, settings_.forward);
}

double ExperimentContext::heldout_mse(const SubjectSpec& subject, const UserParams& phi,
                                      std::span<const std::size_t> heldout) const {
  if (heldout.empty()) throw std::invalid_argument("heldout_mse: no targets");
  std::vector<TargetImage> targets;
  targets.reserve(heldout.size());
  for (std::size_t i : heldout) targets.push_back(heldout_targets_.at(i));
  const auto stimuli = dse_forward_batch(model_, targets, phi);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    total += percept_mse(subject.perceive(stimuli[i], settings_.forward), target_percept(targets[i]));
  }
  return total / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------------------
// Session

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::tutorial: return "tutorial";
    case Phase::optimization: return "optimization";
    case Phase::evaluation: return "evaluation";
    case Phase::complete: return "complete";
  }
  return "complete";
}

std::string_view side_name(Side s) { return s == Side::left ? "left" : "right"; }

Side parse_side(std::string_view s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  throw std::invalid_argument(fmt::format("side must be 'left' or 'right', got '{}'", s));
}

std::string_view arm_name(ArmKind k) {
  switch (k) {
    case ArmKind::champion: return "champion";
    case ArmKind::challenger: return "challenger";
    case ArmKind::optimized: return "hilo";
    case ArmKind::naive: return "naive";
    case ArmKind::dse_default: return "dse_default";
  }
  return "champion";
}

namespace {

OptimizerConfig session_optimizer_config(const ExperimentSettings& settings, std::uint64_t subject_seed) {
  OptimizerConfig c = settings.optimizer;
  c.box = settings.box;
  c.seed = derive_seed(subject_seed, kStreamOptimizer);
  return c;
}

std::vector<std::size_t> sample_heldout(std::size_t pool, int count, std::uint64_t seed) {
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng{seed};
  for (int i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(i) + uniform_index(rng, pool - static_cast<std::size_t>(i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

Phase phase_for_trial(const ExperimentSettings& s, int trial) {
  if (trial <= 0) return Phase::tutorial;
  if (trial <= s.optimization_duels) return Phase::optimization;
  if (trial <= s.optimization_duels + s.evaluation_duels) return Phase::evaluation;
  return Phase::complete;
}

json record_json(const DuelRecord& r) {
  return {{"phase", phase_name(r.phase)},
          {"trial", r.trial},
          {"target", r.target_index},
          {"first", arm_name(r.first_kind)},
          {"second", arm_name(r.second_kind)},
          {"first_on_left", r.first_on_left},
          {"side", side_name(r.side)},
          {"chose_first", r.chose_first},
          {"mse_first", r.mse_first},
          {"mse_second", r.mse_second}};
}

}  // namespace

Session::Session(std::shared_ptr<const ExperimentContext> context, SubjectSpec subject, EventSink sink)
    : context_(std::move(context)),
      subject_(std::move(subject)),
      sink_(std::move(sink)),
      optimizer_(session_optimizer_config(context_->settings(), subject_.seed)) {
  const auto& s = context_->settings();
  next_trial_ = 1 - s.tutorial_duels;
  phase_ = phase_for_trial(s, next_trial_);
  heldout_ = sample_heldout(context_->heldout_targets().size(), s.heldout_count,
                            derive_seed(subject_.seed, kStreamHeldout));
  const auto ratios = subject_.threshold_ratios();
  const auto [rmin, rmax] = std::minmax_element(ratios.begin(), ratios.end());
  emit({{"event", "session_created"},
        {"id", subject_.id},
        {"condition", subject_.condition.name()},
        {"tm_factor_min", subject_.condition.tm_factor_min},
        {"tm_factor_max", subject_.condition.tm_factor_max},
        {"ood_fraction", subject_.condition.ood_fraction},
        {"seed", subject_.seed},
        {"model_digest", context_->model_digest()},
        {"true_phi", to_json_array(subject_.true_phi.to_vector())},
        {"threshold_ratio_min", *rmin},
        {"threshold_ratio_max", *rmax},
        {"heldout", heldout_},
        {"phase", phase_name(phase_)}});
  if (phase_ == Phase::evaluation || phase_ == Phase::complete) optimized_ = context_->settings().box.midpoint();
}

Session::Session(std::shared_ptr<const ExperimentContext> context, const Condition& condition, std::uint64_t seed,
                 std::string id, EventSink sink)
    : Session(context, make_subject(condition, context->settings().box, context->settings().array, seed, std::move(id)),
              std::move(sink)) {}

void Session::set_event_sink(EventSink sink) { sink_ = std::move(sink); }

void Session::emit(const json& event) const {
  if (sink_) sink_(event);
}

Arm Session::make_arm(ArmKind kind, const UserParams& phi, const TargetImage& target,
                      const Percept& target_percept) const {
  Arm arm;
  arm.kind = kind;
  arm.phi = phi;
  const Stimulus stim = kind == ArmKind::naive ? context_->encode_naive(target) : context_->encode_dse(target, phi);
  arm.percept = subject_.perceive(stim, context_->settings().forward);
  arm.mse = percept_mse(arm.percept, target_percept);
  return arm;
}

void Session::propose() {
  const auto& s = context_->settings();
  const UserParams default_phi = dse_default_phi(s.box);
  Rng rng{derive_seed(derive_seed(subject_.seed, kStreamTrials), static_cast<std::uint64_t>(next_trial_ + 1000))};

  Duel d;
  d.phase = phase_;
  d.trial = next_trial_;
  ArmKind first_kind = ArmKind::dse_default;
  ArmKind second_kind = ArmKind::naive;
  UserParams first_phi = default_phi;
  UserParams second_phi = default_phi;
  switch (phase_) {
    case Phase::tutorial:
      // Fixed practice digits.
      d.target_index = static_cast<std::size_t>(next_trial_ + s.tutorial_duels - 1) % context_->duel_targets().size();
      break;
    case Phase::optimization: {
      d.target_index = uniform_index(rng, context_->duel_targets().size());
      const DuelProposal& p = optimizer_.propose();
      if (p.trial != next_trial_) throw std::logic_error("session and optimizer trial counters disagree");
      first_kind = ArmKind::champion;
      second_kind = ArmKind::challenger;
      first_phi = p.phi1;
      second_phi = p.phi2;
      break;
    }
    case Phase::evaluation: {
      d.target_index = uniform_index(rng, context_->duel_targets().size());
      const int j = next_trial_ - s.optimization_duels - 1;
      first_kind = ArmKind::optimized;
      first_phi = *optimized_;
      second_kind = j % 2 == 0 ? ArmKind::naive : ArmKind::dse_default;
      break;
    }
    case Phase::complete:
      throw StalePhaseError("session is complete");
  }
  d.first_on_left = coin_flip(rng);
  const TargetImage& target = context_->duel_targets()[d.target_index];
  d.label = target.label();
  d.target_percept = context_->target_percept(target);
  d.first = make_arm(first_kind, first_phi, target, d.target_percept);
  d.second = make_arm(second_kind, second_phi, target, d.target_percept);

  emit({{"event", "duel_proposed"},
        {"phase", phase_name(d.phase)},
        {"trial", d.trial},
        {"target", d.target_index},
        {"label", d.label},
        {"first", arm_name(d.first.kind)},
        {"second", arm_name(d.second.kind)},
        {"first_phi", to_json_array(d.first.phi.to_vector())},
        {"second_phi", to_json_array(d.second.phi.to_vector())},
        {"first_on_left", d.first_on_left},
        {"brightness_left", displayed_brightness(d.left().percept)},
        {"brightness_right", displayed_brightness(d.right().percept)}});
  pending_ = std::move(d);
}

const Duel& Session::current_duel() {
  if (phase_ == Phase::complete) throw StalePhaseError("session is complete");
  if (!pending_) propose();
  return *pending_;
}

double Session::champion_mse(const UserParams& phi) {
  const ParamVector key = phi.to_vector();
  if (auto it = mse_cache_.find(key); it != mse_cache_.end()) return it->second;
  const double v = context_->heldout_mse(subject_, phi, heldout_);
  mse_cache_.emplace(key, v);
  return v;
}

void Session::advance(Phase to) {
  json event{{"event", "phase_advanced"}, {"from", phase_name(phase_)}, {"to", phase_name(to)}};
  if (to == Phase::evaluation) {
    optimized_ = optimizer_.trial_count() > 0 ? optimizer_.best_phi() : context_->settings().box.midpoint();
    event["optimized_phi"] = to_json_array(optimized_->to_vector());
  }
  emit(event);
  phase_ = to;
}

void Session::choose(int trial, Side side) {
  if (phase_ == Phase::complete) throw StalePhaseError("session is complete");
  if (trial != next_trial_) {
    throw StaleTrialError(fmt::format("choice for trial {} but trial {} is pending", trial, next_trial_));
  }
  const Duel& d = current_duel();
  DuelRecord r;
  r.phase = d.phase;
  r.trial = d.trial;
  r.target_index = d.target_index;
  r.first_kind = d.first.kind;
  r.second_kind = d.second.kind;
  r.first_on_left = d.first_on_left;
  r.side = side;
  r.chose_first = d.chose_first(side);
  r.mse_first = d.first.mse;
  r.mse_second = d.second.mse;

  json event = record_json(r);
  event["event"] = "choice_recorded";
  event["winner"] = arm_name(r.chose_first ? r.first_kind : r.second_kind);
  emit(event);

  switch (r.phase) {
    case Phase::tutorial:
      break;
    case Phase::optimization:
      optimizer_.record_choice(trial, r.chose_first);
      mse_trace_.push_back(champion_mse(optimizer_.best_phi()));
      break;
    case Phase::evaluation: {
      BaselineTally& t = r.second_kind == ArmKind::naive ? vs_naive_ : vs_default_;
      t.n += 1;
      if (!r.chose_first) t.baseline_chosen += 1;
      break;
    }
    case Phase::complete:
      break;
  }
  records_.push_back(r);
  pending_.reset();
  ++next_trial_;
  const Phase next = phase_for_trial(context_->settings(), next_trial_);
  while (phase_ != next) advance(static_cast<Phase>(static_cast<int>(phase_) + 1));
}

SessionResult Session::result() const {
  if (phase_ != Phase::complete) {
    throw StalePhaseError(fmt::format("session is in the {} phase; results need a complete session", phase_name(phase_)));
  }
  SessionResult out;
  out.subject_id = subject_.id;
  out.condition = subject_.condition.name();
  out.seed = subject_.seed;
  out.duels = records_;
  out.mse_trace = mse_trace_;
  out.optimized_phi = optimized_.value_or(context_->settings().box.midpoint());
  out.true_phi = subject_.true_phi.to_vector();
  out.vs_naive = vs_naive_;
  out.vs_default = vs_default_;
  if (vs_naive_.n > 0) out.log_odds_naive = corrected_log_odds(vs_naive_.baseline_chosen, vs_naive_.n);
  if (vs_default_.n > 0) out.log_odds_default = corrected_log_odds(vs_default_.baseline_chosen, vs_default_.n);
  if (vs_naive_.n + vs_default_.n > 0) {
    out.log_odds_overall = corrected_log_odds(vs_naive_.baseline_chosen + vs_default_.baseline_chosen,
                                              vs_naive_.n + vs_default_.n);
  }

  std::vector<bool> human;
  std::vector<double> agent;
  const AgentConfig reference{context_->settings().agent_temperature, 0.0, 0};
  for (const auto& r : records_) {
    if (r.phase == Phase::tutorial) continue;
    human.push_back(r.chose_first);
    agent.push_back(agent_probability(r.mse_first, r.mse_second, reference));
  }
  out.agreement = human.empty() ? 0.0 : agreement(human, agent);
  return out;
}

std::vector<Percept> Session::brightness_anchors(const ForwardConfig& config) {
  const GridSpec& g = config.grid;
  UserParams ref;
  ref.rho = config.microns_per_degree;  // sigma of 1 deg, so the peak equals the brightness
  ref.lambda = 0.0;
  ref.size_gain = 0.0;
  ref.bright_scale = 1.0;
  ref.impl_rot = 0.0;
  ref.impl_x = g.pixel_x(g.width / 2) * config.microns_per_degree;
  ref.impl_y = g.pixel_y(g.height / 2) * config.microns_per_degree;
  const ElectrodeArray one = make_unit_threshold_array(ArraySpec{1, 1, 400.0}, ref);
  std::vector<Percept> out;
  for (double level : kAnchorLevels) {
    Stimulus stim(1, Pulse{level, config.reference_frequency_hz, config.reference_pulse_ms});
    out.push_back(render_percept(stim, ref, one, config));
  }
  return out;
}

json SessionResult::to_json() const {
  json duels_json = json::array();
  for (const auto& r : duels) duels_json.push_back(record_json(r));
  return {{"subject", subject_id},
          {"condition", condition},
          {"seed", seed},
          {"true_phi", to_json_array(true_phi)},
          {"optimized_phi", to_json_array(optimized_phi.to_vector())},
          {"mse_trace", mse_trace},
          {"vs_naive", {{"k", vs_naive.baseline_chosen}, {"n", vs_naive.n}, {"log_odds", log_odds_naive}}},
          {"vs_default", {{"k", vs_default.baseline_chosen}, {"n", vs_default.n}, {"log_odds", log_odds_default}}},
          {"log_odds_overall", log_odds_overall},
          {"agreement", agreement},
          {"duels", duels_json}};
}

// ---------------------------------------------------------------------------
// Runners

Chooser agent_chooser(const ExperimentContext& context, const AgentConfig& agent) {
  agent.validate();
  (void)context;
  return [agent](const Duel& d) {
    const AgentDecision decision = agent_choose(d.first.percept, d.second.percept, d.target_percept, agent, d.trial);
    return decision.chose_first == d.first_on_left ? Side::left : Side::right;
  };
}

void run_phase(Session& session, Phase phase, const Chooser& chooser) {
  while (session.phase() == phase && phase != Phase::complete) {
    const Duel& d = session.current_duel();
    session.choose(d.trial, chooser(d));
  }
}

void run_tutorial_phase(Session& session, const Chooser& chooser) { run_phase(session, Phase::tutorial, chooser); }

void run_optimization_phase(Session& session, const Chooser& chooser) {
  run_phase(session, Phase::optimization, chooser);
}

void run_evaluation_phase(Session& session, const Chooser& chooser) {
  run_phase(session, Phase::evaluation, chooser);
}

SessionResult run_session(Session& session, const Chooser& chooser) {
  run_tutorial_phase(session, chooser);
  run_optimization_phase(session, chooser);
  run_evaluation_phase(session, chooser);
  return session.result();
}

// ---------------------------------------------------------------------------
// Logs

JsonlWriter::JsonlWriter(const std::filesystem::path& path) : out_(std::make_shared<std::ofstream>()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_->open(path, std::ios::app);
  if (!*out_) throw std::runtime_error(fmt::format("cannot open log {}", path.string()));
}

void JsonlWriter::operator()(const json& event) {
  *out_ << event.dump() << '\n';
  out_->flush();
  if (!*out_) throw std::runtime_error("session log write failed");
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::vector<json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      // A torn final line is what a crash mid-write leaves behind.
      if (in.peek() == std::char_traits<char>::eof()) {
        spdlog::warn("{}: ignoring incomplete last line {}", path.string(), lineno);
        break;
      }
      throw ReplayError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

std::unique_ptr<Session> replay_session(std::shared_ptr<const ExperimentContext> context, std::span<const json> events,
                                        EventSink sink) {
  if (events.empty() || events.front().value("event", "") != "session_created") {
    throw ReplayError("log does not start with session_created");
  }
  const json& created = events.front();
  try {
    if (created.at("model_digest").get<std::string>() != context->model_digest()) {
      throw ReplayError("log was written with a different encoder model");
    }
    Condition condition = Condition::parse(created.at("condition").get<std::string>());
    condition.tm_factor_min = created.value("tm_factor_min", condition.tm_factor_min);
    condition.tm_factor_max = created.value("tm_factor_max", condition.tm_factor_max);
    condition.ood_fraction = created.value("ood_fraction", condition.ood_fraction);
    auto session = std::make_unique<Session>(context, condition, created.at("seed").get<std::uint64_t>(),
                                             created.at("id").get<std::string>());
    if (session->subject().true_phi.to_vector() != param_vector_from_json(created.at("true_phi"))) {
      throw ReplayError("regenerated subject differs from the logged one");
    }
    for (std::size_t i = 1; i < events.size(); ++i) {
      const json& e = events[i];
      const std::string kind = e.at("event").get<std::string>();
      if (kind == "duel_proposed") {
        const Duel& d = session->current_duel();
        if (d.trial != e.at("trial").get<int>() || d.target_index != e.at("target").get<std::size_t>() ||
            d.first_on_left != e.at("first_on_left").get<bool>() ||
            d.first.phi.to_vector() != param_vector_from_json(e.at("first_phi")) ||
            d.second.phi.to_vector() != param_vector_from_json(e.at("second_phi"))) {
          throw ReplayError(fmt::format("trial {}: regenerated duel differs from the log", d.trial));
        }
      } else if (kind == "choice_recorded") {
        session->choose(e.at("trial").get<int>(), parse_side(e.at("side").get<std::string>()));
      } else if (kind == "phase_advanced") {
        if (phase_name(session->phase()) != e.at("to").get<std::string>()) {
          throw ReplayError("phase sequence differs from the log");
        }
      } else {
        throw ReplayError(fmt::format("unknown event '{}'", kind));
      }
    }
    session->set_event_sink(std::move(sink));
    return session;
  } catch (const json::exception& e) {
    throw ReplayError(fmt::format("malformed session log: {}", e.what()));
  } catch (const StaleTrialError& e) {
    throw ReplayError(fmt::format("inconsistent session log: {}", e.what()));
  } catch (const StalePhaseError& e) {
    throw ReplayError(fmt::format("inconsistent session log: {}", e.what()));
  }
}

// ---------------------------------------------------------------------------
// Analyses

double corrected_log_odds(int k, int n) {
  if (n <= 0) throw std::invalid_argument("log odds need at least one duel");
  if (k < 0 || k > n) throw std::invalid_argument(fmt::format("log odds: k = {} outside [0, {}]", k, n));
  const double p = (k + 0.5) / (n + 1.0);
  return std::log(p / (1.0 - p));
}

LogOdds log_odds(std::span<const BaselineTally> subjects) {
  if (subjects.empty()) throw std::invalid_argument("log odds: no subjects");
  LogOdds out;
  int k = 0;
  int n = 0;
  for (const auto& s : subjects) {
    const double lo = corrected_log_odds(s.baseline_chosen, s.n);
    out.per_subject.push_back(lo);
    if (lo < 0) ++out.favoring_hilo;
    k += s.baseline_chosen;
    n += s.n;
  }
  out.mean = std::accumulate(out.per_subject.begin(), out.per_subject.end(), 0.0) /
             static_cast<double>(out.per_subject.size());
  // Intercept-only logistic MLE on the pooled counts plus half a pseudo-count
  // per outcome; its Wald variance is 1/k + 1/(n - k) at the same counts.
  const double a = k + 0.5;
  const double b = n - k + 0.5;
  out.pooled = std::log(a / b);
  out.pooled_se = std::sqrt(1.0 / a + 1.0 / b);
  out.wald_z = out.pooled / out.pooled_se;
  out.p_value = std::erfc(std::abs(out.wald_z) / std::sqrt(2.0));
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of no values");
  if (!(q >= 0 && q <= 100)) throw std::invalid_argument("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

CurveSummary summarize_mse_curves(std::span<const std::vector<double>> traces) {
  if (traces.empty()) throw std::invalid_argument("summarize_mse_curves: no traces");
  const std::size_t len = traces.front().size();
  for (const auto& t : traces) {
    if (t.size() != len) {
      throw std::invalid_argument(fmt::format("summarize_mse_curves: trace lengths {} and {} differ", len, t.size()));
    }
  }
  CurveSummary out;
  std::vector<double> column(traces.size());
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t s = 0; s < traces.size(); ++s) column[s] = traces[s][i];
    out.median.push_back(percentile(column, 50.0));
    out.q25.push_back(percentile(column, 25.0));
    out.q75.push_back(percentile(column, 75.0));
  }
  return out;
}

std::vector<double> window_means(std::span<const double> values, std::size_t width) {
  if (width == 0) throw std::invalid_argument("window width must be positive");
  std::vector<double> out;
  for (std::size_t i = 0; i < values.size(); i += width) {
    const std::size_t end = std::min(values.size(), i + width);
    out.push_back(std::accumulate(values.begin() + static_cast<std::ptrdiff_t>(i),
                                  values.begin() + static_cast<std::ptrdiff_t>(end), 0.0) /
                  static_cast<double>(end - i));
  }
  return out;
}

void write_mse_curves_csv(const std::filesystem::path& path, const CurveSummary& summary) {
  std::ostringstream out;
  out << "duel_index,median,q25,q75\n";
  for (std::size_t i = 0; i < summary.median.size(); ++i) {
    out << fmt::format("{},{},{},{}\n", i + 1, summary.median[i], summary.q25[i], summary.q75[i]);
  }
  std::ofstream f(path);
  f << out.str();
  if (!f) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
}

void write_log_odds_csv(const std::filesystem::path& path, std::span<const SessionResult> results) {
  std::ostringstream out;
  out << "subject,baseline,k,n,log_odds\n";
  for (const auto& r : results) {
    out << fmt::format("{},naive,{},{},{}\n", r.subject_id, r.vs_naive.baseline_chosen, r.vs_naive.n,
                       r.log_odds_naive);
    out << fmt::format("{},dse_default,{},{},{}\n", r.subject_id, r.vs_default.baseline_chosen, r.vs_default.n,
                       r.log_odds_default);
  }
  std::ofstream f(path);
  f << out.str();
  if (!f) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
}

// ---------------------------------------------------------------------------
// Batch simulation

double calibrate_agent_temperature(std::shared_ptr<const ExperimentContext> context, std::uint64_t seed, int subjects,
                                   double accuracy) {
  if (subjects < 1) throw std::invalid_argument("calibration needs at least one subject");
  // Lapse-free and effectively deterministic: always the lower-error percept.
  const AgentConfig greedy{1e-300, 0.0, seed};
  std::vector<double> diffs;
  for (int i = 0; i < subjects; ++i) {
    Session session(context, Condition::main(), derive_seed(seed, 0xca1b0000ULL + static_cast<std::uint64_t>(i)));
    const Chooser chooser = agent_chooser(*context, greedy);
    run_tutorial_phase(session, chooser);
    run_optimization_phase(session, chooser);
    for (const auto& r : session.records()) {
      if (r.phase == Phase::optimization) diffs.push_back(r.mse_first - r.mse_second);
    }
  }
  return calibrate_temperature(diffs, accuracy);
}

SimulationResult summarize(std::vector<SessionResult> sessions) {
  SimulationResult out;
  out.sessions = std::move(sessions);
  if (out.sessions.empty()) return out;
  std::vector<BaselineTally> naive;
  std::vector<BaselineTally> dflt;
  std::vector<std::vector<double>> traces;
  for (const auto& s : out.sessions) {
    if (s.vs_naive.n > 0) naive.push_back(s.vs_naive);
    if (s.vs_default.n > 0) dflt.push_back(s.vs_default);
    if (!s.mse_trace.empty()) traces.push_back(s.mse_trace);
  }
  if (!naive.empty()) out.vs_naive = log_odds(naive);
  if (!dflt.empty()) out.vs_default = log_odds(dflt);
  if (!traces.empty()) out.mse = summarize_mse_curves(traces);
  return out;
}

namespace {

json log_odds_json(const LogOdds& l) {
  return {{"per_subject", l.per_subject}, {"mean", l.mean},       {"pooled", l.pooled},
          {"pooled_se", l.pooled_se},     {"wald_z", l.wald_z},   {"p_value", l.p_value},
          {"favoring_hilo", l.favoring_hilo}};
}

}  // namespace

json SimulationResult::to_json() const {
  json subjects = json::array();
  for (const auto& s : sessions) {
    subjects.push_back({{"subject", s.subject_id},
                        {"log_odds_naive", s.log_odds_naive},
                        {"log_odds_default", s.log_odds_default},
                        {"agreement", s.agreement},
                        {"final_mse", s.mse_trace.empty() ? 0.0 : s.mse_trace.back()}});
  }
  json out{{"subjects", subjects}, {"vs_naive", log_odds_json(vs_naive)}, {"vs_default", log_odds_json(vs_default)}};
  if (!mse.median.empty()) {
    out["mse"] = {{"median_first", mse.median.front()},
                  {"median_last", mse.median.back()},
                  {"ratio", mse.median.back() / mse.median.front()},
                  {"window_means", window_means(mse.median, 10)}};
  }
  return out;
}

SimulationResult simulate(std::shared_ptr<const ExperimentContext> context, const SimulationConfig& config,
                          const std::filesystem::path& log_dir, const SessionProgress& progress) {
  if (config.subjects < 1) throw std::invalid_argument("simulate: need at least one subject");
  config.agent.validate();
  std::vector<SessionResult> results;
  for (int i = 0; i < config.subjects; ++i) {
    const std::uint64_t subject_seed = derive_seed(config.seed, static_cast<std::uint64_t>(i));
    const std::string id = fmt::format("{}-{:02d}", config.condition.name(), i);
    EventSink sink;
    if (!log_dir.empty()) {
      const auto path = log_dir / (id + ".jsonl");
      std::filesystem::remove(path);
      sink = JsonlWriter(path);
    }
    SubjectSpec subject = make_subject(config.condition, context->settings().box, context->settings().array,
                                       subject_seed, id);
    Session session(context, std::move(subject), std::move(sink));
    AgentConfig agent = config.agent;
    agent.seed = derive_seed(subject_seed, kStreamAgent);
    results.push_back(run_session(session, agent_chooser(*context, agent)));
    if (progress) progress(results.back());
  }
  return summarize(std::move(results));
}

}  // namespace hilo
