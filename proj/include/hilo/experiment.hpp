#pragma once

// Experiment orchestration: simulated subjects under the three conditions, the
// tutorial / optimization / evaluation session state machine shared by the
// simulated runner and the live duel service, and the analyses (log odds, MSE
// curves, agreement).

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hilo/agent.hpp"
#include "hilo/encoders.hpp"
#include "hilo/optimizer.hpp"
#include "hilo/phosphene.hpp"

namespace hilo {

// ---------------------------------------------------------------------------
// Conditions and subjects

enum class ConditionKind { main, threshold_misspecification, out_of_distribution };

struct Condition {
  ConditionKind kind = ConditionKind::main;
  /// Per-electrode assumed/true threshold ratio range (TM only).
  double tm_factor_min = 1.0;
  double tm_factor_max = 4.0;
  /// Widening of the box on every side, as a fraction of its width (OOD only).
  double ood_fraction = 0.25;

  [[nodiscard]] static Condition main() { return {}; }
  [[nodiscard]] static Condition threshold_misspecification() {
    return {ConditionKind::threshold_misspecification};
  }
  [[nodiscard]] static Condition out_of_distribution() { return {ConditionKind::out_of_distribution}; }

  /// "main", "tm" or "ood"; throws std::invalid_argument otherwise.
  [[nodiscard]] static Condition parse(std::string_view name);
  [[nodiscard]] std::string name() const;

  void validate() const;
};

struct SubjectSpec {
  std::string id;
  Condition condition;
  std::uint64_t seed = 0;
  UserParams true_phi;
  std::vector<double> threshold_offsets;
  ElectrodeArray true_array;  ///< positions from true_phi, true thresholds
  std::vector<double> assumed_thresholds_ua;

  /// assumed / true threshold per electrode.
  [[nodiscard]] std::vector<double> threshold_ratios() const;

  /// What the subject sees for a threshold-unit stimulus: calibrated with the
  /// assumed thresholds, rendered with the true parameters and thresholds.
  [[nodiscard]] Percept perceive(const Stimulus& threshold_units, const ForwardConfig& config) const;
};

/// Main: phi ~ U(box), assumed = true thresholds. TM: assumed = true * f_e,
/// f_e ~ U[min, max] per electrode. OOD: phi ~ U(box widened), resampled until
/// it is valid and outside `box`.
[[nodiscard]] SubjectSpec make_subject(const Condition& condition, const PhiBox& box, const ArraySpec& array,
                                       std::uint64_t seed, std::string id = {});

// ---------------------------------------------------------------------------
// Shared resources

struct ExperimentSettings {
  ArraySpec array{};
  ForwardConfig forward{};
  PhiBox box = PhiBox::defaults();
  OptimizerConfig optimizer{};  ///< box and seed are overridden per session
  double naive_amp_max = 2.0;   ///< threshold units
  int duel_pool_size = 500;     ///< leading test digits used as duel targets
  int heldout_count = 32;       ///< held-out digits per subject for the MSE trace
  int tutorial_duels = 4;
  int optimization_duels = 60;
  int evaluation_duels = 39;
  /// Temperature of the reference agent used for post hoc agreement.
  double agent_temperature = 0.01;
};

/// Immutable inputs every session reads: the trained DSE and the target sets.
class ExperimentContext {
 public:
  ExperimentContext(DseModel model, std::vector<TargetImage> duel_targets, std::vector<TargetImage> heldout_targets,
                    ExperimentSettings settings);

  /// Splits the test digits: the first duel_pool_size become duel targets and
  /// the rest the held-out set. Images are resized to the DSE input size.
  [[nodiscard]] static std::shared_ptr<const ExperimentContext> load(const std::filesystem::path& model_path,
                                                                     const std::filesystem::path& mnist_dir,
                                                                     ExperimentSettings settings = {});
  [[nodiscard]] static std::shared_ptr<const ExperimentContext> from_model(DseModel model,
                                                                           const std::filesystem::path& mnist_dir,
                                                                           ExperimentSettings settings = {});

  [[nodiscard]] const DseModel& model() const { return model_; }
  [[nodiscard]] const std::vector<TargetImage>& duel_targets() const { return duel_targets_; }
  [[nodiscard]] const std::vector<TargetImage>& heldout_targets() const { return heldout_targets_; }
  [[nodiscard]] const ExperimentSettings& settings() const { return settings_; }
  [[nodiscard]] double target_half_extent() const { return half_extent_; }
  /// FNV-1a digest of the serialized model, recorded in session logs.
  [[nodiscard]] const std::string& model_digest() const { return digest_; }

  /// The target as it should appear on the percept grid.
  [[nodiscard]] Percept target_percept(const TargetImage& target) const;
  [[nodiscard]] Stimulus encode_dse(const TargetImage& target, const UserParams& phi) const;
  [[nodiscard]] Stimulus encode_naive(const TargetImage& target) const;

  /// Mean MSE over `heldout` of the DSE encoder at `phi` as seen by `subject`.
  [[nodiscard]] double heldout_mse(const SubjectSpec& subject, const UserParams& phi,
                                   std::span<const std::size_t> heldout) const;

 private:
  DseModel model_;
  std::vector<TargetImage> duel_targets_;
  std::vector<TargetImage> heldout_targets_;
  ExperimentSettings settings_;
  double half_extent_ = 0.0;
  std::string digest_;
};

/// Trains the DSE on the MNIST training split. The last `validation_digits`
/// training images are held back for validation; test digits are never seen.
[[nodiscard]] DseTrainResult train_dse_on_mnist(const std::filesystem::path& mnist_dir, const DseTrainConfig& config,
                                                const PhiBox& box = PhiBox::defaults(), int validation_digits = 500,
                                                const TrainingProgress& progress = {});

// ---------------------------------------------------------------------------
// Session state machine

enum class Phase { tutorial, optimization, evaluation, complete };
[[nodiscard]] std::string_view phase_name(Phase p);

enum class Side { left, right };
[[nodiscard]] std::string_view side_name(Side s);
/// "left" or "right"; throws std::invalid_argument otherwise.
[[nodiscard]] Side parse_side(std::string_view s);

enum class ArmKind { champion, challenger, optimized, naive, dse_default };
[[nodiscard]] std::string_view arm_name(ArmKind k);

struct Arm {
  ArmKind kind = ArmKind::champion;
  UserParams phi;  ///< encoder parameters; the box midpoint for naive
  Percept percept;
  double mse = 0.0;  ///< against the target on the percept grid
};

/// One proposed duel. `first` is the HILO side (champion or optimized
/// encoder), `second` its opponent; first_on_left records the screen layout.
struct Duel {
  Phase phase = Phase::tutorial;
  int trial = 0;  ///< tutorial -3..0, optimization 1..60, evaluation 61..99
  std::size_t target_index = 0;  ///< into the duel targets
  std::string label;
  Percept target_percept;  ///< for simulated choosers; never sent to a participant
  Arm first;
  Arm second;
  bool first_on_left = true;

  [[nodiscard]] const Arm& left() const { return first_on_left ? first : second; }
  [[nodiscard]] const Arm& right() const { return first_on_left ? second : first; }
  [[nodiscard]] bool chose_first(Side side) const { return (side == Side::left) == first_on_left; }
};

struct BaselineTally {
  int baseline_chosen = 0;
  int n = 0;
};

struct DuelRecord {
  Phase phase = Phase::tutorial;
  int trial = 0;
  std::size_t target_index = 0;
  ArmKind first_kind = ArmKind::champion;
  ArmKind second_kind = ArmKind::challenger;
  bool first_on_left = true;
  Side side = Side::left;
  bool chose_first = true;
  double mse_first = 0.0;
  double mse_second = 0.0;
};

struct SessionResult {
  std::string subject_id;
  std::string condition;
  std::uint64_t seed = 0;
  std::vector<DuelRecord> duels;
  std::vector<double> mse_trace;  ///< held-out champion MSE after each optimization duel
  UserParams optimized_phi;
  ParamVector true_phi{};
  BaselineTally vs_naive;
  BaselineTally vs_default;
  double log_odds_naive = 0.0;
  double log_odds_default = 0.0;
  double log_odds_overall = 0.0;  ///< both baselines together, all evaluation duels
  double agreement = 0.0;  ///< against the reference agent, optimization and evaluation duels

  [[nodiscard]] nlohmann::json to_json() const;
};

class StalePhaseError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Receives every session event as one JSON object, before the state change
/// it describes takes effect.
using EventSink = std::function<void(const nlohmann::json&)>;

class Session {
 public:
  Session(std::shared_ptr<const ExperimentContext> context, SubjectSpec subject, EventSink sink = {});
  /// Creates the subject from (condition, seed).
  Session(std::shared_ptr<const ExperimentContext> context, const Condition& condition, std::uint64_t seed,
          std::string id = {}, EventSink sink = {});

  [[nodiscard]] Phase phase() const { return phase_; }
  [[nodiscard]] const SubjectSpec& subject() const { return subject_; }
  [[nodiscard]] const ExperimentContext& context() const { return *context_; }
  [[nodiscard]] const HiloOptimizer& optimizer() const { return optimizer_; }
  [[nodiscard]] const std::vector<DuelRecord>& records() const { return records_; }
  [[nodiscard]] const std::vector<double>& mse_trace() const { return mse_trace_; }
  [[nodiscard]] const std::vector<std::size_t>& heldout_indices() const { return heldout_; }
  [[nodiscard]] const BaselineTally& vs_naive() const { return vs_naive_; }
  [[nodiscard]] const BaselineTally& vs_default() const { return vs_default_; }
  [[nodiscard]] std::optional<UserParams> optimized_phi() const { return optimized_; }
  /// Trial index of the next duel (pending or not yet proposed).
  [[nodiscard]] int next_trial() const { return next_trial_; }

  void set_event_sink(EventSink sink);

  /// The pending duel, proposing it on first call. Throws StalePhaseError once
  /// the session is complete.
  [[nodiscard]] const Duel& current_duel();
  /// Records the choice for `trial`. Throws StaleTrialError when `trial` is not
  /// the pending trial and StalePhaseError once complete.
  void choose(int trial, Side side);

  /// Throws StalePhaseError unless complete.
  [[nodiscard]] SessionResult result() const;

  /// The brightness scale shown during the tutorial: single phosphenes that
  /// display as 0, 2, 5 and 10.
  [[nodiscard]] static std::vector<Percept> brightness_anchors(const ForwardConfig& config);
  static constexpr std::array<double, 4> kAnchorLevels{0.0, 2.0, 5.0, 10.0};

 private:
  [[nodiscard]] Arm make_arm(ArmKind kind, const UserParams& phi, const TargetImage& target,
                             const Percept& target_percept) const;
  void propose();
  void emit(const nlohmann::json& event) const;
  void advance(Phase to);
  [[nodiscard]] double champion_mse(const UserParams& phi);

  std::shared_ptr<const ExperimentContext> context_;
  SubjectSpec subject_;
  EventSink sink_;
  HiloOptimizer optimizer_;
  Phase phase_ = Phase::tutorial;
  int next_trial_ = 0;
  std::optional<Duel> pending_;
  std::vector<DuelRecord> records_;
  std::vector<double> mse_trace_;
  std::vector<std::size_t> heldout_;
  std::map<ParamVector, double> mse_cache_;
  std::optional<UserParams> optimized_;
  BaselineTally vs_naive_;
  BaselineTally vs_default_;
};

/// Decides a duel: returns the side picked.
using Chooser = std::function<Side(const Duel&)>;

/// Chooser backed by the simulated agent; the agent sees the target on the
/// percept grid.
[[nodiscard]] Chooser agent_chooser(const ExperimentContext& context, const AgentConfig& agent);

/// Runs the session until it leaves `phase` (no-op if it is past it).
void run_phase(Session& session, Phase phase, const Chooser& chooser);
void run_tutorial_phase(Session& session, const Chooser& chooser);
void run_optimization_phase(Session& session, const Chooser& chooser);
void run_evaluation_phase(Session& session, const Chooser& chooser);
/// All remaining phases.
[[nodiscard]] SessionResult run_session(Session& session, const Chooser& chooser);

// ---------------------------------------------------------------------------
// Logs

/// Appends one JSON line per event and flushes.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void operator()(const nlohmann::json& event);

 private:
  std::shared_ptr<std::ofstream> out_;
};

[[nodiscard]] std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

class ReplayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rebuilds a session from its event log by re-proposing and re-applying
/// every recorded choice. Logged proposals are cross-checked against the
/// regenerated ones (ReplayError on mismatch). `sink` receives events produced
/// after the replayed prefix.
[[nodiscard]] std::unique_ptr<Session> replay_session(std::shared_ptr<const ExperimentContext> context,
                                                      std::span<const nlohmann::json> events, EventSink sink = {});

// ---------------------------------------------------------------------------
// Analyses

/// ln(p / (1 - p)) with p = (k + 0.5) / (n + 1), k = baseline-chosen count.
/// Negative favors HILO. Throws std::invalid_argument for n = 0 or k outside [0, n].
[[nodiscard]] double corrected_log_odds(int k, int n);

struct LogOdds {
  std::vector<double> per_subject;
  double mean = 0.0;
  /// Pooled fixed-effects estimate: common intercept of a logistic model over
  /// all subjects' duels, with the same half-count correction.
  double pooled = 0.0;
  double pooled_se = 0.0;
  double wald_z = 0.0;
  double p_value = 1.0;  ///< two-sided
  int favoring_hilo = 0;  ///< subjects with log odds < 0
};

[[nodiscard]] LogOdds log_odds(std::span<const BaselineTally> subjects);

struct CurveSummary {
  std::vector<double> median;
  std::vector<double> q25;
  std::vector<double> q75;
};

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
[[nodiscard]] double percentile(std::vector<double> values, double q);

/// Per-index median and quartiles. Throws on empty input or unequal lengths.
[[nodiscard]] CurveSummary summarize_mse_curves(std::span<const std::vector<double>> traces);

/// Mean of consecutive windows of `width` values (the tail window may be shorter).
[[nodiscard]] std::vector<double> window_means(std::span<const double> values, std::size_t width);

void write_mse_curves_csv(const std::filesystem::path& path, const CurveSummary& summary);
void write_log_odds_csv(const std::filesystem::path& path, std::span<const SessionResult> results);

// ---------------------------------------------------------------------------
// Batch simulation

/// Lapse-free reference agent whose temperature makes it choose the
/// lower-error percept in `accuracy` of the duels seen by a calibration
/// rollout (deterministic agent, `subjects` main-condition sessions).
[[nodiscard]] double calibrate_agent_temperature(std::shared_ptr<const ExperimentContext> context,
                                                 std::uint64_t seed, int subjects = 4, double accuracy = 0.85);

struct SimulationConfig {
  Condition condition;
  int subjects = 10;
  std::uint64_t seed = 0;
  AgentConfig agent{};  ///< seed is re-derived per subject
};

struct SimulationResult {
  std::vector<SessionResult> sessions;
  LogOdds vs_naive;
  LogOdds vs_default;
  CurveSummary mse;

  /// Population statistics only; per-duel detail lives in the session logs.
  [[nodiscard]] nlohmann::json to_json() const;
};

using SessionProgress = std::function<void(const SessionResult&)>;

/// Runs `subjects` independent sessions. Subject i uses seed
/// derive_seed(seed, i); logs go to `<log_dir>/<id>.jsonl` when non-empty.
[[nodiscard]] SimulationResult simulate(std::shared_ptr<const ExperimentContext> context,
                                        const SimulationConfig& config, const std::filesystem::path& log_dir = {},
                                        const SessionProgress& progress = {});

[[nodiscard]] SimulationResult summarize(std::vector<SessionResult> sessions);

}  // namespace hilo
