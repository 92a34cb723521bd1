#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "hilo/experiment.hpp"
#include "hilo/image_io.hpp"
#include "hilo/preference.hpp"

using namespace hilo;
using nlohmann::json;

namespace {

// Untrained small network: session mechanics do not depend on encoder quality.
std::shared_ptr<const ExperimentContext> tiny_context(ExperimentSettings settings = {}) {
  DseArchitecture arch;
  arch.width = 16;
  arch.blocks = 1;
  static const DseModel model(arch, PhiBox::defaults(), 42);
  settings.optimizer.pool_size = 128;
  settings.optimizer.mc_samples = 64;
  return ExperimentContext::from_model(model, HILO_MNIST_DIR, settings);
}

const std::shared_ptr<const ExperimentContext>& shared_context() {
  static const auto ctx = tiny_context();
  return ctx;
}

Chooser test_agent(const ExperimentContext& ctx, std::uint64_t seed, double lapse = 0.0) {
  return agent_chooser(ctx, AgentConfig{0.005, lapse, seed});
}

struct Recorder {
  std::shared_ptr<std::vector<json>> events = std::make_shared<std::vector<json>>();
  EventSink sink() {
    auto e = events;
    return [e](const json& j) { e->push_back(j); };
  }
};

}  // namespace

TEST_CASE("conditions") {
  CHECK(Condition::parse("main").kind == ConditionKind::main);
  CHECK(Condition::parse("tm").kind == ConditionKind::threshold_misspecification);
  CHECK(Condition::parse("ood").kind == ConditionKind::out_of_distribution);
  CHECK(Condition::parse("tm").name() == "tm");
  CHECK_THROWS_AS((void)Condition::parse("TM"), std::invalid_argument);
  CHECK_THROWS_AS((void)Condition::parse("bogus"), std::invalid_argument);
}

TEST_CASE("subjects per condition") {
  const PhiBox box = PhiBox::defaults();
  const ArraySpec array;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto main = make_subject(Condition::main(), box, array, seed);
    CHECK(box.contains(main.true_phi));
    for (double r : main.threshold_ratios()) CHECK(r == 1.0);

    const auto tm = make_subject(Condition::threshold_misspecification(), box, array, seed);
    CHECK(box.contains(tm.true_phi));
    const auto ratios = tm.threshold_ratios();
    for (double r : ratios) {
      CHECK(r >= 1.0 - 1e-12);
      CHECK(r <= 4.0 + 1e-12);
    }
    CHECK(*std::max_element(ratios.begin(), ratios.end()) > 1.5);
    // Misspecification leaves the ground truth alone.
    CHECK(tm.true_phi == main.true_phi);
    CHECK(tm.true_array.thresholds_ua == main.true_array.thresholds_ua);

    const auto ood = make_subject(Condition::out_of_distribution(), box, array, seed);
    CHECK_FALSE(box.contains(ood.true_phi));
    CHECK(ood.true_phi.is_valid());
    CHECK(box.expanded(0.25).contains(ood.true_phi));
    for (double r : ood.threshold_ratios()) CHECK(r == 1.0);
  }
  const auto a = make_subject(Condition::main(), box, array, 5);
  const auto b = make_subject(Condition::main(), box, array, 5);
  CHECK(a.true_phi == b.true_phi);
  CHECK(a.true_array.thresholds_ua == b.true_array.thresholds_ua);
  CHECK_FALSE(make_subject(Condition::main(), box, array, 6).true_phi == a.true_phi);
}

TEST_CASE("corrected log odds") {
  CHECK(corrected_log_odds(0, 39) == doctest::Approx(-4.3694478524670215).epsilon(1e-14));
  CHECK(corrected_log_odds(39, 39) == doctest::Approx(4.3694478524670215).epsilon(1e-14));
  CHECK(corrected_log_odds(10, 20) == 0.0);
  CHECK(corrected_log_odds(3, 7) < 0.0);
  CHECK_THROWS_AS((void)corrected_log_odds(0, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)corrected_log_odds(5, 4), std::invalid_argument);
  CHECK_THROWS_AS((void)corrected_log_odds(-1, 4), std::invalid_argument);
}

TEST_CASE("pooled log odds match a Newton fit of the intercept-only logistic model") {
  const std::vector<BaselineTally> subjects{{2, 20}, {0, 20}, {5, 20}, {1, 19}, {9, 20}};
  const LogOdds lo = log_odds(subjects);

  // Oracle: maximize a log s(b) + c log(1 - s(b)) over b by Newton's method,
  // with a and c the pooled counts plus one half.
  double a = 0.5;
  double c = 0.5;
  for (const auto& s : subjects) {
    a += s.baseline_chosen;
    c += s.n - s.baseline_chosen;
  }
  double beta = 0.0;
  double info = 0.0;
  for (int it = 0; it < 100; ++it) {
    const double p = 1.0 / (1.0 + std::exp(-beta));
    info = (a + c) * p * (1 - p);
    beta += (a - (a + c) * p) / info;
  }
  CHECK(lo.pooled == doctest::Approx(beta).epsilon(1e-12));
  CHECK(lo.pooled_se == doctest::Approx(1.0 / std::sqrt(info)).epsilon(1e-10));
  CHECK(lo.wald_z == doctest::Approx(lo.pooled / lo.pooled_se));
  CHECK(lo.p_value == doctest::Approx(2.0 * probit(-std::abs(lo.wald_z))).epsilon(1e-12));
  CHECK(lo.favoring_hilo == 5);
  CHECK(lo.per_subject.size() == 5);
  CHECK(lo.per_subject[1] == corrected_log_odds(0, 20));
  CHECK(lo.mean == doctest::Approx((corrected_log_odds(2, 20) + corrected_log_odds(0, 20) + corrected_log_odds(5, 20) +
                                    corrected_log_odds(1, 19) + corrected_log_odds(9, 20)) /
                                   5.0));

  const std::vector<BaselineTally> even{{10, 20}, {10, 20}};
  CHECK(log_odds(even).pooled == 0.0);
  CHECK(log_odds(even).p_value == doctest::Approx(1.0));
  CHECK(log_odds(even).favoring_hilo == 0);
  CHECK_THROWS_AS((void)log_odds(std::vector<BaselineTally>{}), std::invalid_argument);
}

TEST_CASE("MSE curve summaries") {
  SUBCASE("single trace") {
    const std::vector<std::vector<double>> t{{0.3, 0.2, 0.1}};
    const auto s = summarize_mse_curves(t);
    CHECK(s.median == t[0]);
    CHECK(s.q25 == t[0]);
    CHECK(s.q75 == t[0]);
  }
  SUBCASE("odd count") {
    const std::vector<std::vector<double>> t{{1, 2}, {3, 4}, {5, 6}};
    const auto s = summarize_mse_curves(t);
    CHECK(s.median == std::vector<double>{3, 4});
    CHECK(s.q25 == std::vector<double>{2, 3});
    CHECK(s.q75 == std::vector<double>{4, 5});
  }
  SUBCASE("random data against a sort-based oracle") {
    Rng rng{8};
    for (int n : {1, 2, 4, 7, 10, 33}) {
      std::vector<double> v(static_cast<std::size_t>(n));
      for (auto& x : v) x = uniform01(rng);
      std::multiset<double> sorted(v.begin(), v.end());
      for (double q : {0.0, 25.0, 50.0, 75.0, 100.0, 12.5}) {
        // Position (n - 1) q / 100 between order statistics.
        const double pos = (n - 1) * q / 100.0;
        auto it = sorted.begin();
        std::advance(it, static_cast<long>(pos));
        const double lo = *it;
        const double hi = std::next(it) == sorted.end() ? lo : *std::next(it);
        const double expected = lo + (pos - std::floor(pos)) * (hi - lo);
        CHECK(percentile(v, q) == doctest::Approx(expected).epsilon(1e-14));
      }
    }
  }
  SUBCASE("errors") {
    const std::vector<std::vector<double>> bad{{1, 2}, {3}};
    CHECK_THROWS_AS((void)summarize_mse_curves(bad), std::invalid_argument);
    CHECK_THROWS_AS((void)summarize_mse_curves(std::vector<std::vector<double>>{}), std::invalid_argument);
    CHECK_THROWS_AS((void)percentile({}, 50), std::invalid_argument);
  }
  const std::vector<double> w{1, 2, 3, 4, 5};
  CHECK(window_means(w, 2) == std::vector<double>{1.5, 3.5, 5});
}

TEST_CASE("brightness anchors display 0, 2, 5 and 10") {
  const auto anchors = Session::brightness_anchors(ForwardConfig{});
  REQUIRE(anchors.size() == 4);
  CHECK(displayed_brightness(anchors[0]) == 0.0);
  CHECK(displayed_brightness(anchors[1]) == 2.0);
  CHECK(displayed_brightness(anchors[2]) == 5.0);
  CHECK(displayed_brightness(anchors[3]) == 10.0);
}

TEST_CASE("a simulated session has 4 tutorial, 60 optimization and 39 evaluation duels") {
  const auto& ctx = shared_context();
  Session s(ctx, Condition::main(), 17);
  CHECK(s.phase() == Phase::tutorial);
  CHECK(s.next_trial() == -3);
  const Chooser agent = test_agent(*ctx, 3);

  run_tutorial_phase(s, agent);
  CHECK(s.phase() == Phase::optimization);
  CHECK(s.optimizer().trial_count() == 0);

  run_optimization_phase(s, agent);
  CHECK(s.phase() == Phase::evaluation);
  CHECK(s.optimizer().trial_count() == 60);
  CHECK(s.mse_trace().size() == 60);
  REQUIRE(s.optimized_phi().has_value());
  CHECK(*s.optimized_phi() == s.optimizer().best_phi());
  CHECK_THROWS_AS((void)s.result(), StalePhaseError);

  run_evaluation_phase(s, agent);
  CHECK(s.phase() == Phase::complete);
  const SessionResult r = s.result();
  REQUIRE(r.duels.size() == 103);
  for (std::size_t i = 0; i < r.duels.size(); ++i) {
    const auto& d = r.duels[i];
    CHECK(d.trial == static_cast<int>(i) - 3);
    const Phase expected = d.trial <= 0 ? Phase::tutorial : d.trial <= 60 ? Phase::optimization : Phase::evaluation;
    CHECK(d.phase == expected);
    // The logged layout decodes the clicked side back to the chosen encoder.
    CHECK(d.chose_first == ((d.side == Side::left) == d.first_on_left));
    if (d.phase == Phase::evaluation) {
      CHECK(d.first_kind == ArmKind::optimized);
      CHECK(d.second_kind == ((d.trial - 61) % 2 == 0 ? ArmKind::naive : ArmKind::dse_default));
    }
  }
  CHECK(r.vs_naive.n == 20);
  CHECK(r.vs_default.n == 19);
  CHECK(r.log_odds_naive == corrected_log_odds(r.vs_naive.baseline_chosen, 20));
  CHECK(r.agreement >= 0.0);
  CHECK(r.agreement <= 1.0);
  for (double m : r.mse_trace) CHECK(std::isfinite(m));

  CHECK_THROWS_AS((void)s.current_duel(), StalePhaseError);
  CHECK_THROWS_AS(s.choose(100, Side::left), StalePhaseError);
}

TEST_CASE("pending duel is stable and stale choices are rejected") {
  const auto& ctx = shared_context();
  Session s(ctx, Condition::main(), 23);
  const Duel first = s.current_duel();
  const Duel again = s.current_duel();
  CHECK(first.trial == again.trial);
  CHECK(first.target_index == again.target_index);
  CHECK(first.first_on_left == again.first_on_left);
  CHECK(first.left().percept == again.left().percept);
  CHECK(first.label == ctx->duel_targets()[first.target_index].label());

  CHECK_THROWS_AS(s.choose(first.trial + 1, Side::left), StaleTrialError);
  s.choose(first.trial, Side::right);
  CHECK_THROWS_AS(s.choose(first.trial, Side::right), StaleTrialError);
  CHECK(s.records().size() == 1);
  CHECK(s.next_trial() == first.trial + 1);
}

TEST_CASE("tutorial choices never reach the optimizer") {
  const auto& ctx = shared_context();
  Session a(ctx, Condition::main(), 31);
  Session b(ctx, Condition::main(), 31);
  run_tutorial_phase(a, [](const Duel&) { return Side::left; });
  run_tutorial_phase(b, [](const Duel&) { return Side::right; });
  CHECK(a.optimizer().trial_count() == 0);
  const Duel& da = a.current_duel();
  const Duel& db = b.current_duel();
  CHECK(da.trial == 1);
  CHECK(da.first.phi == db.first.phi);
  CHECK(da.second.phi == db.second.phi);
}

TEST_CASE("side assignment is balanced") {
  const auto& ctx = shared_context();
  int left_first = 0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Session s(ctx, Condition::main(), 100 + seed);
    const auto r = run_session(s, test_agent(*ctx, seed));
    int session_left = 0;
    for (const auto& d : r.duels) session_left += d.first_on_left;
    const double nd = static_cast<double>(r.duels.size());
    CHECK(std::abs(session_left - nd / 2) <= 4 * std::sqrt(nd / 4));
    left_first += session_left;
    n += static_cast<int>(r.duels.size());
  }
  CHECK(std::abs(left_first - n / 2.0) <= 4 * std::sqrt(n / 4.0));
}

TEST_CASE("replaying a session log") {
  const auto& ctx = shared_context();
  Recorder rec;
  Session s(ctx, Condition::threshold_misspecification(), 41, "tm-subject", rec.sink());
  const auto result = run_session(s, test_agent(*ctx, 7, 0.2));
  const auto& events = *rec.events;
  REQUIRE(events.front()["event"] == "session_created");
  CHECK(events.front()["threshold_ratio_min"].get<double>() >= 1.0);
  CHECK(events.front()["threshold_ratio_max"].get<double>() <= 4.0);

  SUBCASE("full log reproduces the champion and summary") {
    auto replayed = replay_session(ctx, events);
    REQUIRE(replayed->phase() == Phase::complete);
    const auto again = replayed->result();
    CHECK(again.optimized_phi == result.optimized_phi);
    CHECK(again.to_json().dump() == result.to_json().dump());
  }

  SUBCASE("a log cut after any acknowledged choice resumes identically") {
    for (int cut : {1, 10, 64, 70, 102}) {
      // Everything written up to the acknowledgment of choice number `cut`.
      std::vector<json> prefix;
      int choices = 0;
      for (const auto& e : events) {
        if (choices == cut && e["event"] != "phase_advanced") break;
        prefix.push_back(e);
        if (e["event"] == "choice_recorded") ++choices;
      }
      Recorder tail;
      auto resumed = replay_session(ctx, prefix, tail.sink());
      const auto finished = run_session(*resumed, test_agent(*ctx, 7, 0.2));
      CHECK(finished.to_json().dump() == result.to_json().dump());
      // The resumed log continues exactly where the original left off.
      REQUIRE(prefix.size() + tail.events->size() == events.size());
      for (std::size_t i = 0; i < tail.events->size(); ++i) {
        CHECK((*tail.events)[i].dump() == events[prefix.size() + i].dump());
      }
    }
  }

  SUBCASE("tampered logs are rejected") {
    std::vector<json> bad(events.begin(), events.end());
    for (auto& e : bad) {
      if (e["event"] == "duel_proposed" && e["trial"] == 5) {
        e["target"] = e["target"].get<int>() + 1;
        break;
      }
    }
    CHECK_THROWS_AS((void)replay_session(ctx, bad), ReplayError);
    std::vector<json> no_header(events.begin() + 1, events.end());
    CHECK_THROWS_AS((void)replay_session(ctx, no_header), ReplayError);
    std::vector<json> other_seed(events.begin(), events.end());
    other_seed.front()["true_phi"][0] = 123.0;
    CHECK_THROWS_AS((void)replay_session(ctx, other_seed), ReplayError);
  }
}

TEST_CASE("session logs on disk") {
  const auto& ctx = shared_context();
  const auto dir = std::filesystem::temp_directory_path() / "hilo_test_experiment_logs";
  std::filesystem::remove_all(dir);
  const auto path = dir / "s.jsonl";
  {
    Session s(ctx, Condition::main(), 5, "s", JsonlWriter(path));
    run_tutorial_phase(s, test_agent(*ctx, 1));
  }
  auto events = read_jsonl(path);
  CHECK(events.front()["event"] == "session_created");
  // A torn trailing line is ignored.
  {
    std::ofstream f(path, std::ios::app);
    f << "{\"event\": \"choice_rec";
  }
  CHECK(read_jsonl(path).size() == events.size());
  auto resumed = replay_session(ctx, events);
  CHECK(resumed->phase() == Phase::optimization);
  std::filesystem::remove_all(dir);
}

TEST_CASE("an all-lapse agent still completes with a finite trace") {
  const auto& ctx = shared_context();
  Session s(ctx, Condition::out_of_distribution(), 77);
  const auto r = run_session(s, test_agent(*ctx, 9, 1.0));
  CHECK(r.mse_trace.size() == 60);
  for (double m : r.mse_trace) CHECK(std::isfinite(m));
}

TEST_CASE("identical encoders tie: HILO at the default parameters vs the default DSE") {
  ExperimentSettings settings;
  settings.optimization_duels = 0;
  settings.tutorial_duels = 0;
  const auto ctx = tiny_context(settings);
  int k = 0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Session s(ctx, Condition::main(), seed);
    CHECK(s.phase() == Phase::evaluation);
    REQUIRE(s.optimized_phi().has_value());
    CHECK(*s.optimized_phi() == dse_default_phi(PhiBox::defaults()));
    const auto r = run_session(s, test_agent(*ctx, seed));
    for (const auto& d : r.duels) {
      if (d.second_kind == ArmKind::dse_default) CHECK(d.mse_first == d.mse_second);
    }
    k += r.vs_default.baseline_chosen;
    n += r.vs_default.n;
  }
  CHECK(n == 12 * 19);
  CHECK(std::abs(k - n / 2.0) <= 4 * std::sqrt(n / 4.0));
}

TEST_CASE("a session where every evaluation duel goes to HILO") {
  const auto& ctx = shared_context();
  Session s(ctx, Condition::main(), 3);
  const auto r = run_session(s, [](const Duel& d) {
    return d.phase == Phase::evaluation ? (d.first_on_left ? Side::left : Side::right) : Side::left;
  });
  CHECK(r.vs_naive.baseline_chosen == 0);
  CHECK(r.vs_default.baseline_chosen == 0);
  CHECK(r.log_odds_overall == doctest::Approx(-4.3694478524670215).epsilon(1e-14));
  CHECK(r.log_odds_naive == doctest::Approx(std::log(0.5 / 20.5)));
  CHECK(r.log_odds_default == doctest::Approx(std::log(0.5 / 19.5)));
}

TEST_CASE("batch simulation is reproducible from its seed and writes logs") {
  const auto& ctx = shared_context();
  SimulationConfig cfg;
  cfg.condition = Condition::main();
  cfg.subjects = 2;
  cfg.seed = 99;
  cfg.agent = AgentConfig{0.005, 0.0, 0};
  const auto dir = std::filesystem::temp_directory_path() / "hilo_test_sim";
  std::filesystem::remove_all(dir);
  const auto a = simulate(ctx, cfg, dir);
  const auto b = simulate(ctx, cfg);
  REQUIRE(a.sessions.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) CHECK(a.sessions[i].to_json().dump() == b.sessions[i].to_json().dump());
  CHECK(a.vs_naive.pooled == b.vs_naive.pooled);
  CHECK(a.mse.median == b.mse.median);
  CHECK(a.mse.median.size() == 60);

  const auto log = dir / (a.sessions[0].subject_id + ".jsonl");
  REQUIRE(std::filesystem::exists(log));
  const auto events = read_jsonl(log);
  const auto replayed = replay_session(ctx, events)->result();
  CHECK(replayed.to_json().dump() == a.sessions[0].to_json().dump());

  write_mse_curves_csv(dir / "mse_curves.csv", a.mse);
  write_log_odds_csv(dir / "log_odds.csv", a.sessions);
  const std::string curves = read_file(dir / "mse_curves.csv");
  CHECK(curves.rfind("duel_index,median,q25,q75\n1,", 0) == 0);
  const std::string lo = read_file(dir / "log_odds.csv");
  CHECK(lo.rfind("subject,baseline,k,n,log_odds\n", 0) == 0);
  CHECK(std::count(lo.begin(), lo.end(), '\n') == 5);
  std::filesystem::remove_all(dir);
}
