// hilo: train the encoder, run simulated experiments, analyze logs, render
// percepts and serve live sessions.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "hilo/experiment.hpp"
#include "hilo/image_io.hpp"
#include "hilo/random.hpp"
#include "hilo/service.hpp"

#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hilo;

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  return json::parse(in);
}

// A 13-element array in canonical order, or an object keyed by parameter name
// (missing names keep their defaults).
UserParams read_phi(const fs::path& path) {
  const json j = read_json(path);
  ParamVector v = UserParams{}.to_vector();
  if (j.is_array()) {
    if (j.size() != kNumUserParams) throw std::invalid_argument(fmt::format("{}: expected 13 values", path.string()));
    for (std::size_t i = 0; i < kNumUserParams; ++i) v[i] = j[i].get<double>();
  } else if (j.is_object()) {
    const auto& names = UserParams::names();
    for (const auto& [key, value] : j.items()) {
      const auto it = std::find(names.begin(), names.end(), key);
      if (it == names.end()) throw std::invalid_argument(fmt::format("{}: unknown parameter '{}'", path.string(), key));
      v[static_cast<std::size_t>(it - names.begin())] = value.get<double>();
    }
  } else {
    throw std::invalid_argument(fmt::format("{}: expected a JSON array or object", path.string()));
  }
  UserParams phi = UserParams::from_vector(v);
  phi.validate();
  return phi;
}

std::shared_ptr<const ExperimentContext> with_temperature(const std::shared_ptr<const ExperimentContext>& ctx,
                                                          double temperature) {
  ExperimentSettings s = ctx->settings();
  s.agent_temperature = temperature;
  return std::make_shared<const ExperimentContext>(ctx->model(), ctx->duel_targets(), ctx->heldout_targets(), s);
}

void write_outputs(const fs::path& dir, const SimulationResult& result) {
  write_mse_curves_csv(dir / "mse_curves.csv", result.mse);
  write_log_odds_csv(dir / "log_odds.csv", result.sessions);
  write_json(dir / "summary.json", result.to_json());
}

void report(const SimulationResult& r) {
  fmt::print("subjects            {}\n", r.sessions.size());
  fmt::print("vs naive            pooled {:.3f} (se {:.3f}, p {:.3g}), {}/{} subjects favor HILO\n", r.vs_naive.pooled,
             r.vs_naive.pooled_se, r.vs_naive.p_value, r.vs_naive.favoring_hilo, r.vs_naive.per_subject.size());
  fmt::print("vs default DSE      pooled {:.3f} (se {:.3f}, p {:.3g}), {}/{} subjects favor HILO\n",
             r.vs_default.pooled, r.vs_default.pooled_se, r.vs_default.p_value, r.vs_default.favoring_hilo,
             r.vs_default.per_subject.size());
  if (!r.mse.median.empty()) {
    fmt::print("median MSE          duel 1 {:.5f}, duel {} {:.5f} (ratio {:.3f})\n", r.mse.median.front(),
               r.mse.median.size(), r.mse.median.back(), r.mse.median.back() / r.mse.median.front());
  }
}

int train_dse_cmd(const fs::path& data_dir, const fs::path& out, const fs::path& curve, int steps, int width,
                  int blocks, std::uint64_t seed) {
  DseTrainConfig cfg;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.arch.width = width;
  cfg.arch.blocks = blocks;
  const auto result = train_dse_on_mnist(data_dir, cfg, PhiBox::defaults(), 500, [](const TrainingCurvePoint& p) {
    spdlog::info("step {:>6}  train {:.5f}  val {:.5f}  lr {:.2g}", p.step, p.train_loss, p.val_loss,
                 p.learning_rate);
  });
  result.model.save(out);
  if (!curve.empty()) write_training_curve_csv(curve, result.curve);
  fmt::print("best validation loss {:.5f} at step {} (initial {:.5f}); model written to {}\n", result.best_val_loss,
             result.best_step, result.initial_val_loss, out.string());
  return 0;
}

struct SimulateArgs {
  std::string condition = "main";
  int subjects = 10;
  std::uint64_t seed = 0;
  fs::path model;
  fs::path data_dir;
  fs::path out = "results";
  std::optional<double> temperature;
  double lapse = 0.0;
};

int simulate_cmd(const SimulateArgs& a) {
  const Condition condition = Condition::parse(a.condition);
  auto ctx = ExperimentContext::load(a.model, a.data_dir);
  double temperature = 0.0;
  if (a.temperature) {
    temperature = *a.temperature;
  } else {
    spdlog::info("calibrating agent temperature");
    temperature = calibrate_agent_temperature(ctx, a.seed);
  }
  ctx = with_temperature(ctx, temperature);
  fs::create_directories(a.out / "logs");
  write_json(a.out / "config.json", {{"condition", condition.name()},
                                     {"subjects", a.subjects},
                                     {"seed", a.seed},
                                     {"model", fs::absolute(a.model).string()},
                                     {"model_digest", ctx->model_digest()},
                                     {"data_dir", fs::absolute(a.data_dir).string()},
                                     {"temperature", temperature},
                                     {"temperature_calibrated", !a.temperature.has_value()},
                                     {"lapse", a.lapse}});
  SimulationConfig cfg;
  cfg.condition = condition;
  cfg.subjects = a.subjects;
  cfg.seed = a.seed;
  cfg.agent = AgentConfig{temperature, a.lapse, 0};
  const auto result = simulate(ctx, cfg, a.out / "logs", [](const SessionResult& s) {
    spdlog::info("{}: naive {}/{} chosen, default {}/{} chosen, final MSE {:.5f}", s.subject_id,
                 s.vs_naive.baseline_chosen, s.vs_naive.n, s.vs_default.baseline_chosen, s.vs_default.n,
                 s.mse_trace.empty() ? 0.0 : s.mse_trace.back());
  });
  write_outputs(a.out, result);
  report(result);
  return 0;
}

int analyze_cmd(const fs::path& dir, const fs::path& model_override, const fs::path& data_override) {
  const json config = read_json(dir / "config.json");
  const fs::path model = model_override.empty() ? fs::path(config.at("model").get<std::string>()) : model_override;
  const fs::path data = data_override.empty() ? fs::path(config.at("data_dir").get<std::string>()) : data_override;
  const auto ctx = with_temperature(ExperimentContext::load(model, data), config.at("temperature").get<double>());

  std::vector<fs::path> logs;
  for (const auto& e : fs::directory_iterator(dir / "logs")) {
    if (e.path().extension() == ".jsonl") logs.push_back(e.path());
  }
  std::sort(logs.begin(), logs.end());
  std::vector<SessionResult> sessions;
  for (const auto& path : logs) {
    const auto events = read_jsonl(path);
    auto session = replay_session(ctx, events);
    if (session->phase() != Phase::complete) {
      spdlog::warn("{} is incomplete ({}); skipped", path.filename().string(), phase_name(session->phase()));
      continue;
    }
    sessions.push_back(session->result());
  }
  if (sessions.empty()) throw std::runtime_error("no complete session logs");
  const auto result = summarize(std::move(sessions));

  std::optional<json> previous;
  if (fs::exists(dir / "summary.json")) previous = read_json(dir / "summary.json");
  write_outputs(dir, result);
  report(result);
  if (previous) {
    fmt::print("replayed summary {} the recorded one\n", *previous == result.to_json() ? "matches" : "DIFFERS FROM");
    if (*previous != result.to_json()) return 2;
  }
  return 0;
}

int render_cmd(const fs::path& phi_path, int target_index, const fs::path& model, const fs::path& data_dir,
               const fs::path& out, double cap, std::uint64_t seed) {
  const UserParams phi = read_phi(phi_path);
  const auto ctx = ExperimentContext::load(model, data_dir);
  const auto& s = ctx->settings();
  // The context holds the test digits in order: duel targets, then held-out.
  const auto& duel = ctx->duel_targets();
  const auto& heldout = ctx->heldout_targets();
  const auto index = static_cast<std::size_t>(target_index);
  if (target_index < 0 || index >= duel.size() + heldout.size()) {
    throw std::invalid_argument(
        fmt::format("target index {} outside [0, {})", target_index, duel.size() + heldout.size()));
  }
  const TargetImage& target = index < duel.size() ? duel[index] : heldout[index - duel.size()];

  // Thresholds vary around theta_mean as for a simulated subject drawn from `seed`.
  SubjectSpec subject = make_subject(Condition::main(), s.box, s.array, seed);
  subject.true_phi = phi;
  subject.true_array = make_electrode_array(s.array, phi, subject.threshold_offsets);
  subject.assumed_thresholds_ua = subject.true_array.thresholds_ua;

  const Percept target_img = ctx->target_percept(target);
  const Percept dse = subject.perceive(ctx->encode_dse(target, phi), s.forward);
  const Percept naive = subject.perceive(ctx->encode_naive(target), s.forward);
  fs::create_directories(out);
  const std::string stem = fmt::format("target{:04d}", target_index);
  for (const auto& [name, img] : {std::pair<std::string, const Percept*>{"target", &target_img},
                                  {"dse", &dse},
                                  {"naive", &naive}}) {
    const fs::path base = out / fmt::format("{}_{}", stem, name);
    const double c = name == "target" ? 1.0 : cap;
    write_file(fs::path(base).replace_extension(".png"), encode_png(img->data(), c));
    write_file(fs::path(base).replace_extension(".pgm"), encode_pgm(img->data(), c));
    write_file(fs::path(base).replace_extension(".pcpt"), encode_pcpt(img->data()));
  }
  fmt::print("{} ({}): DSE MSE {:.5f}, naive MSE {:.5f}, brightness {:.1f} / {:.1f}\n", stem, target.label(),
             percept_mse(dse, target_img), percept_mse(naive, target_img), displayed_brightness(dse),
             displayed_brightness(naive));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-in-the-loop optimization of a deep stimulus encoder"};
  app.require_subcommand(1);
  fs::path data_dir = HILO_MNIST_DIR;

  auto* train = app.add_subcommand("train-dse", "Train the deep stimulus encoder on MNIST");
  fs::path train_out = "dse.bin";
  fs::path curve;
  int steps = DseTrainConfig{}.steps;
  int width = 256;
  int blocks = 4;
  std::uint64_t train_seed = 1;
  train->add_option("--data-dir", data_dir, "Directory with MNIST IDX files");
  train->add_option("--out", train_out, "Checkpoint path");
  train->add_option("--curve", curve, "Training curve CSV");
  train->add_option("--steps", steps, "Optimizer steps")->check(CLI::PositiveNumber);
  train->add_option("--width", width, "Residual block width")->check(CLI::PositiveNumber);
  train->add_option("--blocks", blocks, "Residual blocks")->check(CLI::NonNegativeNumber);
  train->add_option("--seed", train_seed);

  auto* sim = app.add_subcommand("simulate", "Run simulated subjects through the full experiment");
  SimulateArgs sa;
  double temperature = 0.0;
  sim->add_option("--condition", sa.condition)->check(CLI::IsMember({"main", "tm", "ood"}));
  sim->add_option("--subjects", sa.subjects)->check(CLI::PositiveNumber);
  sim->add_option("--seed", sa.seed);
  sim->add_option("--model", sa.model, "DSE checkpoint")->required()->check(CLI::ExistingFile);
  sim->add_option("--data-dir", data_dir);
  sim->add_option("--out", sa.out, "Results directory");
  auto* temp_opt = sim->add_option("--temperature", temperature, "Agent temperature (calibrated when omitted)")
                       ->check(CLI::PositiveNumber);
  sim->add_option("--lapse", sa.lapse, "Agent lapse rate")->check(CLI::Range(0.0, 1.0));

  auto* analyze = app.add_subcommand("analyze", "Replay session logs and recompute the statistics");
  fs::path results_dir;
  fs::path model_override;
  fs::path data_override;
  analyze->add_option("results-dir", results_dir)->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--model", model_override, "Override the checkpoint recorded in config.json");
  analyze->add_option("--data-dir", data_override, "Override the data directory recorded in config.json");

  auto* render = app.add_subcommand("render", "Render DSE and naive percepts for one digit");
  fs::path phi_path;
  fs::path render_model;
  fs::path render_out = ".";
  int target = 0;
  double cap = kDefaultDisplayCap;
  std::uint64_t render_seed = 0;
  render->add_option("--phi", phi_path, "JSON parameter file")->required()->check(CLI::ExistingFile);
  render->add_option("--target", target, "Test digit index")->required();
  render->add_option("--model", render_model)->required()->check(CLI::ExistingFile);
  render->add_option("--data-dir", data_dir);
  render->add_option("--out", render_out, "Output directory");
  render->add_option("--cap", cap, "Display brightness cap")->check(CLI::PositiveNumber);
  render->add_option("--seed", render_seed, "Threshold variation seed");

  auto* serve = app.add_subcommand("serve", "Serve live sessions over HTTP");
  ServeOptions so;
  fs::path serve_model;
  int port = 0;
  fs::path serve_data;
  double serve_temperature = ExperimentSettings{}.agent_temperature;
  auto* port_opt = serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  auto* dir_opt = serve->add_option("--data-dir", serve_data, "Session log directory");
  serve->add_option("--host", so.host);
  serve->add_option("--model", serve_model)->required()->check(CLI::ExistingFile);
  serve->add_option("--mnist-dir", data_dir);
  serve->add_option("--temperature", serve_temperature, "Reference agent temperature for agreement")
      ->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return train_dse_cmd(data_dir, train_out, curve, steps, width, blocks, train_seed);
    if (*sim) {
      if (*temp_opt) sa.temperature = temperature;
      sa.data_dir = data_dir;
      return simulate_cmd(sa);
    }
    if (*analyze) return analyze_cmd(results_dir, model_override, data_override);
    if (*render) return render_cmd(phi_path, target, render_model, data_dir, render_out, cap, render_seed);
    if (*serve) {
      apply_environment(so);
      if (*port_opt) so.port = port;
      if (*dir_opt) so.data_dir = serve_data;
      const auto ctx = with_temperature(ExperimentContext::load(serve_model, data_dir), serve_temperature);
      DuelService service(ctx, so.data_dir);
      httplib::Server server;
      service.mount(server);
      spdlog::info("serving on {}:{} (sessions in {})", so.host, so.port, so.data_dir.string());
      if (!server.listen(so.host, so.port)) {
        spdlog::error("cannot listen on {}:{}", so.host, so.port);
        return 1;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
