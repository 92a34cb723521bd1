#include "hilo/service.hpp"

#include <cstdlib>
#include <random>
#include <regex>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "hilo/image_io.hpp"
#include "hilo/random.hpp"

namespace hilo {

using nlohmann::json;

namespace {

ServiceResponse error(int status, std::string message) { return {status, json{{"error", std::move(message)}}}; }

bool valid_id(const std::string& id) {
  static const std::regex pattern{"[a-z]+-[0-9a-f]{16}"};
  return std::regex_match(id, pattern);
}

json image_json(const Percept& p) {
  const double shown = displayed_brightness(p);
  return {{"image", base64_encode(encode_png(p.data(), kDefaultDisplayCap))},
          {"brightness", shown},
          {"brightness_text", fmt::format("{:.1f}", shown)}};
}

std::pair<int, int> phase_progress(const ExperimentSettings& s, Phase phase, int trial) {
  switch (phase) {
    case Phase::tutorial: return {trial + s.tutorial_duels, s.tutorial_duels};
    case Phase::optimization: return {trial, s.optimization_duels};
    case Phase::evaluation: return {trial - s.optimization_duels, s.evaluation_duels};
    case Phase::complete: return {0, 0};
  }
  return {0, 0};
}

}  // namespace

DuelService::DuelService(std::shared_ptr<const ExperimentContext> context, std::filesystem::path data_dir)
    : context_(std::move(context)), data_dir_(std::move(data_dir)) {
  std::filesystem::create_directories(data_dir_ / "sessions");
}

std::string DuelService::session_id(const Condition& condition, std::uint64_t seed) {
  return fmt::format("{}-{:016x}", condition.name(), derive_seed(seed, 0x5e55101dULL));
}

std::filesystem::path DuelService::log_path(const std::string& id) const {
  return data_dir_ / "sessions" / (id + ".jsonl");
}

std::shared_ptr<DuelService::Entry> DuelService::find(const std::string& id) {
  if (!valid_id(id)) return nullptr;
  {
    std::shared_lock lock(sessions_mutex_);
    if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
  }
  const auto path = log_path(id);
  if (!std::filesystem::exists(path)) return nullptr;
  std::unique_lock lock(sessions_mutex_);
  if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
  const auto events = read_jsonl(path);
  auto entry = std::make_shared<Entry>();
  entry->session = replay_session(context_, events, JsonlWriter(path));
  spdlog::info("session {} restored from its log ({} events)", id, events.size());
  sessions_.emplace(id, entry);
  return entry;
}

ServiceResponse DuelService::create_session(const json& request) {
  if (!request.is_object()) return error(400, "request body must be a JSON object");
  Condition condition;
  try {
    condition = Condition::parse(request.value("condition", std::string{}));
  } catch (const std::invalid_argument& e) {
    return error(400, e.what());
  }
  std::uint64_t seed = 0;
  if (request.contains("seed") && !request["seed"].is_null()) {
    if (!request["seed"].is_number_unsigned() && !(request["seed"].is_number_integer() && request["seed"].get<std::int64_t>() >= 0)) {
      return error(400, "seed must be a non-negative integer");
    }
    seed = request["seed"].get<std::uint64_t>();
  } else {
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }
  const std::string id = session_id(condition, seed);
  if (auto existing = find(id)) {
    std::lock_guard lock(existing->mutex);
    return {200, {{"id", id}, {"created", false}, {"phase", phase_name(existing->session->phase())}}};
  }
  std::unique_lock lock(sessions_mutex_);
  if (auto it = sessions_.find(id); it != sessions_.end()) {
    return {200, {{"id", id}, {"created", false}, {"phase", phase_name(it->second->session->phase())}}};
  }
  auto entry = std::make_shared<Entry>();
  entry->session = std::make_unique<Session>(context_, condition, seed, id, JsonlWriter(log_path(id)));
  sessions_.emplace(id, entry);
  spdlog::info("session {} created ({} condition)", id, condition.name());
  return {201, {{"id", id}, {"created", true}, {"phase", phase_name(entry->session->phase())}}};
}

json DuelService::duel_payload(const std::string& id, Session& session) const {
  const Duel& d = session.current_duel();
  const auto& s = context_->settings();
  const auto [index, total] = phase_progress(s, d.phase, d.trial);
  json out{{"session", id},
           {"phase", phase_name(d.phase)},
           {"trial", d.trial},
           {"label", d.label},
           {"left", image_json(d.left().percept)},
           {"right", image_json(d.right().percept)},
           {"progress", {{"index", index}, {"total", total}}},
           {"totals",
            {{"tutorial", s.tutorial_duels}, {"optimization", s.optimization_duels}, {"evaluation", s.evaluation_duels}}}};
  if (d.phase == Phase::tutorial) {
    static const auto anchors = Session::brightness_anchors(s.forward);
    json scale = json::array();
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      json a = image_json(anchors[i]);
      a["level"] = Session::kAnchorLevels[i];
      scale.push_back(a);
    }
    out["anchors"] = scale;
  }
  return out;
}

json DuelService::status_payload(const std::string& id, const Session& session) const {
  const auto& s = context_->settings();
  int done_tutorial = 0;
  int done_optimization = 0;
  int done_evaluation = 0;
  for (const auto& r : session.records()) {
    if (r.phase == Phase::tutorial) ++done_tutorial;
    if (r.phase == Phase::optimization) ++done_optimization;
    if (r.phase == Phase::evaluation) ++done_evaluation;
  }
  return {{"id", id},
          {"condition", session.subject().condition.name()},
          {"phase", phase_name(session.phase())},
          {"next_trial", session.next_trial()},
          {"complete", session.phase() == Phase::complete},
          {"completed",
           {{"tutorial", done_tutorial}, {"optimization", done_optimization}, {"evaluation", done_evaluation}}},
          {"totals",
           {{"tutorial", s.tutorial_duels}, {"optimization", s.optimization_duels}, {"evaluation", s.evaluation_duels}}}};
}

ServiceResponse DuelService::get_duel(const std::string& id) {
  auto entry = find(id);
  if (!entry) return error(404, fmt::format("unknown session '{}'", id));
  std::lock_guard lock(entry->mutex);
  if (entry->session->phase() == Phase::complete) return error(409, "session is complete");
  return {200, duel_payload(id, *entry->session)};
}

ServiceResponse DuelService::post_choice(const std::string& id, const json& request) {
  auto entry = find(id);
  if (!entry) return error(404, fmt::format("unknown session '{}'", id));
  if (!request.is_object() || !request.contains("trial") || !request["trial"].is_number_integer() ||
      !request.contains("side") || !request["side"].is_string()) {
    return error(400, "body must be {\"trial\": <int>, \"side\": \"left\"|\"right\"}");
  }
  Side side;
  try {
    side = parse_side(request["side"].get<std::string>());
  } catch (const std::invalid_argument& e) {
    return error(400, e.what());
  }
  std::lock_guard lock(entry->mutex);
  Session& session = *entry->session;
  if (session.phase() == Phase::complete) return error(409, "session is complete");
  try {
    session.choose(request["trial"].get<int>(), side);
  } catch (const StaleTrialError& e) {
    ServiceResponse r = error(409, e.what());
    r.body["duel"] = duel_payload(id, session);
    return r;
  }
  return {200, {{"accepted", true}, {"status", status_payload(id, session)}}};
}

ServiceResponse DuelService::get_status(const std::string& id) {
  auto entry = find(id);
  if (!entry) return error(404, fmt::format("unknown session '{}'", id));
  std::lock_guard lock(entry->mutex);
  return {200, status_payload(id, *entry->session)};
}

ServiceResponse DuelService::get_results(const std::string& id) {
  auto entry = find(id);
  if (!entry) return error(404, fmt::format("unknown session '{}'", id));
  std::lock_guard lock(entry->mutex);
  if (entry->session->phase() != Phase::complete) {
    ServiceResponse r = error(409, "session is not complete");
    r.body["phase"] = phase_name(entry->session->phase());
    return r;
  }
  json body = entry->session->result().to_json();
  body["id"] = id;
  return {200, body};
}

void DuelService::mount(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  // Wraps a handler so that malformed input and internal failures still
  // answer with a JSON error body.
  auto guarded = [reply](auto handler) {
    return [reply, handler](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(res, handler(req));
      } catch (const json::exception& e) {
        reply(res, error(400, fmt::format("malformed JSON: {}", e.what())));
      } catch (const ReplayError& e) {
        spdlog::error("{}", e.what());
        reply(res, error(500, e.what()));
      } catch (const std::exception& e) {
        spdlog::error("{} {}: {}", req.method, req.path, e.what());
        reply(res, error(500, e.what()));
      }
    };
  };

  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Post("/sessions", guarded([this](const httplib::Request& req) {
                return create_session(req.body.empty() ? json::object() : json::parse(req.body));
              }));
  server.Get(R"(/sessions/([^/]+)/duel)",
             guarded([this](const httplib::Request& req) { return get_duel(req.matches[1]); }));
  server.Post(R"(/sessions/([^/]+)/choice)", guarded([this](const httplib::Request& req) {
                return post_choice(req.matches[1], json::parse(req.body));
              }));
  server.Get(R"(/sessions/([^/]+)/status)",
             guarded([this](const httplib::Request& req) { return get_status(req.matches[1]); }));
  server.Get(R"(/sessions/([^/]+)/results)",
             guarded([this](const httplib::Request& req) { return get_results(req.matches[1]); }));
}

void apply_environment(ServeOptions& options) {
  if (const char* port = std::getenv("HILO_PORT"); port != nullptr && *port != '\0') {
    char* end = nullptr;
    const long v = std::strtol(port, &end, 10);
    if (*end != '\0' || v < 0 || v > 65535) throw std::invalid_argument(fmt::format("HILO_PORT '{}' is not a port", port));
    options.port = static_cast<int>(v);
  }
  if (const char* dir = std::getenv("HILO_DATA_DIR"); dir != nullptr && *dir != '\0') options.data_dir = dir;
}

}  // namespace hilo
