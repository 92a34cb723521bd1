#pragma once

// HTTP front end for live sessions. Every session writes an append-only JSONL
// event log under the data directory; a session missing from memory (after a
// restart) is rebuilt from its log on first access.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>

#include <json.hpp>

#include "hilo/experiment.hpp"

namespace httplib {
class Server;
}

namespace hilo {

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

class DuelService {
 public:
  /// Agreement in results uses the context's reference agent temperature.
  DuelService(std::shared_ptr<const ExperimentContext> context, std::filesystem::path data_dir);

  // Transport-independent handlers. Bodies are JSON; errors carry {"error": ...}.
  [[nodiscard]] ServiceResponse create_session(const nlohmann::json& request);
  [[nodiscard]] ServiceResponse get_duel(const std::string& id);
  [[nodiscard]] ServiceResponse post_choice(const std::string& id, const nlohmann::json& request);
  [[nodiscard]] ServiceResponse get_status(const std::string& id);
  [[nodiscard]] ServiceResponse get_results(const std::string& id);

  /// Installs the routes: POST /sessions, GET /sessions/{id}/duel,
  /// POST /sessions/{id}/choice, GET /sessions/{id}/status,
  /// GET /sessions/{id}/results.
  void mount(httplib::Server& server);

  [[nodiscard]] std::filesystem::path log_path(const std::string& id) const;
  /// Session id for an explicit seed; the same (condition, seed) always maps
  /// to the same session.
  [[nodiscard]] static std::string session_id(const Condition& condition, std::uint64_t seed);

 private:
  struct Entry {
    std::mutex mutex;
    std::unique_ptr<Session> session;
  };

  [[nodiscard]] std::shared_ptr<Entry> find(const std::string& id);
  [[nodiscard]] nlohmann::json duel_payload(const std::string& id, Session& session) const;
  [[nodiscard]] nlohmann::json status_payload(const std::string& id, const Session& session) const;

  std::shared_ptr<const ExperimentContext> context_;
  std::filesystem::path data_dir_;
  std::shared_mutex sessions_mutex_;
  std::unordered_map<std::string, std::shared_ptr<Entry>> sessions_;
};

struct ServeOptions {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::filesystem::path data_dir = "hilo-data";
};

/// Applies HILO_PORT and HILO_DATA_DIR when set. Throws std::invalid_argument
/// on a malformed port.
void apply_environment(ServeOptions& options);

}  // namespace hilo
