#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/evaluation.hpp"
#include "triage/fetch.hpp"
#include "triage/hitl.hpp"
#include "triage/pipeline.hpp"

namespace httplib {
class Server;
}

namespace triage {

enum class Role { Assessor, Lead };

struct ApiSession {
  std::string assessor_id;
  std::string token;
  Role role = Role::Assessor;
};

/// Token file: JSON array of {"assessor_id", "token", "role": "assessor"|"lead"}.
std::vector<ApiSession> load_sessions(const std::filesystem::path& path);

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::vector<ApiSession> sessions;
  std::vector<ImageState> states;
  std::optional<nlohmann::json> accounting;  // replay report, if available
  std::shared_ptr<const Manifest> manifest;  // resolves image bytes
  std::optional<std::filesystem::path> judgments_log;  // appended on accept
  std::chrono::milliseconds bucket_width = std::chrono::hours(24);
};

/// HTTP API over a campaign. Routes:
///   GET  /healthz
///   GET  /tasks/next                 (token)  200 task | 204 drained
///   POST /judgments                  (token)
///   GET  /images/{id}
///   GET  /stats/accounting, /stats/timeseries
///   GET  /evaluation/report?task=binary|ternary
///   GET  /qa/sample?k=&seed=         (lead)
///   POST /qa/override                (lead)
///   GET  /errors?slice=&tag=
///   POST /errors/{id}/tags           (token)
/// Tokens travel in the X-Assessor-Token header or as "Authorization: Bearer".
/// Errors are {code, message}.
class Service {
 public:
  Service(ServiceConfig cfg, Campaign& campaign);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and starts serving on a background thread; returns the bound
  /// port. Throws InputError if the port cannot be bound.
  int start();
  /// Blocks serving on the calling thread until stop().
  void run();
  void stop();

 private:
  void install_routes();
  int bind();

  ServiceConfig cfg_;
  Campaign& campaign_;
  ErrorCaseStore errors_;
  std::unique_ptr<httplib::Server> server_;
  std::unique_ptr<ReplayFetcher> images_;
  std::mutex log_mu_;
  std::thread thread_;
  int bound_port_ = -1;
};

}  // namespace triage
