#include "triage/service.hpp"

#include <httplib.h>

#include <fstream>
#include <nlohmann/json.hpp>

namespace triage {

using nlohmann::json;

std::vector<ApiSession> load_sessions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read token file: " + path.string());
  json j = json::parse(in, nullptr, false);
  if (!j.is_array()) throw ConfigError("token file must be a JSON array");
  std::vector<ApiSession> out;
  for (const auto& row : j) {
    if (!row.is_object()) throw ConfigError("token file entries must be objects");
    ApiSession s;
    s.assessor_id = row.value("assessor_id", "");
    s.token = row.value("token", "");
    const auto role = row.value("role", "assessor");
    if (s.assessor_id.empty() || s.token.empty()) throw ConfigError("token entries need assessor_id and token");
    if (role == "lead") s.role = Role::Lead;
    else if (role != "assessor") throw ConfigError("token role must be assessor or lead");
    for (const auto& prev : out) {
      if (prev.token == s.token) throw ConfigError("token file repeats a token");
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view message) {
  res.status = status;
  res.set_content(json{{"code", code}, {"message", message}}.dump(), "application/json");
}

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string sniff_content_type(std::string_view bytes) {
  if (bytes.starts_with("\xFF\xD8\xFF")) return "image/jpeg";
  if (bytes.starts_with("\x89PNG")) return "image/png";
  if (bytes.starts_with("GIF8")) return "image/gif";
  if (bytes.size() > 12 && bytes.starts_with("RIFF") && bytes.substr(8, 4) == "WEBP") return "image/webp";
  return "application/octet-stream";
}

json task_json(const LabelingTask& t) {
  return {{"task_id", t.task_id},
          {"image_url", "/images/" + t.image_id},
          {"machine_damage", to_string(t.machine_damage)}};
}

}  // namespace

Service::Service(ServiceConfig cfg, Campaign& campaign)
    : cfg_(std::move(cfg)), campaign_(campaign), server_(std::make_unique<httplib::Server>()) {
  for (const auto& s : cfg_.sessions) campaign_.register_assessor(s.assessor_id);
  if (cfg_.manifest) images_ = std::make_unique<ReplayFetcher>(cfg_.manifest);
  install_routes();
}

Service::~Service() { stop(); }

void Service::install_routes() {
  auto& srv = *server_;

  auto authenticate = [this](const httplib::Request& req) -> const ApiSession* {
    std::string token = req.get_header_value("X-Assessor-Token");
    if (token.empty()) {
      auto auth = req.get_header_value("Authorization");
      if (auth.rfind("Bearer ", 0) == 0) token = auth.substr(7);
    }
    if (token.empty()) return nullptr;
    for (const auto& s : cfg_.sessions) {
      if (s.token == token) return &s;
    }
    return nullptr;
  };

  srv.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, {{"status", "ok"},
                    {"build", {{"name", "triage"}, {"version", "0.1.0"}, {"compiler", __VERSION__}}}});
  });

  srv.Get("/tasks/next", [this, authenticate](const httplib::Request& req, httplib::Response& res) {
    const auto* who = authenticate(req);
    if (!who) return send_error(res, 401, "Unauthorized", "missing or unknown assessor token");
    auto task = campaign_.next_task(who->assessor_id);
    if (!task) {
      res.status = 204;
      return;
    }
    send_json(res, task_json(*task));
  });

  srv.Post("/judgments", [this, authenticate](const httplib::Request& req, httplib::Response& res) {
    const auto* who = authenticate(req);
    if (!who) return send_error(res, 401, "Unauthorized", "missing or unknown assessor token");
    json body = json::parse(req.body, nullptr, false);
    if (!body.is_object() || !body.contains("task_id") || !body["task_id"].is_string() ||
        !body.contains("verdict") || !body["verdict"].is_string())
      return send_error(res, 422, "InvalidBody", "task_id and verdict are required strings");

    HumanJudgment j;
    j.task_id = body["task_id"].get<std::string>();
    j.assessor_id = who->assessor_id;
    j.submitted_at = now_ms();
    auto verdict = parse_verdict(body["verdict"].get<std::string>());
    if (!verdict) return send_error(res, 422, "InvalidVerdict", "verdict must be damage|no_damage|dont_know");
    j.verdict = *verdict;
    if (auto it = body.find("severity"); it != body.end() && !it->is_null()) {
      auto sev = it->is_string() ? parse_severity(it->get<std::string>()) : std::nullopt;
      if (!sev) return send_error(res, 422, "InvalidSeverity", "severity must be mild|severe|null");
      j.severity = sev;
    }
    if (auto it = body.find("comment"); it != body.end() && it->is_string()) j.comment = it->get<std::string>();

    auto result = campaign_.submit_judgment(j);
    if (result.accepted) {
      auto stored = campaign_.judgment(j.task_id);
      if (cfg_.judgments_log && stored) {
        std::lock_guard lock(log_mu_);
        std::ofstream log(*cfg_.judgments_log, std::ios::app);
        log << to_json_line(*stored) << '\n';
      }
      return send_json(res, {{"accepted", true}, {"excluded_from_metrics", result.excluded_from_metrics}});
    }
    const auto reason = *result.reason;
    if (reason == RejectReason::AlreadyJudged) {
      // Retry of our own accepted submission: same idempotency key, same answer.
      auto stored = campaign_.judgment(j.task_id);
      if (stored && stored->assessor_id == j.assessor_id && stored->verdict == j.verdict &&
          stored->severity == j.severity) {
        return send_json(res, {{"accepted", true},
                               {"replayed", true},
                               {"excluded_from_metrics", stored->dontknow()}});
      }
    }
    switch (reason) {
      case RejectReason::MissingSeverity:
        return send_error(res, 422, to_string(reason), "damage verdict requires severity mild|severe");
      case RejectReason::UnexpectedSeverity:
        return send_error(res, 422, to_string(reason), "severity is only allowed with a damage verdict");
      case RejectReason::UnknownTask:
        return send_error(res, 404, to_string(reason), "no such task");
      case RejectReason::NotYours:
        return send_error(res, 409, to_string(reason), "task is not assigned to this assessor");
      case RejectReason::AlreadyJudged:
        return send_error(res, 409, to_string(reason), "task already has a judgment");
    }
  });

  srv.Get(R"(/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const ImageState* state = nullptr;
    for (const auto& s : cfg_.states) {
      if (s.image_id == id) {
        state = &s;
        break;
      }
    }
    if (!state || !images_) return send_error(res, 404, "NotFound", "unknown image " + id);
    auto attempt = images_->attempt(state->source_url, std::chrono::seconds(10));
    if (!attempt.bytes) return send_error(res, 404, "NotFound", "image bytes unavailable");
    res.set_content(*attempt.bytes, sniff_content_type(*attempt.bytes));
  });

  srv.Get("/stats/accounting", [this](const httplib::Request&, httplib::Response& res) {
    if (cfg_.accounting) return send_json(res, *cfg_.accounting);
    send_json(res, {{"accounting", to_json(account(cfg_.states, 0, 0, 0))}});
  });

  srv.Get("/stats/timeseries", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& b : bucketize(cfg_.states, cfg_.bucket_width)) {
      out.push_back({{"bucket_start", format_iso8601(b.bucket_start)},
                     {"total", b.counts.downloaded},
                     {"relevant", b.counts.relevant},
                     {"irrelevant", b.counts.not_relevant},
                     {"severe", b.counts.severe},
                     {"mild", b.counts.mild}});
    }
    send_json(res, out);
  });

  srv.Get("/evaluation/report", [this](const httplib::Request& req, httplib::Response& res) {
    const auto task = req.has_param("task") ? req.get_param_value("task") : std::string("binary");
    if (task != "binary" && task != "ternary")
      return send_error(res, 422, "InvalidTask", "task must be binary or ternary");
    const auto judgments = campaign_.export_judgments();
    const auto cm = task == "binary" ? build_binary_matrix(judgments) : build_ternary_matrix(judgments);
    if (cm.n == 0) return send_error(res, 422, "UndefinedInput", "no usable judgments yet");
    send_json(res, report_json(task, cm, weighted_metrics(cm)));
  });

  srv.Get("/qa/sample", [this, authenticate](const httplib::Request& req, httplib::Response& res) {
    const auto* who = authenticate(req);
    if (!who) return send_error(res, 401, "Unauthorized", "missing or unknown token");
    if (who->role != Role::Lead) return send_error(res, 403, "Forbidden", "lead role required");
    std::size_t k = 0;
    std::uint64_t seed = 0;
    try {
      k = std::stoull(req.get_param_value("k"));
      if (req.has_param("seed")) seed = std::stoull(req.get_param_value("seed"));
    } catch (const std::exception&) {
      return send_error(res, 422, "InvalidQuery", "k and seed must be non-negative integers");
    }
    auto sample = campaign_.sample_for_qa(k, seed);
    json tasks = json::array();
    for (const auto& t : sample.tasks) {
      json tj = task_json(t);
      if (auto j = campaign_.judgment(t.task_id)) tj["judgment"] = json::parse(to_json_line(*j));
      tasks.push_back(std::move(tj));
    }
    json body{{"tasks", tasks}, {"clamped", sample.clamped}};
    if (sample.clamped) body["warning"] = "k exceeds completed tasks; clamped";
    send_json(res, body);
  });

  srv.Post("/qa/override", [this, authenticate](const httplib::Request& req, httplib::Response& res) {
    const auto* who = authenticate(req);
    if (!who) return send_error(res, 401, "Unauthorized", "missing or unknown token");
    if (who->role != Role::Lead) return send_error(res, 403, "Forbidden", "lead role required");
    json body = json::parse(req.body, nullptr, false);
    if (!body.is_object() || !body.contains("task_id") || !body["task_id"].is_string() ||
        !body.contains("verdict") || !body["verdict"].is_string())
      return send_error(res, 422, "InvalidBody", "task_id and verdict are required strings");
    QaOverride o;
    o.task_id = body["task_id"].get<std::string>();
    o.lead_id = who->assessor_id;
    o.at = now_ms();
    auto verdict = parse_verdict(body["verdict"].get<std::string>());
    if (!verdict) return send_error(res, 422, "InvalidVerdict", "verdict must be damage|no_damage|dont_know");
    o.verdict = *verdict;
    if (auto it = body.find("severity"); it != body.end() && it->is_string()) o.severity = parse_severity(it->get<std::string>());
    if (auto it = body.find("comment"); it != body.end() && it->is_string()) o.comment = it->get<std::string>();
    if ((o.verdict == Verdict::Damage) != o.severity.has_value())
      return send_error(res, 422, "MissingSeverity", "severity required iff verdict is damage");
    if (!campaign_.add_override(o)) return send_error(res, 409, "NotQaReviewed", "task is not under QA review");
    send_json(res, {{"stored", true}});
  });

  srv.Get("/errors", [this](const httplib::Request& req, httplib::Response& res) {
    errors_.merge(extract_error_cases(campaign_.export_judgments()));
    std::optional<ErrorSlice> slice;
    std::optional<ErrorTag> tag;
    if (req.has_param("slice") && !req.get_param_value("slice").empty()) {
      slice = parse_error_slice(req.get_param_value("slice"));
      if (!slice) return send_error(res, 422, "InvalidSlice", "unknown slice");
    }
    if (req.has_param("tag") && !req.get_param_value("tag").empty()) {
      tag = parse_error_tag(req.get_param_value("tag"));
      if (!tag) return send_error(res, 422, "InvalidTag", "unknown tag");
    }
    json out = json::array();
    for (const auto& c : errors_.list(slice, tag)) out.push_back(to_json(c));
    send_json(res, out);
  });

  srv.Post(R"(/errors/([^/]+)/tags)", [this, authenticate](const httplib::Request& req, httplib::Response& res) {
    const auto* who = authenticate(req);
    if (!who) return send_error(res, 401, "Unauthorized", "missing or unknown token");
    errors_.merge(extract_error_cases(campaign_.export_judgments()));
    json body = json::parse(req.body, nullptr, false);
    if (!body.is_object() || !body.contains("tags") || !body["tags"].is_array())
      return send_error(res, 422, "InvalidBody", "tags array required");
    std::vector<ErrorTag> tags;
    for (const auto& t : body["tags"]) {
      auto tag = t.is_string() ? parse_error_tag(t.get<std::string>()) : std::nullopt;
      if (!tag) return send_error(res, 422, "InvalidTag", "unknown tag " + t.dump());
      tags.push_back(*tag);
    }
    try {
      send_json(res, to_json(errors_.tag(req.matches[1], tags, who->assessor_id)));
    } catch (const NotFoundError& e) {
      send_error(res, 404, "NotFound", e.what());
    }
  });

  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, "Internal", e.what());
    } catch (...) {
      send_error(res, 500, "Internal", "unknown error");
    }
  });
}

int Service::bind() {
  if (bound_port_ >= 0) return bound_port_;
  int port = cfg_.port == 0 ? server_->bind_to_any_port(cfg_.host) : (server_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
  if (port < 0) throw InputError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  bound_port_ = port;
  return port;
}

int Service::start() {
  const int port = bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void Service::run() {
  bind();
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace triage
