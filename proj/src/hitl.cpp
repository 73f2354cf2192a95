#include "triage/hitl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

namespace triage {

using nlohmann::json;

void SamplerConfig::validate() const {
  if (!(window_hours > 0.0)) throw ConfigError("window_hours must be positive");
  if (!(none_fraction >= 0.0 && none_fraction <= 1.0)) throw ConfigError("none_fraction must be in [0,1]");
  if (lease.count() <= 0) throw ConfigError("lease_minutes must be positive");
}

SamplerConfig load_campaign_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read campaign config: " + path.string());
  json j = json::parse(in, nullptr, false);
  if (!j.is_object()) throw ConfigError("campaign config must be a JSON object");
  SamplerConfig cfg;
  try {
    cfg.window_hours = j.at("window_hours").get<double>();
    cfg.none_fraction = j.value("none_fraction", 0.10);
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.lease = std::chrono::minutes(j.value("lease_minutes", 30));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("campaign config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TimeWindow TimeWindow::ending_at(Timestamp end, double hours) {
  auto span = std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(hours * 3'600'000.0)));
  return {end - span, end};
}

std::string_view to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::Open: return "open";
    case TaskStatus::Assigned: return "assigned";
    case TaskStatus::Completed: return "completed";
    case TaskStatus::QaReviewed: return "qa_reviewed";
  }
  return "open";
}

std::optional<TaskStatus> parse_task_status(std::string_view s) {
  for (auto v : {TaskStatus::Open, TaskStatus::Assigned, TaskStatus::Completed, TaskStatus::QaReviewed}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::UnknownTask: return "UnknownTask";
    case RejectReason::NotYours: return "NotYours";
    case RejectReason::AlreadyJudged: return "AlreadyJudged";
    case RejectReason::MissingSeverity: return "MissingSeverity";
    case RejectReason::UnexpectedSeverity: return "UnexpectedSeverity";
  }
  return "";
}

namespace {

// Picks the k items with the smallest keyed hash: a uniform sample without
// replacement that ignores input order.
template <typename T, typename Key>
std::vector<T> keyed_pick(std::vector<T> items, std::size_t k, std::uint64_t seed, std::string_view stream,
                          Key key) {
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  order.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) order.emplace_back(keyed_hash(seed, stream, key(items[i])), i);
  k = std::min(k, items.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](const auto& a, const auto& b) {
                      return a.first != b.first ? a.first < b.first : key(items[a.second]) < key(items[b.second]);
                    });
  std::vector<T> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(std::move(items[order[i].second]));
  return out;
}

}  // namespace

QaSample qa_sample(std::span<const LabelingTask> completed, std::size_t k, std::uint64_t seed) {
  QaSample s;
  s.clamped = k > completed.size();
  s.tasks = keyed_pick(std::vector<LabelingTask>(completed.begin(), completed.end()), k, seed, "qa",
                       [](const LabelingTask& t) { return t.task_id; });
  return s;
}

Campaign::Campaign(SamplerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Campaign::register_assessor(const std::string& assessor_id) {
  std::lock_guard lock(mu_);
  assessors_.insert(assessor_id);
}

bool Campaign::is_registered(const std::string& assessor_id) const {
  std::lock_guard lock(mu_);
  return assessors_.contains(assessor_id);
}

std::vector<LabelingTask> Campaign::draw_sample(const TimeWindow& window, std::span<const ImageState> states,
                                                Timestamp now) {
  std::vector<const ImageState*> damage;
  std::vector<const ImageState*> none;
  for (const auto& s : states) {
    if (!s.is_cluster_canonical || s.dead_letter || !window.contains(s.first_seen)) continue;
    if (s.relevance != RelevanceLabel::Relevant || !s.damage) continue;
    (*s.damage == DamageLabel::None ? none : damage).push_back(&s);
  }
  // The None pick covers the whole window population, so drawing the same
  // window again selects the same images.
  const auto k = static_cast<std::size_t>(std::floor(cfg_.none_fraction * static_cast<double>(none.size()) + 0.5));
  const std::string stream = "none-sample:" + format_iso8601(window.start);
  auto picked_none = keyed_pick(none, k, cfg_.seed, stream, [](const ImageState* s) { return s->image_id; });

  std::vector<const ImageState*> chosen = damage;
  chosen.insert(chosen.end(), picked_none.begin(), picked_none.end());
  std::sort(chosen.begin(), chosen.end(), [](const ImageState* a, const ImageState* b) {
    return a->first_seen != b->first_seen ? a->first_seen < b->first_seen : a->seq < b->seq;
  });

  std::lock_guard lock(mu_);
  std::vector<LabelingTask> created;
  for (const auto* s : chosen) {
    if (!sampled_images_.insert(s->image_id).second) continue;
    LabelingTask t;
    t.task_id = "task-" + s->image_id;
    t.image_id = s->image_id;
    t.machine_damage = *s->damage;
    t.created_at = now;
    by_task_[t.task_id] = tasks_.size();
    open_.push_back(tasks_.size());
    tasks_.push_back(t);
    created.push_back(std::move(t));
  }
  return created;
}

void Campaign::expire_locked(Timestamp now) {
  std::vector<std::size_t> expired;
  for (auto idx : assigned_) {
    const auto& t = tasks_[idx];
    if (t.lease_expires && *t.lease_expires <= now) expired.push_back(idx);
  }
  // Recycled tasks go to the front, oldest first.
  for (auto it = expired.rbegin(); it != expired.rend(); ++it) {
    auto& t = tasks_[*it];
    t.status = TaskStatus::Open;
    t.assessor_id.clear();
    t.lease_expires.reset();
    assigned_.erase(*it);
    open_.push_front(*it);
  }
}

std::size_t Campaign::expire_stale(Timestamp now) {
  std::lock_guard lock(mu_);
  const auto before = assigned_.size();
  expire_locked(now);
  return before - assigned_.size();
}

std::optional<LabelingTask> Campaign::next_task(const std::string& assessor_id, Timestamp now) {
  std::lock_guard lock(mu_);
  if (!assessors_.contains(assessor_id)) throw ContractViolation("unregistered assessor " + assessor_id);
  expire_locked(now);
  while (!open_.empty()) {
    const auto idx = open_.front();
    open_.pop_front();
    auto& t = tasks_[idx];
    if (t.status != TaskStatus::Open) continue;
    t.status = TaskStatus::Assigned;
    t.assessor_id = assessor_id;
    t.lease_expires = now + cfg_.lease;
    assigned_.insert(idx);
    return t;
  }
  return std::nullopt;
}

SubmitResult Campaign::submit_judgment(const HumanJudgment& j) {
  SubmitResult r;
  auto reject = [&](RejectReason why) {
    r.reason = why;
    return r;
  };
  if (j.verdict == Verdict::Damage && !j.severity) return reject(RejectReason::MissingSeverity);
  if (j.verdict != Verdict::Damage && j.severity) return reject(RejectReason::UnexpectedSeverity);

  std::lock_guard lock(mu_);
  auto it = by_task_.find(j.task_id);
  if (it == by_task_.end()) return reject(RejectReason::UnknownTask);
  auto& t = tasks_[it->second];
  if (t.status == TaskStatus::Completed || t.status == TaskStatus::QaReviewed)
    return reject(RejectReason::AlreadyJudged);
  if (t.status != TaskStatus::Assigned || t.assessor_id != j.assessor_id) return reject(RejectReason::NotYours);

  t.status = TaskStatus::Completed;
  t.lease_expires.reset();
  assigned_.erase(it->second);
  JudgmentRecord rec;
  rec.task_id = t.task_id;
  rec.image_id = t.image_id;
  rec.machine_damage = t.machine_damage;
  rec.verdict = j.verdict;
  rec.severity = j.severity;
  rec.assessor_id = j.assessor_id;
  rec.comment = j.comment;
  rec.submitted_at = j.submitted_at;
  judgments_.emplace(t.task_id, std::move(rec));
  r.accepted = true;
  r.excluded_from_metrics = j.verdict == Verdict::DontKnow;
  return r;
}

QaSample Campaign::sample_for_qa(std::size_t k, std::uint64_t seed) {
  std::lock_guard lock(mu_);
  std::vector<LabelingTask> judged;
  for (const auto& t : tasks_) {
    if (t.status == TaskStatus::Completed || t.status == TaskStatus::QaReviewed) judged.push_back(t);
  }
  auto sample = qa_sample(judged, k, seed);
  for (auto& t : sample.tasks) {
    tasks_[by_task_.at(t.task_id)].status = TaskStatus::QaReviewed;
    t.status = TaskStatus::QaReviewed;
  }
  return sample;
}

bool Campaign::add_override(const QaOverride& o) {
  if ((o.verdict == Verdict::Damage) != o.severity.has_value()) return false;
  std::lock_guard lock(mu_);
  auto it = by_task_.find(o.task_id);
  if (it == by_task_.end() || tasks_[it->second].status != TaskStatus::QaReviewed) return false;
  overrides_.push_back(o);
  return true;
}

std::vector<LabelingTask> Campaign::tasks() const {
  std::lock_guard lock(mu_);
  return tasks_;
}

std::optional<LabelingTask> Campaign::task(const std::string& task_id) const {
  std::lock_guard lock(mu_);
  auto it = by_task_.find(task_id);
  if (it == by_task_.end()) return std::nullopt;
  return tasks_[it->second];
}

std::optional<JudgmentRecord> Campaign::judgment(const std::string& task_id) const {
  std::lock_guard lock(mu_);
  auto it = judgments_.find(task_id);
  if (it == judgments_.end()) return std::nullopt;
  return it->second;
}

std::vector<JudgmentRecord> Campaign::export_judgments() const {
  std::lock_guard lock(mu_);
  std::vector<JudgmentRecord> out;
  out.reserve(judgments_.size());
  for (const auto& t : tasks_) {
    if (auto it = judgments_.find(t.task_id); it != judgments_.end()) out.push_back(it->second);
  }
  return out;
}

std::vector<QaOverride> Campaign::overrides() const {
  std::lock_guard lock(mu_);
  return overrides_;
}

std::size_t Campaign::open_count() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(
      std::count_if(tasks_.begin(), tasks_.end(), [](const LabelingTask& t) { return t.status == TaskStatus::Open; }));
}

void Campaign::save_tasks(std::ostream& out) const {
  std::lock_guard lock(mu_);
  for (const auto& t : tasks_) {
    json j{{"task_id", t.task_id},
           {"image_id", t.image_id},
           {"machine_damage", to_string(t.machine_damage)},
           {"created_at", format_iso8601(t.created_at)},
           {"status", to_string(t.status)},
           {"assessor_id", t.assessor_id.empty() ? json(nullptr) : json(t.assessor_id)},
           {"lease_expires", t.lease_expires ? json(format_iso8601(*t.lease_expires)) : json(nullptr)}};
    out << j.dump() << '\n';
  }
}

void Campaign::load(std::istream& tasks_jsonl, std::istream* judgments_jsonl) {
  std::vector<LabelingTask> loaded;
  std::string line;
  while (std::getline(tasks_jsonl, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_object()) throw InputError("malformed task line");
    try {
      LabelingTask t;
      t.task_id = j.at("task_id").get<std::string>();
      t.image_id = j.at("image_id").get<std::string>();
      auto md = parse_damage(j.at("machine_damage").get<std::string>());
      auto st = parse_task_status(j.at("status").get<std::string>());
      if (!md || !st) throw InputError("bad task enum value");
      t.machine_damage = *md;
      t.status = *st;
      t.created_at = parse_iso8601(j.at("created_at").get<std::string>());
      if (!j["assessor_id"].is_null()) t.assessor_id = j["assessor_id"].get<std::string>();
      if (!j["lease_expires"].is_null()) t.lease_expires = parse_iso8601(j["lease_expires"].get<std::string>());
      loaded.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw InputError(std::string("malformed task line: ") + e.what());
    }
  }
  std::vector<JudgmentRecord> judged;
  if (judgments_jsonl) judged = read_judgments(*judgments_jsonl);

  std::lock_guard lock(mu_);
  for (auto& t : loaded) {
    if (by_task_.contains(t.task_id)) continue;
    sampled_images_.insert(t.image_id);
    const auto idx = tasks_.size();
    by_task_[t.task_id] = idx;
    if (t.status == TaskStatus::Open) open_.push_back(idx);
    if (t.status == TaskStatus::Assigned) assigned_.insert(idx);
    tasks_.push_back(std::move(t));
  }
  for (auto& j : judged) {
    auto it = by_task_.find(j.task_id);
    if (it == by_task_.end()) continue;
    auto& t = tasks_[it->second];
    if (t.status == TaskStatus::Open || t.status == TaskStatus::Assigned) {
      if (t.status == TaskStatus::Assigned) assigned_.erase(it->second);
      t.status = TaskStatus::Completed;
      t.assessor_id = j.assessor_id;
      t.lease_expires.reset();
    }
    judgments_.emplace(j.task_id, std::move(j));
  }
}

}  // namespace triage
