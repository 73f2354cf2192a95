#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "triage/judgment.hpp"
#include "triage/pipeline.hpp"

namespace triage {

struct SamplerConfig {
  double window_hours = 0.0;  // no default; campaigns pick their own window
  double none_fraction = 0.10;
  std::uint64_t seed = 0;
  std::chrono::minutes lease{30};

  void validate() const;
};

/// Campaign file: {"window_hours", "none_fraction", "seed", "lease_minutes"}.
SamplerConfig load_campaign_config(const std::filesystem::path& path);

/// Half-open [start, end).
struct TimeWindow {
  Timestamp start{};
  Timestamp end{};

  bool contains(Timestamp t) const { return t >= start && t < end; }
  static TimeWindow ending_at(Timestamp end, double hours);
};

enum class TaskStatus { Open, Assigned, Completed, QaReviewed };

std::string_view to_string(TaskStatus s);
std::optional<TaskStatus> parse_task_status(std::string_view s);

struct LabelingTask {
  std::string task_id;
  std::string image_id;
  DamageLabel machine_damage = DamageLabel::None;
  Timestamp created_at{};
  TaskStatus status = TaskStatus::Open;
  std::string assessor_id;  // set once assigned
  std::optional<Timestamp> lease_expires;
};

struct HumanJudgment {
  std::string task_id;
  std::string assessor_id;
  Verdict verdict = Verdict::DontKnow;
  std::optional<Severity> severity;
  std::optional<std::string> comment;
  Timestamp submitted_at{};
};

enum class RejectReason { UnknownTask, NotYours, AlreadyJudged, MissingSeverity, UnexpectedSeverity };

std::string_view to_string(RejectReason r);

struct SubmitResult {
  bool accepted = false;
  std::optional<RejectReason> reason;
  bool excluded_from_metrics = false;  // DontKnow
};

struct QaOverride {
  std::string task_id;
  std::string lead_id;
  Verdict verdict = Verdict::NoDamage;
  std::optional<Severity> severity;
  std::optional<std::string> comment;
  Timestamp at{};
};

struct QaSample {
  std::vector<LabelingTask> tasks;
  bool clamped = false;
};

/// Seeded uniform sample of k tasks without replacement (k is clamped to
/// the population). Depends only on (seed, task ids), not input order.
QaSample qa_sample(std::span<const LabelingTask> completed, std::size_t k, std::uint64_t seed);

/// Human verification campaign: sampled tasks, single-assessor leases,
/// immutable judgments and separate QA overrides. All operations hold one
/// lock, so every state transition is linearizable.
class Campaign {
 public:
  explicit Campaign(SamplerConfig cfg = {.window_hours = 1.0});

  void register_assessor(const std::string& assessor_id);
  bool is_registered(const std::string& assessor_id) const;

  /// Creates tasks for every Severe/Mild canonical first seen in `window`
  /// and a seeded none_fraction sample of its None canonicals, skipping
  /// images that already have a task. Returns the new tasks.
  std::vector<LabelingTask> draw_sample(const TimeWindow& window, std::span<const ImageState> states,
                                        Timestamp now = now_ms());

  /// Assigns the oldest open task to the assessor under a lease. Expired
  /// leases are recycled first. Throws ContractViolation for unknown assessors.
  std::optional<LabelingTask> next_task(const std::string& assessor_id, Timestamp now = now_ms());

  SubmitResult submit_judgment(const HumanJudgment& j);

  /// Reverts Assigned tasks whose lease has run out. Returns how many.
  std::size_t expire_stale(Timestamp now = now_ms());

  /// Samples judged tasks for lead review and marks them QaReviewed.
  QaSample sample_for_qa(std::size_t k, std::uint64_t seed);

  /// Stores a lead correction. Requires the task to be QaReviewed.
  bool add_override(const QaOverride& o);

  std::vector<LabelingTask> tasks() const;
  std::optional<LabelingTask> task(const std::string& task_id) const;
  std::optional<JudgmentRecord> judgment(const std::string& task_id) const;
  std::vector<JudgmentRecord> export_judgments() const;
  std::vector<QaOverride> overrides() const;
  std::size_t open_count() const;
  const SamplerConfig& config() const { return cfg_; }

  void save_tasks(std::ostream& out) const;
  /// Restores tasks (and their judgments) saved earlier.
  void load(std::istream& tasks_jsonl, std::istream* judgments_jsonl = nullptr);

 private:
  void expire_locked(Timestamp now);

  SamplerConfig cfg_;
  mutable std::mutex mu_;
  std::vector<LabelingTask> tasks_;
  std::unordered_map<std::string, std::size_t> by_task_;
  std::deque<std::size_t> open_;  // indices into tasks_, oldest first
  std::set<std::size_t> assigned_;
  std::set<std::string> sampled_images_;
  std::set<std::string> assessors_;
  std::map<std::string, JudgmentRecord> judgments_;
  std::vector<QaOverride> overrides_;
};

}  // namespace triage
