#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triage/judgment.hpp"

namespace triage {

/// Square count matrix. Rows are human truth, columns machine prediction,
/// both in `labels` order.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::uint64_t>> cells;
  std::uint64_t n = 0;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> class_labels);

  std::size_t size() const { return labels.size(); }
  void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return cells[truth][predicted]; }
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t r) const;
  std::uint64_t col_sum(std::size_t c) const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline const std::vector<std::string> kBinaryLabels = {"Damage", "No Damage"};
inline const std::vector<std::string> kTernaryLabels = {"Severe Damage", "Mild Damage", "None"};

/// Damage vs No Damage. DontKnow judgments are skipped.
ConfusionMatrix build_binary_matrix(std::span<const JudgmentRecord> judgments);
/// Severe / Mild / None. DontKnow judgments are skipped.
ConfusionMatrix build_ternary_matrix(std::span<const JudgmentRecord> judgments);

/// Merges Severe and Mild rows and columns of a ternary matrix.
ConfusionMatrix collapse_to_binary(const ConfusionMatrix& ternary);

/// trace / n. Throws UndefinedInputError when n == 0.
double accuracy(const ConfusionMatrix& cm);

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;  // human row sum
};

struct AveragedMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  AveragedMetrics weighted;  // one-vs-rest, weighted by human-row support
  AveragedMetrics macro;
  AveragedMetrics micro;
  std::vector<ClassMetrics> per_class;
  std::vector<std::string> warnings;
};

/// Per-class one-vs-rest precision/recall/F1 and their averages. Classes
/// with an empty column (or row) get precision (or recall) 0 and a warning.
/// Throws UndefinedInputError when n == 0.
MetricsReport weighted_metrics(const ConfusionMatrix& cm);

/// Two decimals, half away from zero, for display tables.
double round2(double x);

enum class ErrorSlice { FN_SevereMissed, FN_MildMissed, FP_SevereSpurious, FP_MildSpurious };
enum class ErrorTag {
  FloodScene,
  LowLight,
  AerialWideArea,
  Collage,
  Occlusion,
  DamageResembling,
  MapOrMeme,
  RoughSea,
  Other
};

std::string_view to_string(ErrorSlice s);
std::optional<ErrorSlice> parse_error_slice(std::string_view s);
std::string_view to_string(ErrorTag t);
std::optional<ErrorTag> parse_error_tag(std::string_view s);

/// Slice for a (machine, human) pair, or nullopt when it is not one of the
/// four tracked error kinds.
std::optional<ErrorSlice> classify_error(DamageLabel machine, DamageLabel human);

struct ErrorCase {
  std::string case_id;
  std::string task_id;
  std::string image_id;
  DamageLabel machine_damage = DamageLabel::None;
  Verdict verdict = Verdict::NoDamage;
  std::optional<Severity> severity;
  ErrorSlice slice = ErrorSlice::FN_SevereMissed;
  std::set<ErrorTag> analyst_tags;
};

std::vector<ErrorCase> extract_error_cases(std::span<const JudgmentRecord> judgments,
                                           std::optional<ErrorSlice> filter = std::nullopt);

struct TagAudit {
  std::string case_id;
  std::vector<ErrorTag> tags;
  std::string analyst_id;
  Timestamp at{};
};

/// Error cases open for analyst tagging. Tag updates are atomic per store
/// and every call is audit-logged.
class ErrorCaseStore {
 public:
  ErrorCaseStore() = default;
  explicit ErrorCaseStore(std::vector<ErrorCase> cases);

  void reset(std::vector<ErrorCase> cases);
  /// Adds cases whose ids are not yet present; existing cases keep their tags.
  std::size_t merge(std::vector<ErrorCase> cases);

  /// Unions `tags` into the case. Throws NotFoundError for unknown ids.
  ErrorCase tag(const std::string& case_id, const std::vector<ErrorTag>& tags,
                const std::string& analyst_id);

  std::vector<ErrorCase> list(std::optional<ErrorSlice> slice = std::nullopt,
                              std::optional<ErrorTag> tag = std::nullopt) const;
  std::map<ErrorTag, std::size_t> tag_report() const;
  std::vector<TagAudit> audit_log() const;

 private:
  mutable std::mutex mu_;
  std::vector<ErrorCase> cases_;
  std::map<std::string, std::size_t> by_id_;
  std::vector<TagAudit> audit_;
};

/// JSON {task, matrix, labels, n, accuracy, weighted, macro, micro, per_class, warnings}.
nlohmann::json report_json(std::string_view task, const ConfusionMatrix& cm,
                           const MetricsReport& metrics);
/// Matrix CSV with a header row and a label column.
std::string matrix_csv(const ConfusionMatrix& cm);
/// Two-decimal summary table: task,accuracy,precision,recall,f1.
std::string metrics_table_csv(
    const std::vector<std::pair<std::string, MetricsReport>>& rows);

nlohmann::json to_json(const ErrorCase& c);

}  // namespace triage
