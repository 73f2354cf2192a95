#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "triage/common.hpp"
#include "triage/labels.hpp"

namespace triage {

enum class Verdict { Damage, NoDamage, DontKnow };
enum class Severity { Mild, Severe };

constexpr std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Damage: return "damage";
    case Verdict::NoDamage: return "no_damage";
    case Verdict::DontKnow: return "dont_know";
  }
  return "dont_know";
}

constexpr std::string_view to_string(Severity s) {
  return s == Severity::Mild ? "mild" : "severe";
}

constexpr std::optional<Verdict> parse_verdict(std::string_view s) {
  if (s == "damage") return Verdict::Damage;
  if (s == "no_damage") return Verdict::NoDamage;
  if (s == "dont_know") return Verdict::DontKnow;
  return std::nullopt;
}

constexpr std::optional<Severity> parse_severity(std::string_view s) {
  if (s == "mild") return Severity::Mild;
  if (s == "severe") return Severity::Severe;
  return std::nullopt;
}

/// One exported expert judgment, joined with the machine label the expert saw.
struct JudgmentRecord {
  std::string task_id;
  std::string image_id;
  DamageLabel machine_damage = DamageLabel::None;
  Verdict verdict = Verdict::DontKnow;
  std::optional<Severity> severity;
  std::string assessor_id;
  std::optional<std::string> comment;
  Timestamp submitted_at{};

  bool dontknow() const { return verdict == Verdict::DontKnow; }
  /// Human label on the three-class scale; nullopt for DontKnow.
  std::optional<DamageLabel> human_damage() const;

  friend bool operator==(const JudgmentRecord&, const JudgmentRecord&) = default;
};

// Line format:
// {"task_id","image_id","machine_damage","verdict","severity"|null,
//  "assessor_id","dontknow","comment"|null,"submitted_at"}
std::string to_json_line(const JudgmentRecord& j);
/// Throws InputError on schema violations.
JudgmentRecord parse_judgment_line(std::string_view line);

void write_judgments(std::ostream& out, const std::vector<JudgmentRecord>& judgments);
/// Throws InputError naming the offending line.
std::vector<JudgmentRecord> read_judgments(std::istream& in);

}  // namespace triage
