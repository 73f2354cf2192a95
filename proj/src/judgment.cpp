#include "triage/judgment.hpp"

#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>

namespace triage {

using nlohmann::json;

std::optional<DamageLabel> JudgmentRecord::human_damage() const {
  switch (verdict) {
    case Verdict::NoDamage: return DamageLabel::None;
    case Verdict::Damage:
      if (!severity) return std::nullopt;
      return *severity == Severity::Severe ? DamageLabel::Severe : DamageLabel::Mild;
    case Verdict::DontKnow: return std::nullopt;
  }
  return std::nullopt;
}

std::string to_json_line(const JudgmentRecord& j) {
  json o;
  o["task_id"] = j.task_id;
  o["image_id"] = j.image_id;
  o["machine_damage"] = to_string(j.machine_damage);
  o["verdict"] = to_string(j.verdict);
  o["severity"] = j.severity ? json(to_string(*j.severity)) : json(nullptr);
  o["assessor_id"] = j.assessor_id;
  o["dontknow"] = j.dontknow();
  o["comment"] = j.comment ? json(*j.comment) : json(nullptr);
  o["submitted_at"] = format_iso8601(j.submitted_at);
  return o.dump();
}

JudgmentRecord parse_judgment_line(std::string_view line) {
  json o = json::parse(line.begin(), line.end(), nullptr, false);
  if (!o.is_object()) throw InputError("judgment is not a JSON object");
  auto str = [&](const char* key) -> std::string {
    auto it = o.find(key);
    if (it == o.end() || !it->is_string())
      throw InputError(std::string("judgment field '") + key + "' must be a string");
    return it->get<std::string>();
  };
  auto opt_str = [&](const char* key) -> std::optional<std::string> {
    auto it = o.find(key);
    if (it == o.end() || it->is_null()) return std::nullopt;
    if (!it->is_string())
      throw InputError(std::string("judgment field '") + key + "' must be a string or null");
    return it->get<std::string>();
  };

  JudgmentRecord j;
  j.task_id = str("task_id");
  j.image_id = str("image_id");
  auto md = parse_damage(str("machine_damage"));
  if (!md) throw InputError("judgment machine_damage must be severe|mild|none");
  j.machine_damage = *md;
  auto v = parse_verdict(str("verdict"));
  if (!v) throw InputError("judgment verdict must be damage|no_damage|dont_know");
  j.verdict = *v;
  if (auto s = opt_str("severity")) {
    auto sev = parse_severity(*s);
    if (!sev) throw InputError("judgment severity must be mild|severe|null");
    j.severity = sev;
  }
  if ((j.verdict == Verdict::Damage) != j.severity.has_value())
    throw InputError("judgment severity must be present iff verdict is damage");
  j.assessor_id = str("assessor_id");
  if (auto it = o.find("dontknow"); it != o.end()) {
    if (!it->is_boolean() || it->get<bool>() != j.dontknow())
      throw InputError("judgment dontknow flag inconsistent with verdict");
  }
  j.comment = opt_str("comment");
  j.submitted_at = parse_iso8601(str("submitted_at"));
  return j;
}

void write_judgments(std::ostream& out, const std::vector<JudgmentRecord>& judgments) {
  for (const auto& j : judgments) out << to_json_line(j) << '\n';
}

std::vector<JudgmentRecord> read_judgments(std::istream& in) {
  std::vector<JudgmentRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_judgment_line(line));
    } catch (const InputError& e) {
      throw InputError("judgments line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace triage
