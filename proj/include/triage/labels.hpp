#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace triage {

enum class RelevanceLabel { Relevant, Junk };
enum class DamageLabel { Severe, Mild, None };

inline constexpr std::array<DamageLabel, 3> kDamageLabels = {
    DamageLabel::Severe, DamageLabel::Mild, DamageLabel::None};

// Wire strings are lowercase and exact.
constexpr std::string_view to_string(RelevanceLabel l) {
  return l == RelevanceLabel::Relevant ? "relevant" : "junk";
}

constexpr std::string_view to_string(DamageLabel l) {
  switch (l) {
    case DamageLabel::Severe: return "severe";
    case DamageLabel::Mild: return "mild";
    case DamageLabel::None: return "none";
  }
  return "none";
}

constexpr std::optional<RelevanceLabel> parse_relevance(std::string_view s) {
  if (s == "relevant") return RelevanceLabel::Relevant;
  if (s == "junk") return RelevanceLabel::Junk;
  return std::nullopt;
}

constexpr std::optional<DamageLabel> parse_damage(std::string_view s) {
  if (s == "severe") return DamageLabel::Severe;
  if (s == "mild") return DamageLabel::Mild;
  if (s == "none") return DamageLabel::None;
  return std::nullopt;
}

constexpr std::size_t index_of(DamageLabel l) { return static_cast<std::size_t>(l); }

constexpr RelevanceLabel flipped(RelevanceLabel l) {
  return l == RelevanceLabel::Relevant ? RelevanceLabel::Junk : RelevanceLabel::Relevant;
}

}  // namespace triage
