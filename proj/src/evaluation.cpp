#include "triage/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>

namespace triage {

using nlohmann::json;

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_labels)
    : labels(std::move(class_labels)),
      cells(labels.size(), std::vector<std::uint64_t>(labels.size(), 0)) {}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t count) {
  cells.at(truth).at(predicted) += count;
  n += count;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < size(); ++i) t += cells[i][i];
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t r) const {
  std::uint64_t s = 0;
  for (auto v : cells[r]) s += v;
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::uint64_t s = 0;
  for (const auto& row : cells) s += row[c];
  return s;
}

namespace {

std::size_t binary_index(DamageLabel l) { return l == DamageLabel::None ? 1 : 0; }

}  // namespace

ConfusionMatrix build_binary_matrix(std::span<const JudgmentRecord> judgments) {
  ConfusionMatrix cm(kBinaryLabels);
  for (const auto& j : judgments) {
    auto human = j.human_damage();
    if (!human) continue;
    cm.add(binary_index(*human), binary_index(j.machine_damage));
  }
  return cm;
}

ConfusionMatrix build_ternary_matrix(std::span<const JudgmentRecord> judgments) {
  ConfusionMatrix cm(kTernaryLabels);
  for (const auto& j : judgments) {
    auto human = j.human_damage();
    if (!human) continue;
    cm.add(index_of(*human), index_of(j.machine_damage));
  }
  return cm;
}

ConfusionMatrix collapse_to_binary(const ConfusionMatrix& ternary) {
  if (ternary.size() != 3) throw ContractViolation("collapse_to_binary needs a 3x3 matrix");
  ConfusionMatrix cm(kBinaryLabels);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      cm.add(r == 2 ? 1 : 0, c == 2 ? 1 : 0, ternary.cells[r][c]);
    }
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  if (cm.n == 0) throw UndefinedInputError("accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(cm.n);
}

namespace {

double harmonic(double p, double r) { return (p > 0.0 && r > 0.0) ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

MetricsReport weighted_metrics(const ConfusionMatrix& cm) {
  if (cm.n == 0) throw UndefinedInputError("metrics of an empty confusion matrix");
  MetricsReport rep;
  rep.accuracy = accuracy(cm);
  const double n = static_cast<double>(cm.n);
  const double k = static_cast<double>(cm.size());

  for (std::size_t i = 0; i < cm.size(); ++i) {
    ClassMetrics m;
    m.label = cm.labels[i];
    m.support = cm.row_sum(i);
    const auto col = cm.col_sum(i);
    const double tp = static_cast<double>(cm.cells[i][i]);
    if (col == 0) {
      rep.warnings.push_back("class '" + m.label + "' was never predicted; precision set to 0");
    } else {
      m.precision = tp / static_cast<double>(col);
    }
    if (m.support == 0) {
      rep.warnings.push_back("class '" + m.label + "' has no support; recall set to 0");
    } else {
      m.recall = tp / static_cast<double>(m.support);
    }
    m.f1 = harmonic(m.precision, m.recall);

    const double w = static_cast<double>(m.support) / n;
    rep.weighted.precision += w * m.precision;
    rep.weighted.recall += w * m.recall;
    rep.weighted.f1 += w * m.f1;
    rep.macro.precision += m.precision / k;
    rep.macro.recall += m.recall / k;
    rep.macro.f1 += m.f1 / k;
    rep.per_class.push_back(std::move(m));
  }
  // Single-label multiclass: pooled TP/FP/FN make all micro averages equal accuracy.
  rep.micro = {rep.accuracy, rep.accuracy, rep.accuracy};
  return rep;
}

double round2(double x) {
  return std::copysign(std::floor(std::abs(x) * 100.0 + 0.5 + 1e-9) / 100.0, x);
}

std::string_view to_string(ErrorSlice s) {
  switch (s) {
    case ErrorSlice::FN_SevereMissed: return "FN_SevereMissed";
    case ErrorSlice::FN_MildMissed: return "FN_MildMissed";
    case ErrorSlice::FP_SevereSpurious: return "FP_SevereSpurious";
    case ErrorSlice::FP_MildSpurious: return "FP_MildSpurious";
  }
  return "";
}

std::optional<ErrorSlice> parse_error_slice(std::string_view s) {
  for (auto v : {ErrorSlice::FN_SevereMissed, ErrorSlice::FN_MildMissed,
                 ErrorSlice::FP_SevereSpurious, ErrorSlice::FP_MildSpurious}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

std::string_view to_string(ErrorTag t) {
  switch (t) {
    case ErrorTag::FloodScene: return "FloodScene";
    case ErrorTag::LowLight: return "LowLight";
    case ErrorTag::AerialWideArea: return "AerialWideArea";
    case ErrorTag::Collage: return "Collage";
    case ErrorTag::Occlusion: return "Occlusion";
    case ErrorTag::DamageResembling: return "DamageResembling";
    case ErrorTag::MapOrMeme: return "MapOrMeme";
    case ErrorTag::RoughSea: return "RoughSea";
    case ErrorTag::Other: return "Other";
  }
  return "Other";
}

std::optional<ErrorTag> parse_error_tag(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(ErrorTag::Other); ++i) {
    auto t = static_cast<ErrorTag>(i);
    if (to_string(t) == s) return t;
  }
  return std::nullopt;
}

std::optional<ErrorSlice> classify_error(DamageLabel machine, DamageLabel human) {
  if (machine == DamageLabel::None && human == DamageLabel::Severe) return ErrorSlice::FN_SevereMissed;
  if (machine == DamageLabel::None && human == DamageLabel::Mild) return ErrorSlice::FN_MildMissed;
  if (machine == DamageLabel::Severe && human == DamageLabel::None) return ErrorSlice::FP_SevereSpurious;
  if (machine == DamageLabel::Mild && human == DamageLabel::None) return ErrorSlice::FP_MildSpurious;
  return std::nullopt;
}

std::vector<ErrorCase> extract_error_cases(std::span<const JudgmentRecord> judgments,
                                           std::optional<ErrorSlice> filter) {
  std::vector<ErrorCase> out;
  for (const auto& j : judgments) {
    auto human = j.human_damage();
    if (!human) continue;
    auto slice = classify_error(j.machine_damage, *human);
    if (!slice || (filter && *filter != *slice)) continue;
    ErrorCase c;
    c.case_id = "err-" + j.task_id;
    c.task_id = j.task_id;
    c.image_id = j.image_id;
    c.machine_damage = j.machine_damage;
    c.verdict = j.verdict;
    c.severity = j.severity;
    c.slice = *slice;
    out.push_back(std::move(c));
  }
  return out;
}

ErrorCaseStore::ErrorCaseStore(std::vector<ErrorCase> cases) { reset(std::move(cases)); }

void ErrorCaseStore::reset(std::vector<ErrorCase> cases) {
  std::lock_guard lock(mu_);
  cases_ = std::move(cases);
  by_id_.clear();
  audit_.clear();
  for (std::size_t i = 0; i < cases_.size(); ++i) by_id_[cases_[i].case_id] = i;
}

std::size_t ErrorCaseStore::merge(std::vector<ErrorCase> cases) {
  std::lock_guard lock(mu_);
  std::size_t added = 0;
  for (auto& c : cases) {
    if (by_id_.contains(c.case_id)) continue;
    by_id_[c.case_id] = cases_.size();
    cases_.push_back(std::move(c));
    ++added;
  }
  return added;
}

ErrorCase ErrorCaseStore::tag(const std::string& case_id, const std::vector<ErrorTag>& tags,
                              const std::string& analyst_id) {
  std::lock_guard lock(mu_);
  auto it = by_id_.find(case_id);
  if (it == by_id_.end()) throw NotFoundError("unknown error case " + case_id);
  auto& c = cases_[it->second];
  c.analyst_tags.insert(tags.begin(), tags.end());
  audit_.push_back(TagAudit{case_id, tags, analyst_id, now_ms()});
  return c;
}

std::vector<ErrorCase> ErrorCaseStore::list(std::optional<ErrorSlice> slice,
                                            std::optional<ErrorTag> tag) const {
  std::lock_guard lock(mu_);
  std::vector<ErrorCase> out;
  for (const auto& c : cases_) {
    if (slice && c.slice != *slice) continue;
    if (tag && !c.analyst_tags.contains(*tag)) continue;
    out.push_back(c);
  }
  return out;
}

std::map<ErrorTag, std::size_t> ErrorCaseStore::tag_report() const {
  std::lock_guard lock(mu_);
  std::map<ErrorTag, std::size_t> counts;
  for (const auto& c : cases_) {
    for (auto t : c.analyst_tags) ++counts[t];
  }
  return counts;
}

std::vector<TagAudit> ErrorCaseStore::audit_log() const {
  std::lock_guard lock(mu_);
  return audit_;
}

namespace {

json averaged(const AveragedMetrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

}  // namespace

json report_json(std::string_view task, const ConfusionMatrix& cm, const MetricsReport& metrics) {
  json per_class = json::array();
  for (const auto& c : metrics.per_class) {
    per_class.push_back({{"label", c.label},
                         {"precision", c.precision},
                         {"recall", c.recall},
                         {"f1", c.f1},
                         {"support", c.support}});
  }
  return {{"task", task},
          {"labels", cm.labels},
          {"matrix", cm.cells},
          {"n", cm.n},
          {"accuracy", metrics.accuracy},
          {"weighted", averaged(metrics.weighted)},
          {"macro", averaged(metrics.macro)},
          {"micro", averaged(metrics.micro)},
          {"per_class", per_class},
          {"warnings", metrics.warnings}};
}

std::string matrix_csv(const ConfusionMatrix& cm) {
  std::string out = "human\\machine";
  for (const auto& l : cm.labels) out += "," + l;
  out += '\n';
  for (std::size_t r = 0; r < cm.size(); ++r) {
    out += cm.labels[r];
    for (auto v : cm.cells[r]) out += "," + std::to_string(v);
    out += '\n';
  }
  return out;
}

std::string metrics_table_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out = "task,accuracy,precision,recall,f1\n";
  char buf[128];
  for (const auto& [task, m] : rows) {
    std::snprintf(buf, sizeof buf, ",%.2f,%.2f,%.2f,%.2f\n", round2(m.accuracy),
                  round2(m.weighted.precision), round2(m.weighted.recall), round2(m.weighted.f1));
    out += task + buf;
  }
  return out;
}

json to_json(const ErrorCase& c) {
  json tags = json::array();
  for (auto t : c.analyst_tags) tags.push_back(to_string(t));
  return {{"case_id", c.case_id},
          {"task_id", c.task_id},
          {"image_id", c.image_id},
          {"machine_damage", to_string(c.machine_damage)},
          {"verdict", to_string(c.verdict)},
          {"severity", c.severity ? json(to_string(*c.severity)) : json(nullptr)},
          {"slice", to_string(c.slice)},
          {"analyst_tags", tags}};
}

}  // namespace triage
