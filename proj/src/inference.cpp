#include "triage/inference.hpp"

#include <cmath>

namespace triage {

ConfusionRows StubPolicy::deployment_damage_confusion() {
  constexpr double counts[3][3] = {{710, 384, 357}, {113, 881, 355}, {721, 5233, 19296}};
  ConfusionRows rows{};
  for (int r = 0; r < 3; ++r) {
    const double total = counts[r][0] + counts[r][1] + counts[r][2];
    for (int c = 0; c < 3; ++c) rows[r][c] = counts[r][c] / total;
  }
  return rows;
}

ConfusionRows StubPolicy::identity_confusion() {
  return {{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}};
}

void StubPolicy::validate() const {
  if (!(relevance_flip_rate >= 0.0 && relevance_flip_rate <= 1.0))
    throw ConfigError("relevance_flip_rate must be in [0,1]");
  for (const auto& row : damage_confusion) {
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("damage_confusion entries must be in [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("damage_confusion rows must sum to 1");
  }
}

StubAdapter::StubAdapter(std::shared_ptr<const Manifest> manifest, StubPolicy policy)
    : manifest_(std::move(manifest)), policy_(policy) {
  policy_.validate();
}

const ManifestEntry& StubAdapter::entry_for(const ImageRecord& image, const char* stage) const {
  const ManifestEntry* e = manifest_->find(image.source_url);
  if (!e) throw StageError(stage, "no manifest row for " + image.source_url);
  return *e;
}

RelevanceLabel StubAdapter::draw_relevance(RelevanceLabel truth, const std::string& image_id) const {
  const double u = keyed_uniform(policy_.seed, "relevance", image_id);
  return u < policy_.relevance_flip_rate ? flipped(truth) : truth;
}

DamageLabel StubAdapter::draw_damage(DamageLabel truth, const std::string& image_id) const {
  const auto& row = policy_.damage_confusion[index_of(truth)];
  const double u = keyed_uniform(policy_.seed, "damage", image_id);
  double cum = 0.0;
  std::size_t last_positive = index_of(truth);
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (row[c] <= 0.0) continue;
    last_positive = c;
    cum += row[c];
    if (u < cum) return kDamageLabels[c];
  }
  return kDamageLabels[last_positive];
}

Prediction<RelevanceLabel> StubAdapter::classify_relevance(const ImageRecord& image) {
  const auto& e = entry_for(image, "relevance");
  if (!e.stub_relevance) throw StageError("relevance", "manifest row has no stub_relevance");
  Prediction<RelevanceLabel> p;
  p.image_id = image.image_id;
  p.label = draw_relevance(*e.stub_relevance, image.image_id);
  p.confidence = 0.5 + 0.5 * keyed_uniform(policy_.seed, "relevance-confidence", image.image_id);
  p.model_id = "stub-relevance";
  p.produced_at = now_ms();
  return p;
}

Prediction<DamageLabel> StubAdapter::classify_damage(const ImageRecord& image) {
  const auto& e = entry_for(image, "damage");
  if (!e.stub_damage) throw StageError("damage", "manifest row has no stub_damage");
  Prediction<DamageLabel> p;
  p.image_id = image.image_id;
  p.label = draw_damage(*e.stub_damage, image.image_id);
  p.confidence = keyed_uniform(policy_.seed, "damage-confidence", image.image_id) * 0.66 + 0.34;
  p.model_id = "stub-damage";
  p.produced_at = now_ms();
  return p;
}

}  // namespace triage
