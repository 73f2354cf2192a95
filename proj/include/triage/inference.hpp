#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "triage/common.hpp"
#include "triage/dedup.hpp"
#include "triage/fetch.hpp"
#include "triage/labels.hpp"

namespace triage {

template <typename Label>
struct Prediction {
  std::string image_id;
  Label label{};
  double confidence = 0.0;
  std::string model_id;
  Timestamp produced_at{};
};

using ConfusionRows = std::array<std::array<double, 3>, 3>;

/// Controls the deterministic replay classifier. Rows and columns of
/// damage_confusion are ordered {Severe, Mild, None}; row = true label,
/// column = emitted label.
struct StubPolicy {
  std::uint64_t seed = 0;
  double relevance_flip_rate = 0.0;
  ConfusionRows damage_confusion = deployment_damage_confusion();

  /// Row-normalized human-vs-machine frequencies observed in the Hurricane
  /// Dorian deployment (rows: human label, columns: machine label).
  static ConfusionRows deployment_damage_confusion();
  static ConfusionRows identity_confusion();

  void validate() const;
};

/// Classifier for the two cascaded models. Implementations are safe for
/// concurrent calls and throw StageError when they cannot produce a label.
class InferenceAdapter {
 public:
  virtual ~InferenceAdapter() = default;
  virtual Prediction<RelevanceLabel> classify_relevance(const ImageRecord& image) = 0;
  virtual Prediction<DamageLabel> classify_damage(const ImageRecord& image) = 0;
};

inline Prediction<RelevanceLabel> classify_relevance(const ImageRecord& image,
                                                     InferenceAdapter& adapter) {
  return adapter.classify_relevance(image);
}

inline Prediction<DamageLabel> classify_damage(const ImageRecord& image,
                                               InferenceAdapter& adapter) {
  return adapter.classify_damage(image);
}

/// Replays manifest stub labels through controlled error. All randomness is
/// keyed by (seed, image_id), so outputs do not depend on call order.
class StubAdapter final : public InferenceAdapter {
 public:
  StubAdapter(std::shared_ptr<const Manifest> manifest, StubPolicy policy);

  Prediction<RelevanceLabel> classify_relevance(const ImageRecord& image) override;
  Prediction<DamageLabel> classify_damage(const ImageRecord& image) override;

  /// Label emitted for a given true label; exposed for calibration tests.
  DamageLabel draw_damage(DamageLabel truth, const std::string& image_id) const;
  RelevanceLabel draw_relevance(RelevanceLabel truth, const std::string& image_id) const;

  const StubPolicy& policy() const { return policy_; }

 private:
  const ManifestEntry& entry_for(const ImageRecord& image, const char* stage) const;

  std::shared_ptr<const Manifest> manifest_;
  StubPolicy policy_;
};

struct RemoteModelConfig {
  std::string base_url;             // e.g. "http://127.0.0.1:8500"
  std::string path = "/classify";
  std::string model;                // "relevance" | "damage" | "features"
  std::size_t max_batch = 16;
  std::chrono::milliseconds timeout{10'000};
  std::size_t max_in_flight = 4;
  bool send_features = false;       // send feature rows instead of bytes_b64
};

struct RemoteItem {
  std::string image_id;
  std::string bytes;
  std::optional<std::vector<double>> feature;
};

struct RemotePrediction {
  std::string image_id;
  std::string label;
  double confidence = 0.0;
  std::vector<double> feature;  // populated for model "features"
};

struct RemoteItemError {
  enum class Kind { Missing, ContractViolation, ModelError };
  std::string image_id;
  Kind kind = Kind::ModelError;
  std::string message;
};

using RemoteItemResult = std::variant<RemotePrediction, RemoteItemError>;

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// Thin HTTP client for the remote-model wire format. Results are aligned
/// with `batch` by position. Transport failures are retried once and then
/// raise StageError for the whole batch; per-item problems come back as
/// RemoteItemError.
class RemoteModelClient {
 public:
  explicit RemoteModelClient(RemoteModelConfig cfg);

  std::vector<RemoteItemResult> classify(std::span<const RemoteItem> batch);
  const RemoteModelConfig& config() const { return cfg_; }

 private:
  RemoteModelConfig cfg_;
  std::unique_ptr<InFlightLimiter> limiter_;
};

std::vector<RemoteItemResult> remote_classify(std::span<const RemoteItem> batch,
                                              const RemoteModelConfig& endpoint);

/// Adapter backed by two independent remote endpoints.
class RemoteAdapter final : public InferenceAdapter {
 public:
  RemoteAdapter(RemoteModelConfig relevance, RemoteModelConfig damage);

  Prediction<RelevanceLabel> classify_relevance(const ImageRecord& image) override;
  Prediction<DamageLabel> classify_damage(const ImageRecord& image) override;

 private:
  RemoteModelClient relevance_;
  RemoteModelClient damage_;
};

/// Feature extractor served over the same wire format with model "features";
/// responses carry `feature: [..]` per item.
class RemoteExtractor final : public FeatureExtractor {
 public:
  explicit RemoteExtractor(RemoteModelConfig cfg);
  std::vector<double> extract(const ImageRecord& image) override;

 private:
  RemoteModelClient client_;
};

}  // namespace triage
