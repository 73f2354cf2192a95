#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triage/dedup.hpp"
#include "triage/fetch.hpp"
#include "triage/inference.hpp"
#include "triage/ingest.hpp"

namespace triage {

struct PipelineConfig {
  DedupConfig dedup;
  StubPolicy stub;
  FetchPolicy fetch;
  std::vector<std::string> keywords = KeywordFilter::default_keywords();
  bool apply_keyword_filter = true;
  std::size_t queue_capacity = 1024;
  std::chrono::milliseconds bucket_width = std::chrono::hours(24);
  std::size_t fetch_workers = 8;
  std::size_t inference_workers = 4;

  void validate() const;
};

/// Reads a flat `key = value` config with optional [section] headers:
///
///   [dedup]
///   distance_threshold = 20.0
///   dimension = 4096
///   [stub]
///   seed = 7
///   damage_confusion = [[1,0,0],[0,1,0],[0,0,1]]
///   [pipeline]
///   bucket_width_hours = 24
///
/// Values are JSON literals. Unknown keys are a ConfigError.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
PipelineConfig parse_pipeline_config(std::istream& in);

struct StageTimeline {
  std::optional<Timestamp> fetched;
  std::optional<Timestamp> deduped;
  std::optional<Timestamp> relevance;
  std::optional<Timestamp> damage;
};

struct ImageState {
  std::string image_id;
  std::uint64_t seq = 0;  // stream order of the image's URL
  std::string source_url;
  Timestamp first_seen{};
  std::vector<std::string> tweet_ids;
  ClusterId cluster;
  bool is_cluster_canonical = false;
  double dedup_distance = 0.0;
  std::optional<RelevanceLabel> relevance;
  std::optional<DamageLabel> damage;
  double relevance_confidence = 0.0;
  double damage_confidence = 0.0;
  bool inherited = false;
  std::optional<std::string> dead_letter;  // "stage: reason"
  StageTimeline timeline;

  bool terminal() const {
    return !dead_letter && relevance &&
           (*relevance == RelevanceLabel::Junk || damage.has_value());
  }
};

struct DeadLetter {
  std::string image_id;
  std::string url;
  std::string stage;
  std::string reason;
};

struct StageAccounting {
  std::uint64_t total_tweets = 0;
  std::uint64_t unique_urls = 0;
  std::uint64_t downloaded = 0;
  std::uint64_t failed = 0;
  std::uint64_t unique_images = 0;
  std::uint64_t duplicate_images = 0;
  std::uint64_t relevant = 0;
  std::uint64_t not_relevant = 0;
  std::uint64_t with_damage = 0;
  std::uint64_t severe = 0;
  std::uint64_t mild = 0;
  std::uint64_t no_damage = 0;
  std::uint64_t dead_lettered = 0;

  /// Names of the identities that do not hold (empty when consistent):
  ///   downloaded == unique_images + duplicate_images
  ///   downloaded == relevant + not_relevant
  ///   downloaded == with_damage + no_damage
  ///   with_damage == severe + mild
  ///   unique_urls == downloaded + failed + dead_lettered
  std::vector<std::string> violated_identities() const;

  StageAccounting& operator+=(const StageAccounting& o);
  friend bool operator==(const StageAccounting&, const StageAccounting&) = default;
};

struct TimeBucket {
  Timestamp bucket_start{};
  StageAccounting counts;
};

/// Image states keyed by image_id; every mutation is atomic per store.
class StateStore {
 public:
  /// Returns false (and leaves the store unchanged) if the id exists.
  bool insert(ImageState state);
  bool contains(const std::string& image_id) const;
  std::optional<ImageState> get(const std::string& image_id) const;
  /// Applies `fn` under the store lock. Throws NotFoundError for unknown ids.
  void update(const std::string& image_id, const std::function<void(ImageState&)>& fn);
  /// All states ordered by seq.
  std::vector<ImageState> snapshot() const;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, ImageState> states_;
};

/// Append-only line-delimited event log: {image_id, event, payload, ts}.
class EventLog {
 public:
  EventLog() = default;
  explicit EventLog(std::ostream* out) : out_(out) {}
  void append(const std::string& image_id, const std::string& event,
              const nlohmann::json& payload);
  std::size_t count() const;

 private:
  mutable std::mutex mu_;
  std::ostream* out_ = nullptr;
  std::size_t count_ = 0;
};

/// Rebuilds image states from an event log. Events set fields rather than
/// accumulate, so replaying duplicated lines yields the same states.
std::vector<ImageState> replay_event_log(std::istream& in);

struct IngestStats {
  ParseStats parse;
  std::uint64_t filtered_out = 0;  // well-formed tweets without a keyword match
  std::uint64_t url_refs = 0;
  std::uint64_t urls_dropped = 0;  // syntactically invalid media URLs
};

struct PipelineResult {
  StageAccounting accounting;
  IngestStats ingest;
  std::map<std::string, std::uint64_t> fetch_failures;  // by FailureReason name
  std::map<std::string, std::uint64_t> dead_letter_reasons;  // by stage
  std::vector<TimeBucket> buckets;
  std::vector<ImageState> states;  // ordered by seq
  std::vector<DeadLetter> dead_letters;
  std::vector<std::pair<Timestamp, std::string>> failed_urls;  // first_seen, url
  DedupIndex index;
};

struct PipelineDeps {
  Fetcher& fetcher;
  FeatureExtractor& extractor;
  InferenceAdapter& relevance;
  InferenceAdapter& damage;
  EventLog* events = nullptr;
};

/// Runs ingest -> fetch -> dedup -> relevance -> damage over a tweet stream.
/// Fetch and inference run on worker pools behind bounded queues; dedup
/// insertions are applied in stream order so clustering is reproducible.
/// Per-image errors end in dead-letter; only config and source errors throw.
PipelineResult run_pipeline(const PipelineConfig& config, std::istream& source,
                            PipelineDeps deps);

/// Copies each canonical's labels onto its duplicates and flags them as
/// inherited. A dead-lettered canonical dead-letters its duplicates.
/// Throws ContractViolation if a live canonical is not fully classified.
void propagate_cluster_labels(StateStore& store);
void propagate_cluster_labels(std::vector<ImageState>& states);

/// Run-level accounting over final states (tweets/URLs/failures are passed in).
StageAccounting account(std::span<const ImageState> states, std::uint64_t total_tweets,
                        std::uint64_t unique_urls, std::uint64_t failed);

/// Half-open buckets [start, start + width) aligned to multiples of `width`
/// since the epoch, spanning first to last first_seen contiguously. Only
/// image-level counters and `failed` are bucketed.
std::vector<TimeBucket> bucketize(std::span<const ImageState> states,
                                  std::chrono::milliseconds width,
                                  std::span<const Timestamp> failed_first_seen = {});

nlohmann::json accounting_json(const PipelineResult& result);
nlohmann::json to_json(const StageAccounting& a);
std::string accounting_csv(const StageAccounting& a);
std::string timeseries_csv(std::span<const TimeBucket> buckets);
nlohmann::json to_json(const ImageState& s);
ImageState image_state_from_json(const nlohmann::json& j);

/// Writes accounting.json, accounting.csv, timeseries.csv, states.jsonl,
/// dead_letter.jsonl and index.bin into `dir`.
void write_run_outputs(const PipelineResult& result, const std::filesystem::path& dir);
std::vector<ImageState> load_states(const std::filesystem::path& states_jsonl);

}  // namespace triage
