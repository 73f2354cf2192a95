#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "triage/common.hpp"
#include "triage/ingest.hpp"
#include "triage/labels.hpp"

namespace triage {

using Sha256 = std::array<std::uint8_t, 32>;

Sha256 sha256(std::string_view bytes);
std::string to_hex(const Sha256& digest);

struct ImageRecord {
  std::string image_id;    // first 16 hex chars of content_hash
  std::string source_url;  // canonical
  std::size_t bytes_len = 0;
  Sha256 content_hash{};
  Timestamp fetched_at{};
  std::vector<std::string> tweet_ids;
  std::string bytes;
};

enum class FailureReason { NotFound, Timeout, ConnectionError, HostError, Other };

std::string_view to_string(FailureReason r);
std::optional<FailureReason> parse_failure_reason(std::string_view s);

struct FetchFailure {
  FailureReason reason = FailureReason::Other;
  std::string url;
  std::string detail;
};

struct FetchOutcome {
  std::variant<ImageRecord, FetchFailure> result;
  int attempts = 0;

  bool ok() const { return std::holds_alternative<ImageRecord>(result); }
  const ImageRecord& image() const { return std::get<ImageRecord>(result); }
  ImageRecord& image() { return std::get<ImageRecord>(result); }
  const FetchFailure& failure() const { return std::get<FetchFailure>(result); }
};

/// One network (or replay) attempt: payload bytes or a classified failure.
struct FetchAttempt {
  std::optional<std::string> bytes;
  FailureReason reason = FailureReason::Other;
  std::string detail;
};

/// Resolves canonical URLs to bytes. Implementations are safe for
/// concurrent use.
class Fetcher {
 public:
  virtual ~Fetcher() = default;
  virtual FetchAttempt attempt(const std::string& url, std::chrono::milliseconds deadline) = 0;
};

struct FetchPolicy {
  std::chrono::milliseconds deadline{10'000};
  int max_attempts = 2;
};

/// Fetches one URL. Timeout and ConnectionError are retried until
/// policy.max_attempts is reached; other failures are final. Never throws
/// for per-URL problems.
FetchOutcome fetch(const ImageUrlRef& ref, Fetcher& fetcher, const FetchPolicy& policy = {});

struct ManifestEntry {
  std::string url;  // canonical
  std::optional<std::filesystem::path> file;  // resolved against manifest dir
  std::optional<std::vector<double>> feature;
  std::optional<FailureReason> fail_as;
  std::optional<RelevanceLabel> stub_relevance;
  std::optional<DamageLabel> stub_damage;
};

/// Replay manifest: one JSON object per line keyed by URL. Shared by the
/// replay fetcher, the replay feature extractor and the inference stub.
class Manifest {
 public:
  /// Throws ConfigError for unreadable files, schema violations and
  /// duplicate URLs.
  static std::shared_ptr<const Manifest> load(const std::filesystem::path& path);
  static std::shared_ptr<const Manifest> parse(std::istream& in,
                                               const std::filesystem::path& base_dir);

  const ManifestEntry* find(const std::string& canonical_url) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<ManifestEntry>& entries() const { return entries_; }

 private:
  std::vector<ManifestEntry> entries_;
  std::unordered_map<std::string, std::size_t> by_url_;
};

/// Deterministic bytes synthesized for manifest rows without a file.
std::string synthetic_payload(const std::string& canonical_url);

class ReplayFetcher final : public Fetcher {
 public:
  explicit ReplayFetcher(std::shared_ptr<const Manifest> manifest);
  FetchAttempt attempt(const std::string& url, std::chrono::milliseconds deadline) override;
  const Manifest& manifest() const { return *manifest_; }

 private:
  std::shared_ptr<const Manifest> manifest_;
};

ReplayFetcher replay_fetcher(const std::filesystem::path& manifest_path);

/// Blocks while `limit` holders are active.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(std::size_t limit) : limit_(limit == 0 ? 1 : limit) {}
  void acquire();
  void release();

  class Guard {
   public:
    explicit Guard(InFlightLimiter& l) : l_(l) { l_.acquire(); }
    ~Guard() { l_.release(); }
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;

   private:
    InFlightLimiter& l_;
  };

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t limit_;
  std::size_t active_ = 0;
};

/// Plain-HTTP fetcher backed by cpp-httplib.
class HttpFetcher final : public Fetcher {
 public:
  explicit HttpFetcher(std::size_t max_in_flight = 32) : limiter_(max_in_flight) {}
  FetchAttempt attempt(const std::string& url, std::chrono::milliseconds deadline) override;

 private:
  InFlightLimiter limiter_;
};

}  // namespace triage
