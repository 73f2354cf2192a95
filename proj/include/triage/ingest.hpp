#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <functional>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "triage/common.hpp"

namespace triage {

struct TweetRecord {
  std::string tweet_id;
  Timestamp created_at{};
  std::string text;
  std::string author_id;
  std::vector<std::string> image_urls;
  bool is_retweet = false;
};

struct ImageUrlRef {
  std::string url;  // canonical form
  std::string first_tweet_id;
  Timestamp first_seen_at{};
};

/// Case-insensitive keyword matcher. Holds the collection terms used for the
/// Hurricane Dorian stream unless configured otherwise.
class KeywordFilter {
 public:
  KeywordFilter();
  explicit KeywordFilter(std::vector<std::string> keywords);

  static const std::vector<std::string>& default_keywords();

  const std::vector<std::string>& keywords() const { return keywords_; }

  /// True iff some keyword occurs in `text` bounded on both sides by a
  /// non-word character or the string edge. '#' and '@' are non-word, so
  /// "#HurricaneDorian" matches "HurricaneDorian". Runs of whitespace in
  /// the text compare equal to a single space in multi-word keywords.
  bool matches(std::string_view text) const;

 private:
  std::vector<std::string> keywords_;  // as configured
  std::vector<std::string> folded_;    // lower-cased, whitespace-collapsed
};

inline bool matches_keywords(std::string_view text, const KeywordFilter& filter) {
  return filter.matches(text);
}

/// Returns the canonical form of an absolute URL, or nullopt if the URL is
/// not syntactically valid. Lower-cases scheme and host, drops default ports
/// and fragments, strips a trailing ":<label>" media-size suffix from the
/// path, and keeps path and query otherwise verbatim.
std::optional<std::string> canonicalize_url(std::string_view url);

struct ExtractResult {
  std::vector<ImageUrlRef> refs;
  std::size_t dropped = 0;
};

ExtractResult extract_image_urls(const TweetRecord& record);

struct ParseStats {
  std::size_t lines_in = 0;
  std::size_t records_out = 0;
  std::size_t skipped = 0;
};

/// Reads line-delimited JSON tweet records. Malformed lines (bad JSON,
/// missing or mistyped fields, unparseable timestamp, empty or repeated
/// tweet_id) are skipped and counted. Blank lines are ignored entirely.
/// Throws InputError if the stream is unreadable.
ParseStats parse_stream(std::istream& source,
                        const std::function<void(TweetRecord&&)>& sink);

struct ParsedStream {
  std::vector<TweetRecord> records;
  ParseStats stats;
};

ParsedStream parse_stream(std::istream& source);

/// Parses a single replay line. Returns nullopt when the line is malformed.
std::optional<TweetRecord> parse_tweet_line(std::string_view line);

enum class UrlRegistration { Unique, DuplicateUrl };

/// Set of canonical URLs seen so far. Insert-if-absent is linearizable:
/// among concurrent registrations of one URL exactly one observes Unique.
class UrlIndex {
 public:
  UrlRegistration register_url(const ImageUrlRef& ref);
  bool contains(const std::string& url) const;

  std::size_t count_total_refs() const { return total_.load(); }
  std::size_t count_unique() const { return unique_.load(); }

 private:
  static constexpr std::size_t kShards = 16;
  struct Shard {
    mutable std::mutex mu;
    std::unordered_set<std::string> seen;
  };
  Shard& shard_for(const std::string& url) const;

  mutable std::array<Shard, kShards> shards_;
  std::atomic<std::size_t> total_{0};
  std::atomic<std::size_t> unique_{0};
};

inline UrlRegistration register_url(const ImageUrlRef& ref, UrlIndex& index) {
  return index.register_url(ref);
}

}  // namespace triage
