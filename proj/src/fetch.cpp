#include "triage/fetch.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace triage {

using nlohmann::json;

Sha256 sha256(std::string_view bytes) {
  Sha256 out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  return out;
}

std::string to_hex(const Sha256& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : digest) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xf]);
  }
  return s;
}

std::string_view to_string(FailureReason r) {
  switch (r) {
    case FailureReason::NotFound: return "NotFound";
    case FailureReason::Timeout: return "Timeout";
    case FailureReason::ConnectionError: return "ConnectionError";
    case FailureReason::HostError: return "HostError";
    case FailureReason::Other: return "Other";
  }
  return "Other";
}

std::optional<FailureReason> parse_failure_reason(std::string_view s) {
  for (auto r : {FailureReason::NotFound, FailureReason::Timeout, FailureReason::ConnectionError,
                 FailureReason::HostError, FailureReason::Other}) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

FetchOutcome fetch(const ImageUrlRef& ref, Fetcher& fetcher, const FetchPolicy& policy) {
  FetchOutcome out;
  const int max_attempts = std::max(1, policy.max_attempts);
  FetchAttempt last;
  while (out.attempts < max_attempts) {
    ++out.attempts;
    try {
      last = fetcher.attempt(ref.url, policy.deadline);
    } catch (const std::exception& e) {
      last = FetchAttempt{std::nullopt, FailureReason::Other, e.what()};
    }
    if (last.bytes) {
      if (last.bytes->empty()) {
        last = FetchAttempt{std::nullopt, FailureReason::Other, "empty body"};
        break;
      }
      ImageRecord rec;
      rec.content_hash = sha256(*last.bytes);
      rec.image_id = to_hex(rec.content_hash).substr(0, 16);
      rec.source_url = ref.url;
      rec.bytes_len = last.bytes->size();
      rec.fetched_at = now_ms();
      rec.tweet_ids.push_back(ref.first_tweet_id);
      rec.bytes = std::move(*last.bytes);
      out.result = std::move(rec);
      return out;
    }
    if (last.reason != FailureReason::Timeout && last.reason != FailureReason::ConnectionError)
      break;
  }
  out.result = FetchFailure{last.reason, ref.url, last.detail};
  return out;
}

namespace {

template <typename T, typename Parse>
std::optional<T> optional_enum(const json& row, const char* key, Parse parse, std::size_t line) {
  auto it = row.find(key);
  if (it == row.end() || it->is_null()) return std::nullopt;
  if (!it->is_string())
    throw ConfigError("manifest line " + std::to_string(line) + ": '" + key + "' must be a string");
  auto v = parse(it->get<std::string>());
  if (!v)
    throw ConfigError("manifest line " + std::to_string(line) + ": bad value for '" + key + "'");
  return v;
}

}  // namespace

std::shared_ptr<const Manifest> Manifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest: " + path.string());
  return parse(in, path.parent_path());
}

std::shared_ptr<const Manifest> Manifest::parse(std::istream& in,
                                                const std::filesystem::path& base_dir) {
  auto m = std::make_shared<Manifest>();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row = json::parse(line, nullptr, false);
    auto where = "manifest line " + std::to_string(lineno);
    if (!row.is_object()) throw ConfigError(where + ": not a JSON object");
    auto url = row.find("url");
    if (url == row.end() || !url->is_string()) throw ConfigError(where + ": missing url");
    auto canon = canonicalize_url(url->get<std::string>());
    if (!canon) throw ConfigError(where + ": invalid url");

    ManifestEntry e;
    e.url = *canon;
    if (auto f = row.find("file"); f != row.end() && !f->is_null()) {
      if (!f->is_string()) throw ConfigError(where + ": 'file' must be a string");
      e.file = base_dir / f->get<std::string>();
    }
    if (auto f = row.find("feature"); f != row.end() && !f->is_null()) {
      if (!f->is_array()) throw ConfigError(where + ": 'feature' must be an array");
      std::vector<double> v;
      v.reserve(f->size());
      for (const auto& x : *f) {
        if (!x.is_number()) throw ConfigError(where + ": 'feature' must hold numbers");
        v.push_back(x.get<double>());
      }
      e.feature = std::move(v);
    }
    e.fail_as = optional_enum<FailureReason>(row, "fail_as", parse_failure_reason, lineno);
    e.stub_relevance = optional_enum<RelevanceLabel>(row, "stub_relevance", parse_relevance, lineno);
    e.stub_damage = optional_enum<DamageLabel>(row, "stub_damage", parse_damage, lineno);

    if (!m->by_url_.emplace(e.url, m->entries_.size()).second)
      throw ConfigError(where + ": duplicate url " + e.url);
    m->entries_.push_back(std::move(e));
  }
  if (in.bad()) throw ConfigError("read error on manifest");
  return m;
}

const ManifestEntry* Manifest::find(const std::string& canonical_url) const {
  auto it = by_url_.find(canonical_url);
  return it == by_url_.end() ? nullptr : &entries_[it->second];
}

std::string synthetic_payload(const std::string& canonical_url) {
  return "TRIAGE-SYNTHETIC-IMAGE\n" + canonical_url;
}

ReplayFetcher::ReplayFetcher(std::shared_ptr<const Manifest> manifest)
    : manifest_(std::move(manifest)) {}

FetchAttempt ReplayFetcher::attempt(const std::string& url, std::chrono::milliseconds) {
  const ManifestEntry* e = manifest_->find(url);
  if (!e) return {std::nullopt, FailureReason::NotFound, "not in manifest"};
  if (e->fail_as) return {std::nullopt, *e->fail_as, "injected failure"};
  if (!e->file) return {synthetic_payload(e->url), FailureReason::Other, {}};
  std::ifstream in(*e->file, std::ios::binary);
  if (!in) return {std::nullopt, FailureReason::NotFound, "missing file " + e->file->string()};
  std::ostringstream ss;
  ss << in.rdbuf();
  return {ss.str(), FailureReason::Other, {}};
}

ReplayFetcher replay_fetcher(const std::filesystem::path& manifest_path) {
  return ReplayFetcher(Manifest::load(manifest_path));
}

void InFlightLimiter::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return active_ < limit_; });
  ++active_;
}

void InFlightLimiter::release() {
  {
    std::lock_guard lock(mu_);
    --active_;
  }
  cv_.notify_one();
}

}  // namespace triage
