#include "triage/ingest.hpp"

#include <cctype>
#include <istream>
#include <nlohmann/json.hpp>
#include <unordered_set>

namespace triage {
namespace {

using nlohmann::json;

bool is_word_char(char c) {
  auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) || c == '_' || u >= 0x80;
}

std::string fold(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

bool valid_scheme(std::string_view s) {
  if (s.empty() || !std::isalpha(static_cast<unsigned char>(s[0]))) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '+' && c != '-' && c != '.')
      return false;
  }
  return true;
}

bool valid_host(std::string_view h) {
  if (h.empty()) return false;
  if (h.front() == '[') return h.back() == ']' && h.size() > 2;
  for (char c : h) {
    auto u = static_cast<unsigned char>(c);
    if (!(std::isalnum(u) || c == '-' || c == '.' || c == '_' || c == '%' || u >= 0x80))
      return false;
  }
  return true;
}

bool has_space_or_ctl(std::string_view s) {
  for (char c : s) {
    auto u = static_cast<unsigned char>(c);
    if (u <= 0x20 || u == 0x7f) return true;
  }
  return false;
}

std::string_view default_port(std::string_view scheme) {
  if (scheme == "http" || scheme == "ws") return "80";
  if (scheme == "https" || scheme == "wss") return "443";
  if (scheme == "ftp") return "21";
  return {};
}

// Strips ":<label>" from the end of the path's last segment (e.g. ":large").
std::string_view strip_media_suffix(std::string_view path) {
  auto slash = path.rfind('/');
  auto colon = path.rfind(':');
  if (colon == std::string_view::npos || (slash != std::string_view::npos && colon < slash))
    return path;
  auto label = path.substr(colon + 1);
  if (label.empty()) return path;
  for (char c : label) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return path;
  }
  return path.substr(0, colon);
}

}  // namespace

const std::vector<std::string>& KeywordFilter::default_keywords() {
  static const std::vector<std::string> kDefaults = {
      "HurricaneDorian",        "Dorian",          "DorianAlert",
      "Alerts_Dorian",          "PuertoRico",      "DorianMissing",
      "DorianDeaths",           "HurricaneDorianMissing",
      "HurricaneDorianDeaths",  "Dorian Missing",  "Hurricane Dorian Missing",
      "Dorian Found",           "DorianFound"};
  return kDefaults;
}

KeywordFilter::KeywordFilter() : KeywordFilter(default_keywords()) {}

KeywordFilter::KeywordFilter(std::vector<std::string> keywords)
    : keywords_(std::move(keywords)) {
  for (const auto& k : keywords_) {
    auto f = fold(k);
    if (!f.empty()) folded_.push_back(std::move(f));
  }
  if (folded_.empty()) throw ConfigError("keyword filter must not be empty");
}

bool KeywordFilter::matches(std::string_view text) const {
  const std::string hay = fold(text);
  for (const auto& kw : folded_) {
    for (auto pos = hay.find(kw); pos != std::string::npos; pos = hay.find(kw, pos + 1)) {
      bool left_ok = pos == 0 || !is_word_char(hay[pos - 1]) || !is_word_char(kw.front());
      auto end = pos + kw.size();
      bool right_ok = end == hay.size() || !is_word_char(hay[end]) || !is_word_char(kw.back());
      if (left_ok && right_ok) return true;
    }
  }
  return false;
}

std::optional<std::string> canonicalize_url(std::string_view url) {
  if (url.empty() || has_space_or_ctl(url)) return std::nullopt;
  auto sep = url.find("://");
  if (sep == std::string_view::npos) return std::nullopt;
  auto scheme = url.substr(0, sep);
  if (!valid_scheme(scheme)) return std::nullopt;

  auto rest = url.substr(sep + 3);
  if (auto hash = rest.find('#'); hash != std::string_view::npos) rest = rest.substr(0, hash);

  auto auth_end = rest.find_first_of("/?");
  auto authority = rest.substr(0, auth_end);
  auto tail = auth_end == std::string_view::npos ? std::string_view{} : rest.substr(auth_end);

  std::string_view userinfo;
  if (auto at = authority.rfind('@'); at != std::string_view::npos) {
    userinfo = authority.substr(0, at + 1);
    authority = authority.substr(at + 1);
  }
  std::string_view host = authority;
  std::string_view port;
  auto colon = authority.rfind(':');
  auto bracket = authority.rfind(']');
  if (colon != std::string_view::npos &&
      (bracket == std::string_view::npos || colon > bracket)) {
    host = authority.substr(0, colon);
    port = authority.substr(colon + 1);
    for (char c : port) {
      if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
    }
  }
  if (!valid_host(host)) return std::nullopt;

  const std::string lscheme = to_lower_ascii(scheme);
  std::string out = lscheme + "://";
  out += userinfo;
  out += to_lower_ascii(host);
  if (!port.empty() && port != default_port(lscheme)) {
    out += ':';
    out += port;
  }

  auto q = tail.find('?');
  auto path = tail.substr(0, q);
  auto query = q == std::string_view::npos ? std::string_view{} : tail.substr(q);
  if (query.empty()) path = strip_media_suffix(path);
  out += path;
  out += query;
  return out;
}

ExtractResult extract_image_urls(const TweetRecord& record) {
  ExtractResult result;
  for (const auto& raw : record.image_urls) {
    if (auto canon = canonicalize_url(raw)) {
      result.refs.push_back({std::move(*canon), record.tweet_id, record.created_at});
    } else {
      ++result.dropped;
    }
  }
  return result;
}

std::optional<TweetRecord> parse_tweet_line(std::string_view line) {
  json j = json::parse(line.begin(), line.end(), nullptr, /*allow_exceptions=*/false);
  if (!j.is_object()) return std::nullopt;
  static constexpr std::string_view kStringFields[] = {"tweet_id", "created_at", "text",
                                                       "author_id"};
  for (auto f : kStringFields) {
    auto it = j.find(f);
    if (it == j.end() || !it->is_string()) return std::nullopt;
  }
  auto urls = j.find("image_urls");
  auto rt = j.find("is_retweet");
  if (urls == j.end() || !urls->is_array() || rt == j.end() || !rt->is_boolean())
    return std::nullopt;

  TweetRecord r;
  r.tweet_id = j["tweet_id"].get<std::string>();
  if (r.tweet_id.empty()) return std::nullopt;
  try {
    r.created_at = parse_iso8601(j["created_at"].get<std::string>());
  } catch (const InputError&) {
    return std::nullopt;
  }
  r.text = j["text"].get<std::string>();
  r.author_id = j["author_id"].get<std::string>();
  for (const auto& u : *urls) {
    if (!u.is_string()) return std::nullopt;
    r.image_urls.push_back(u.get<std::string>());
  }
  r.is_retweet = rt->get<bool>();
  return r;
}

ParseStats parse_stream(std::istream& source,
                        const std::function<void(TweetRecord&&)>& sink) {
  if (!source.good() && !source.eof()) throw InputError("tweet source is not readable");
  ParseStats stats;
  std::unordered_set<std::string> ids;
  std::string line;
  while (std::getline(source, line)) {
    bool blank = true;
    for (char c : line) {
      if (!std::isspace(static_cast<unsigned char>(c))) {
        blank = false;
        break;
      }
    }
    if (blank) continue;
    ++stats.lines_in;
    auto rec = parse_tweet_line(line);
    if (!rec || !ids.insert(rec->tweet_id).second) {
      ++stats.skipped;
      continue;
    }
    ++stats.records_out;
    sink(std::move(*rec));
  }
  if (source.bad()) throw InputError("read error on tweet source");
  return stats;
}

ParsedStream parse_stream(std::istream& source) {
  ParsedStream out;
  out.stats = parse_stream(source, [&](TweetRecord&& r) { out.records.push_back(std::move(r)); });
  return out;
}

UrlIndex::Shard& UrlIndex::shard_for(const std::string& url) const {
  return shards_[fnv1a64(url) % kShards];
}

UrlRegistration UrlIndex::register_url(const ImageUrlRef& ref) {
  auto& shard = shard_for(ref.url);
  bool inserted;
  {
    std::lock_guard lock(shard.mu);
    inserted = shard.seen.insert(ref.url).second;
  }
  total_.fetch_add(1);
  if (inserted) unique_.fetch_add(1);
  return inserted ? UrlRegistration::Unique : UrlRegistration::DuplicateUrl;
}

bool UrlIndex::contains(const std::string& url) const {
  auto& shard = shard_for(url);
  std::lock_guard lock(shard.mu);
  return shard.seen.contains(url);
}

}  // namespace triage
