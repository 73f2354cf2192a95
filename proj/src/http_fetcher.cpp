#include <httplib.h>

#include "triage/fetch.hpp"

namespace triage {
namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string target;  // path?query
};

std::optional<SplitUrl> split_http_url(const std::string& url) {
  constexpr std::string_view kHttp = "http://";
  if (url.rfind(kHttp, 0) != 0) return std::nullopt;
  auto slash = url.find('/', kHttp.size());
  auto q = url.find('?', kHttp.size());
  auto cut = std::min(slash, q);
  if (cut == std::string::npos) return SplitUrl{url, "/"};
  std::string target = url.substr(cut);
  if (target.front() == '?') target.insert(target.begin(), '/');
  return SplitUrl{url.substr(0, cut), target};
}

FailureReason classify(httplib::Error err) {
  switch (err) {
    case httplib::Error::ConnectionTimeout:
    case httplib::Error::Read:
      return FailureReason::Timeout;
    case httplib::Error::Connection:
    case httplib::Error::BindIPAddress:
    case httplib::Error::Write:
    case httplib::Error::ProxyConnection:
      return FailureReason::ConnectionError;
    default:
      return FailureReason::Other;
  }
}

}  // namespace

FetchAttempt HttpFetcher::attempt(const std::string& url, std::chrono::milliseconds deadline) {
  auto parts = split_http_url(url);
  if (!parts) return {std::nullopt, FailureReason::Other, "unsupported scheme"};

  InFlightLimiter::Guard guard(limiter_);
  httplib::Client client(parts->origin);
  client.set_connection_timeout(deadline);
  client.set_read_timeout(deadline);
  client.set_write_timeout(deadline);
  client.set_follow_location(true);

  auto res = client.Get(parts->target);
  if (!res) return {std::nullopt, classify(res.error()), httplib::to_string(res.error())};
  const int status = res->status;
  if (status >= 200 && status < 300) return {std::move(res->body), FailureReason::Other, {}};
  if (status == 404 || status == 410) return {std::nullopt, FailureReason::NotFound, "HTTP " + std::to_string(status)};
  if (status == 408 || status == 504) return {std::nullopt, FailureReason::Timeout, "HTTP " + std::to_string(status)};
  if (status >= 500) return {std::nullopt, FailureReason::HostError, "HTTP " + std::to_string(status)};
  return {std::nullopt, FailureReason::Other, "HTTP " + std::to_string(status)};
}

}  // namespace triage
