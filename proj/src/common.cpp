#include "triage/common.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>

namespace triage {
namespace {

bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  for (std::size_t i = pos; i < pos + len; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  auto [p, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
  return ec == std::errc{};
}

}  // namespace

Timestamp parse_iso8601(std::string_view s) {
  using namespace std::chrono;
  int y, mo, d, h, mi, sec;
  auto fail = [&]() -> Timestamp {
    throw InputError("invalid ISO-8601 timestamp: '" + std::string(s) + "'");
  };
  if (!read_int(s, 0, 4, y) || s.size() < 19 || s[4] != '-' ||
      !read_int(s, 5, 2, mo) || s[7] != '-' || !read_int(s, 8, 2, d) ||
      (s[10] != 'T' && s[10] != ' ') || !read_int(s, 11, 2, h) ||
      s[13] != ':' || !read_int(s, 14, 2, mi) || s[16] != ':' ||
      !read_int(s, 17, 2, sec)) {
    return fail();
  }
  std::size_t pos = 19;
  int millis = 0;
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      if (digits < 3) millis = millis * 10 + (s[pos] - '0');
      ++digits;
      ++pos;
    }
    if (digits == 0) return fail();
    for (int i = digits; i < 3; ++i) millis *= 10;
  }
  int offset_min = 0;
  if (pos < s.size() && s[pos] == 'Z') {
    ++pos;
  } else if (pos < s.size() && (s[pos] == '+' || s[pos] == '-')) {
    int sign = s[pos] == '-' ? -1 : 1;
    int oh, om;
    if (!read_int(s, pos + 1, 2, oh)) return fail();
    std::size_t mpos = pos + 3;
    if (mpos < s.size() && s[mpos] == ':') ++mpos;
    if (!read_int(s, mpos, 2, om)) return fail();
    offset_min = sign * (oh * 60 + om);
    pos = mpos + 2;
  } else {
    return fail();
  }
  if (pos != s.size()) return fail();

  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                     day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 60) return fail();
  auto tp = sys_days{ymd} + hours{h} + minutes{mi} + seconds{sec} +
            milliseconds{millis} - minutes{offset_min};
  return time_point_cast<milliseconds>(tp);
}

std::string format_iso8601(Timestamp ts) {
  using namespace std::chrono;
  auto day_point = floor<days>(ts);
  year_month_day ymd{day_point};
  auto rem = ts - day_point;
  auto h = duration_cast<hours>(rem);
  rem -= h;
  auto m = duration_cast<minutes>(rem);
  rem -= m;
  auto s = duration_cast<seconds>(rem);
  rem -= s;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ",
                static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()), static_cast<int>(h.count()),
                static_cast<int>(m.count()), static_cast<int>(s.count()),
                static_cast<int>(rem.count()));
  return buf;
}

std::string to_lower_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace triage
