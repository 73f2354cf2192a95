// Regenerates the checked-in fixtures. Output is deterministic; rerunning it
// must leave the working tree unchanged.
//
//   make_fixtures --judgments tests/data/deployment_judgments.jsonl --corpus data/corpus
#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "triage/judgment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace triage;

namespace {

// Deployment cells: rows human {Severe, Mild, None}, columns machine.
constexpr std::uint64_t kCells[3][3] = {{710, 384, 357}, {113, 881, 355}, {721, 5233, 19296}};
// DontKnow answers by the machine label shown to the assessor.
constexpr std::uint64_t kDontKnow[3] = {131, 207, 748};

constexpr DamageLabel kOrder[3] = {DamageLabel::Severe, DamageLabel::Mild, DamageLabel::None};

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_deployment_judgments(const fs::path& path) {
  std::vector<JudgmentRecord> rows;
  const Timestamp base = parse_iso8601("2019-09-03T12:00:00Z");
  auto push = [&](DamageLabel machine, Verdict v, std::optional<Severity> sev) {
    JudgmentRecord j;
    j.machine_damage = machine;
    j.verdict = v;
    j.severity = sev;
    rows.push_back(std::move(j));
  };
  for (int h = 0; h < 3; ++h) {
    for (int m = 0; m < 3; ++m) {
      for (std::uint64_t i = 0; i < kCells[h][m]; ++i) {
        if (h == 2) push(kOrder[m], Verdict::NoDamage, std::nullopt);
        else push(kOrder[m], Verdict::Damage, h == 0 ? Severity::Severe : Severity::Mild);
      }
    }
  }
  for (int m = 0; m < 3; ++m) {
    for (std::uint64_t i = 0; i < kDontKnow[m]; ++i) push(kOrder[m], Verdict::DontKnow, std::nullopt);
  }
  // Interleave cells so the file reads like a campaign export, not a table.
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t i = 0; i < rows.size(); ++i) order.emplace_back(keyed_hash(2019, "deployment-order", std::to_string(i)), i);
  std::sort(order.begin(), order.end());

  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto j = rows[order[k].second];
    j.image_id = hex16(keyed_hash(2019, "deployment-image", std::to_string(k)));
    j.task_id = "task-" + j.image_id;
    j.assessor_id = "assessor-" + std::to_string(1 + k % 28);
    j.submitted_at = base + std::chrono::seconds(7 * k);
    out << to_json_line(j) << '\n';
  }
  std::printf("%s: %zu judgments\n", path.c_str(), rows.size());
}

// ---- synthetic corpus ----

constexpr std::size_t kDim = 64;
constexpr std::size_t kUrls = 1230;
constexpr std::size_t kTweets = 2000;

struct Image {
  std::string url;
  std::optional<std::string> fail_as;
  std::vector<double> feature;
  bool bad_feature = false;
  bool missing_stub = false;
  std::string relevance;
  std::string damage;
};

void write_corpus(const fs::path& dir) {
  std::mt19937_64 rng(20190901);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> spread(0.0, 10.0);
  std::normal_distribution<double> jitter(0.0, 0.8);

  std::vector<Image> images;
  std::vector<std::size_t> originals;
  for (std::size_t i = 0; i < kUrls; ++i) {
    Image im;
    im.url = "https://pbs.twimg.com/media/DRN" + std::to_string(100000 + i) + ".jpg";
    const double u = unit(rng);
    if (u < 0.012) im.fail_as = "NotFound";
    else if (u < 0.020) im.fail_as = "Timeout";
    else if (u < 0.026) im.fail_as = "HostError";
    else if (u < 0.030) im.fail_as = "ConnectionError";

    const bool dup = !originals.empty() && unit(rng) < 0.16;
    if (dup) {
      const auto& src = images[originals[static_cast<std::size_t>(unit(rng) * originals.size())]];
      im.feature = src.feature;
      for (auto& x : im.feature) x += jitter(rng);
      im.relevance = src.relevance;
      im.damage = src.damage;
    } else {
      im.feature.resize(kDim);
      for (auto& x : im.feature) x = spread(rng);
      im.relevance = unit(rng) < 0.72 ? "relevant" : "junk";
      const double d = unit(rng);
      im.damage = im.relevance == "junk" ? "none" : d < 0.25 ? "severe" : d < 0.5 ? "mild" : "none";
      if (!im.fail_as) originals.push_back(i);
    }
    if (!im.fail_as && i % 211 == 17) im.bad_feature = true;
    if (!im.fail_as && i % 307 == 40) im.missing_stub = true;
    images.push_back(std::move(im));
  }

  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.jsonl", std::ios::binary);
    for (const auto& im : images) {
      json row{{"url", im.url}, {"file", nullptr}};
      if (im.fail_as) row["fail_as"] = *im.fail_as;
      json feat = json::array();
      const std::size_t n = im.bad_feature ? kDim - 1 : kDim;
      for (std::size_t k = 0; k < n; ++k) feat.push_back(std::round(im.feature[k] * 1e4) / 1e4);
      row["feature"] = feat;
      if (!im.missing_stub) {
        row["stub_relevance"] = im.relevance;
        row["stub_damage"] = im.damage;
      }
      out << row.dump() << '\n';
    }
  }

  // Tweets: every URL is first posted once in URL order, then shared again.
  static const char* kTexts[] = {
      "Roof torn off on Abaco #HurricaneDorian", "Still waiting for news from Marsh Harbour #Dorian",
      "Flooding on our street right now #DorianAlert", "Praying for the Bahamas. Hurricane Dorian Missing",
      "Shelter update for #PuertoRico residents", "Dorian Found: family reunited in Freeport",
      "#HurricaneDorianDeaths toll rises overnight", "Boats piled up in the harbour #Dorian",
      "Power lines down near the coast #Alerts_Dorian", "Look at this storm surge #HurricaneDorian"};
  static const char* kOffTopic[] = {"Lunch with friends today", "New phone who dis",
                                    "Game night recap", "Sunset at the pier"};

  const Timestamp start = parse_iso8601("2019-08-30T00:00:00Z");
  std::ofstream out(dir / "tweets.jsonl", std::ios::binary);
  std::size_t next_url = 0;
  std::int64_t clock_s = 0;
  for (std::size_t t = 0; t < kTweets; ++t) {
    clock_s += 200 + static_cast<std::int64_t>(unit(rng) * 500);
    const auto created = start + std::chrono::seconds(clock_s);
    json tw{{"tweet_id", std::to_string(1167000000000000000ULL + t)},
            {"created_at", format_iso8601(created)},
            {"author_id", "u" + std::to_string(static_cast<int>(unit(rng) * 600))},
            {"is_retweet", false}};
    const double kind = unit(rng);
    json urls = json::array();
    std::string text = kTexts[t % std::size(kTexts)];
    if (kind < 0.04) {
      text = kOffTopic[t % std::size(kOffTopic)];
      urls.push_back("https://pbs.twimg.com/media/OFF" + std::to_string(t) + ".jpg");
    } else if (kind < 0.14) {
      // text only
    } else if (next_url < kUrls && (kind < 0.80 || t + (kUrls - next_url) >= kTweets)) {
      urls.push_back(images[next_url++].url);
      if (next_url < kUrls && unit(rng) < 0.12) {
        // Size suffix and fragment are dropped during canonicalization.
        urls.push_back(images[next_url++].url + ":large");
      }
    } else if (next_url > 0) {
      tw["is_retweet"] = unit(rng) < 0.7;
      const auto& im = images[static_cast<std::size_t>(unit(rng) * next_url)];
      urls.push_back(unit(rng) < 0.3 ? "HTTPS://PBS.TWIMG.COM" + im.url.substr(21) + "#m" : im.url);
      if (tw["is_retweet"].get<bool>()) text = "RT " + text;
    }
    tw["text"] = text;
    tw["image_urls"] = urls;
    out << tw.dump() << '\n';
    if (t % 397 == 101) out << "{\"tweet_id\": \"broken\", \"created_at\": \n";
  }
  std::printf("%s: %zu urls (%zu posted), %zu tweets\n", dir.c_str(), kUrls, next_url, kTweets);

  std::ofstream conf(dir / "pipeline.conf", std::ios::binary);
  conf << "# Replay configuration for the bundled corpus.\n"
          "[dedup]\n"
          "distance_threshold = 20.0\n"
          "dimension = 64\n"
          "\n"
          "[stub]\n"
          "seed = 7\n"
          "relevance_flip_rate = 0.0\n"
          "\n"
          "[pipeline]\n"
          "bucket_width_hours = 24\n"
          "fetch_workers = 8\n"
          "inference_workers = 4\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regenerate checked-in fixtures"};
  std::string judgments, corpus;
  app.add_option("--judgments", judgments, "deployment judgment fixture path");
  app.add_option("--corpus", corpus, "synthetic corpus directory");
  CLI11_PARSE(app, argc, argv);
  if (!judgments.empty()) write_deployment_judgments(judgments);
  if (!corpus.empty()) write_corpus(corpus);
  return 0;
}
