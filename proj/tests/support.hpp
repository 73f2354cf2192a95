// Shared test helpers: fixture paths, independent oracles and a generated
// replay world with controllable failures.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/dedup.hpp"
#include "triage/evaluation.hpp"
#include "triage/fetch.hpp"
#include "triage/inference.hpp"
#include "triage/judgment.hpp"
#include "triage/pipeline.hpp"

namespace triage::testing {

inline std::filesystem::path source_path(const std::string& rel) {
  return std::filesystem::path(TRIAGE_SOURCE_DIR) / rel;
}

inline std::vector<JudgmentRecord> deployment_judgments() {
  std::ifstream in(source_path("tests/data/deployment_judgments.jsonl"));
  return read_judgments(in);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("triage-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Straight linear scan with no early exit: each vector goes to the cluster
// of the nearest earlier unique when strictly closer than tau.
struct OracleAssignment {
  bool unique;
  std::size_t cluster;
};

inline std::vector<OracleAssignment> brute_force_dedup(const std::vector<std::vector<double>>& vs,
                                                       double tau) {
  std::vector<OracleAssignment> out;
  std::vector<std::size_t> uniques;  // indices into vs, cluster id == position
  for (std::size_t i = 0; i < vs.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < uniques.size(); ++c) {
      double s = 0;
      const auto& u = vs[uniques[c]];
      for (std::size_t k = 0; k < u.size(); ++k) s += (u[k] - vs[i][k]) * (u[k] - vs[i][k]);
      const double d = std::sqrt(s);
      if (d < best) {
        best = d;
        best_c = c;
      }
    }
    if (best < tau) {
      out.push_back({false, best_c});
    } else {
      out.push_back({true, uniques.size()});
      uniques.push_back(i);
    }
  }
  return out;
}

// Random vectors where a share are perturbed copies of earlier ones, so
// both outcomes and near-threshold cases occur.
inline std::vector<std::vector<double>> clustered_vectors(std::size_t n, std::size_t dim, std::size_t bases,
                                                          double spread, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> base(0.0, spread), jit(0.0, noise);
  std::vector<std::vector<double>> centers(bases, std::vector<double>(dim));
  for (auto& c : centers)
    for (auto& x : c) x = base(rng);
  std::uniform_int_distribution<std::size_t> pick(0, bases - 1);
  std::vector<std::vector<double>> out(n);
  for (auto& v : out) {
    v = centers[pick(rng)];
    for (auto& x : v) x += jit(rng);
  }
  return out;
}

// ---- generated replay world ----

struct WorldImage {
  std::string url;
  std::optional<FailureReason> fail;
  bool bad_feature = false;   // wrong dimension -> extract dead-letter
  bool model_error = false;   // relevance model throws -> dead-letter
  std::size_t group = 0;      // near-duplicate group
  RelevanceLabel relevance = RelevanceLabel::Relevant;
  DamageLabel damage = DamageLabel::None;
};

struct WorldOptions {
  std::size_t images = 1000;
  std::size_t groups = 400;
  std::size_t dimension = 32;
  double fail_rate = 0.05;
  double bad_feature_rate = 0.01;
  double model_error_rate = 0.01;
  double repost_rate = 0.3;  // extra tweets reusing an already posted URL
  std::uint64_t seed = 1;
};

/// Fetcher, extractor and classifier over an in-memory table keyed by URL.
class World final : public Fetcher, public FeatureExtractor, public InferenceAdapter {
 public:
  explicit World(WorldOptions o) : opt_(o) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> spread(0.0, 10.0);
    centers_.assign(o.groups, std::vector<double>(o.dimension));
    for (auto& c : centers_)
      for (auto& x : c) x = spread(rng);
    std::uniform_int_distribution<std::size_t> pick(0, o.groups - 1);
    for (std::size_t i = 0; i < o.images; ++i) {
      WorldImage im;
      im.url = "http://img.example/" + std::to_string(o.seed) + "/" + std::to_string(i) + ".jpg";
      const double f = u(rng);
      if (f < o.fail_rate) {
        static constexpr FailureReason kinds[] = {FailureReason::NotFound, FailureReason::Timeout,
                                                  FailureReason::ConnectionError, FailureReason::HostError};
        im.fail = kinds[static_cast<std::size_t>(u(rng) * 4)];
      }
      im.bad_feature = u(rng) < o.bad_feature_rate;
      im.model_error = u(rng) < o.model_error_rate;
      im.group = pick(rng);
      im.relevance = keyed_uniform(o.seed, "rel", std::to_string(im.group)) < 0.7 ? RelevanceLabel::Relevant
                                                                                  : RelevanceLabel::Junk;
      const double d = keyed_uniform(o.seed, "dmg", std::to_string(im.group));
      im.damage = d < 0.2 ? DamageLabel::Severe : d < 0.4 ? DamageLabel::Mild : DamageLabel::None;
      by_url_[im.url] = images_.size();
      images_.push_back(im);
    }
  }

  const std::vector<WorldImage>& images() const { return images_; }
  const WorldImage& image(const std::string& url) const { return images_.at(by_url_.at(url)); }

  /// Tweets posting every image once (in order) plus reposts; all carry a keyword.
  std::string tweets() const {
    std::mt19937_64 rng(opt_.seed ^ 0x5eed);
    std::uniform_real_distribution<double> u(0, 1);
    std::ostringstream out;
    const auto start = parse_iso8601("2019-09-01T00:00:00Z");
    std::size_t posted = 0, t = 0;
    while (posted < images_.size()) {
      std::vector<std::string> urls;
      if (posted > 0 && u(rng) < opt_.repost_rate) {
        urls.push_back(images_[static_cast<std::size_t>(u(rng) * posted)].url);
      } else {
        urls.push_back(images_[posted++].url);
      }
      nlohmann::json j{{"tweet_id", std::to_string(t)},
                       {"created_at", format_iso8601(start + std::chrono::seconds(37 * t))},
                       {"text", "#HurricaneDorian update " + std::to_string(t)},
                       {"author_id", "a"},
                       {"image_urls", urls},
                       {"is_retweet", false}};
      out << j.dump() << '\n';
      ++t;
    }
    return out.str();
  }

  FetchAttempt attempt(const std::string& url, std::chrono::milliseconds) override {
    auto it = by_url_.find(url);
    if (it == by_url_.end()) return {std::nullopt, FailureReason::NotFound, "unknown"};
    const auto& im = images_[it->second];
    if (im.fail) return {std::nullopt, *im.fail, "injected"};
    return {"bytes:" + url, FailureReason::Other, {}};
  }

  std::vector<double> extract(const ImageRecord& rec) override {
    const auto& im = image(rec.source_url);
    std::vector<double> v = centers_[im.group];
    for (std::size_t k = 0; k < v.size(); ++k)
      v[k] += (keyed_uniform(opt_.seed, "jit", rec.source_url + "#" + std::to_string(k)) - 0.5);
    if (im.bad_feature) v.pop_back();
    return v;
  }

  Prediction<RelevanceLabel> classify_relevance(const ImageRecord& rec) override {
    const auto& im = image(rec.source_url);
    if (im.model_error) throw StageError("relevance", "injected model error");
    return {rec.image_id, im.relevance, 0.9, "world", now_ms()};
  }

  Prediction<DamageLabel> classify_damage(const ImageRecord& rec) override {
    return {rec.image_id, image(rec.source_url).damage, 0.8, "world", now_ms()};
  }

 private:
  WorldOptions opt_;
  std::vector<std::vector<double>> centers_;
  std::vector<WorldImage> images_;
  std::unordered_map<std::string, std::size_t> by_url_;
};

// Expected accounting computed straight from the world table: images are
// first posted in index order, groups are far apart and jitter is tiny, so
// the first live member of each group is its canonical.
inline StageAccounting expected_accounting(const World& w, std::uint64_t tweets) {
  StageAccounting a;
  a.total_tweets = tweets;
  a.unique_urls = w.images().size();
  std::map<std::size_t, const WorldImage*> canonical;
  for (const auto& im : w.images()) {
    if (im.fail) {
      ++a.failed;
      continue;
    }
    if (im.bad_feature) {
      ++a.dead_lettered;
      continue;
    }
    auto [it, fresh] = canonical.emplace(im.group, &im);
    if (it->second->model_error) {
      ++a.dead_lettered;
      continue;
    }
    ++a.downloaded;
    ++(fresh ? a.unique_images : a.duplicate_images);
    if (im.relevance == RelevanceLabel::Junk) {
      ++a.not_relevant;
      ++a.no_damage;
    } else {
      ++a.relevant;
      if (im.damage == DamageLabel::Severe) ++a.severe;
      else if (im.damage == DamageLabel::Mild) ++a.mild;
      else ++a.no_damage;
    }
  }
  a.with_damage = a.severe + a.mild;
  return a;
}

}  // namespace triage::testing
