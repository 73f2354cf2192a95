#include <gtest/gtest.h>

#include <barrier>
#include <random>
#include <sstream>
#include <thread>

#include "support.hpp"
#include "triage/dedup.hpp"

using namespace triage;
using triage::testing::brute_force_dedup;
using triage::testing::clustered_vectors;

namespace {

DedupConfig cfg(std::size_t dim, double tau = 20.0) {
  DedupConfig c;
  c.dimension = dim;
  c.distance_threshold = tau;
  return c;
}

FeatureVector fv(std::vector<double> v, std::string id) { return {std::move(v), std::move(id)}; }

void expect_matches_oracle(const std::vector<std::vector<double>>& vs, double tau) {
  DedupIndex idx(cfg(vs.front().size(), tau));
  const auto oracle = brute_force_dedup(vs, tau);
  std::size_t uniques = 0;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    auto d = idx.insert_or_match(fv(vs[i], "img" + std::to_string(i)));
    ASSERT_EQ(d.unique, oracle[i].unique) << "vector " << i;
    ASSERT_EQ(d.cluster.id, oracle[i].cluster) << "vector " << i;
    uniques += d.unique;
  }
  EXPECT_EQ(idx.cluster_count(), uniques);
  EXPECT_EQ(idx.searchable_count(), uniques);
}

}  // namespace

TEST(Distance, IdentityAndPythagoras) {
  std::vector<double> a(4096, 0.0), b(4096, 0.0);
  EXPECT_EQ(euclidean_distance(a, a), 0.0);
  a[0] = 3;
  a[1] = 4;
  EXPECT_DOUBLE_EQ(euclidean_distance(a, b), 5.0);
}

TEST(Distance, MatchesNaiveLoopOn4096) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 3);
  std::vector<double> a(4096), b(4096);
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (long double)(a[i] - b[i]) * (a[i] - b[i]);
  const double oracle = static_cast<double>(std::sqrt(s));
  EXPECT_NEAR(euclidean_distance(a, b), oracle, 1e-6 * oracle);
}

TEST(Distance, DimensionMismatchIsContractViolation) {
  std::vector<double> a(3), b(4);
  EXPECT_THROW(euclidean_distance(a, b), ContractViolation);
}

TEST(InsertOrMatch, FirstIsUniqueClusterZero) {
  DedupIndex idx(cfg(4));
  auto d = idx.insert_or_match(fv({1, 2, 3, 4}, "a"));
  EXPECT_TRUE(d.unique);
  EXPECT_EQ(d.cluster.id, 0u);
  EXPECT_EQ(d.cluster.canonical_image_id, "a");
}

TEST(InsertOrMatch, SameVectorTwiceIsDuplicateAtZero) {
  DedupIndex idx(cfg(4));
  idx.insert_or_match(fv({1, 2, 3, 4}, "a"));
  auto d = idx.insert_or_match(fv({1, 2, 3, 4}, "b"));
  EXPECT_FALSE(d.unique);
  EXPECT_EQ(d.cluster.id, 0u);
  EXPECT_EQ(d.cluster.canonical_image_id, "a");
  EXPECT_EQ(d.distance, 0.0);
  EXPECT_EQ(idx.members(0), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(idx.searchable_count(), 1u);
}

TEST(InsertOrMatch, ExactlyThresholdIsUnique) {
  DedupIndex idx(cfg(3));
  idx.insert_or_match(fv({0, 0, 0}, "a"));
  // 12^2 + 16^2 = 20^2 exactly.
  auto at = idx.insert_or_match(fv({12, 16, 0}, "b"));
  EXPECT_TRUE(at.unique);
  EXPECT_EQ(at.cluster.id, 1u);
  auto below = idx.insert_or_match(fv({0, 0, 19.999}, "c"));
  EXPECT_FALSE(below.unique);
  EXPECT_EQ(below.cluster.id, 0u);
}

TEST(InsertOrMatch, DuplicatesAreNotSearchable) {
  // b joins a; c is within tau of b but not of a, so it founds a cluster.
  DedupIndex idx(cfg(1));
  idx.insert_or_match(fv({0}, "a"));
  EXPECT_FALSE(idx.insert_or_match(fv({15}, "b")).unique);
  EXPECT_TRUE(idx.insert_or_match(fv({25}, "c")).unique);

  DedupConfig chained = cfg(1);
  chained.index_duplicates = true;
  DedupIndex idx2(chained);
  idx2.insert_or_match(fv({0}, "a"));
  idx2.insert_or_match(fv({15}, "b"));
  auto c = idx2.insert_or_match(fv({25}, "c"));
  EXPECT_FALSE(c.unique);
  EXPECT_EQ(c.cluster.id, 0u);
}

TEST(InsertOrMatch, RejectsBadVectors) {
  DedupIndex idx(cfg(3));
  EXPECT_THROW(idx.insert_or_match(fv({1, 2}, "x")), ContractViolation);
  EXPECT_THROW(idx.insert_or_match(fv({1, std::nan(""), 2}, "x")), ContractViolation);
}

TEST(Nearest, EmptyAndTieRule) {
  DedupIndex idx(cfg(2, 1.0));
  EXPECT_FALSE(idx.nearest(fv({0, 0}, "q")).has_value());
  idx.insert_or_match(fv({-5, 0}, "left"));
  idx.insert_or_match(fv({5, 0}, "right"));
  auto hit = idx.nearest(fv({0, 0}, "q"));
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->cluster.id, 0u);
  EXPECT_DOUBLE_EQ(hit->distance, 5.0);
}

TEST(Nearest, AgreesWithLinearScanOnRandomQueries) {
  auto vs = clustered_vectors(1000, 16, 1, 0.0, 10.0, 11);
  DedupIndex idx(cfg(16, 1e-9));
  for (std::size_t i = 0; i < vs.size(); ++i) idx.insert_or_match(fv(vs[i], std::to_string(i)));
  ASSERT_EQ(idx.cluster_count(), 1000u);
  auto queries = clustered_vectors(100, 16, 1, 0.0, 10.0, 12);
  for (const auto& q : queries) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < vs.size(); ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 16; ++k) s += (vs[i][k] - q[k]) * (vs[i][k] - q[k]);
      if (std::sqrt(s) < best_d) best_d = std::sqrt(s), best = i;
    }
    auto hit = idx.nearest(fv(q, "q"));
    ASSERT_TRUE(hit);
    EXPECT_EQ(hit->cluster.id, best);
    EXPECT_NEAR(hit->distance, best_d, 1e-9 * best_d);
  }
}

TEST(Oracle, TenThousandVectorsDim64) {
  // Spread and noise put many pairs close to tau, so the boundary gets exercised.
  auto vs = clustered_vectors(10000, 64, 1500, 2.2, 1.2, 42);
  expect_matches_oracle(vs, 20.0);
}

TEST(Oracle, PlantedDuplicatesDim64) {
  auto vs = clustered_vectors(5000, 64, 800, 10.0, 0.6, 43);
  expect_matches_oracle(vs, 20.0);
}

TEST(Oracle, SlowTenThousandVectorsDim4096) {
  auto vs = clustered_vectors(10000, 4096, 120, 0.5, 0.15, 44);
  expect_matches_oracle(vs, 20.0);
}

TEST(Concurrency, CopiesOfOneVectorGiveOneUnique) {
  constexpr int kThreads = 64;
  const std::vector<double> v(64, 1.5);
  for (int trial = 0; trial < 200; ++trial) {
    DedupIndex idx(cfg(64));
    std::atomic<int> uniques{0}, dups{0};
    std::barrier sync(kThreads);
    std::vector<std::thread> ts;
    for (int t = 0; t < kThreads; ++t) {
      ts.emplace_back([&, t] {
        sync.arrive_and_wait();
        auto d = idx.insert_or_match(fv(v, "t" + std::to_string(t)));
        (d.unique ? uniques : dups)++;
      });
    }
    for (auto& th : ts) th.join();
    ASSERT_EQ(uniques.load(), 1);
    ASSERT_EQ(dups.load(), kThreads - 1);
    ASSERT_EQ(idx.members(0).size(), static_cast<std::size_t>(kThreads));
  }
}

TEST(Snapshot, RoundTrip) {
  auto vs = clustered_vectors(300, 8, 40, 10.0, 0.5, 3);
  DedupIndex idx(cfg(8));
  for (std::size_t i = 0; i < vs.size(); ++i) idx.insert_or_match(fv(vs[i], "i" + std::to_string(i)));
  std::stringstream buf;
  idx.save(buf);
  auto back = DedupIndex::load(buf);
  EXPECT_EQ(back.cluster_count(), idx.cluster_count());
  EXPECT_EQ(back.config().dimension, 8u);
  for (std::size_t c = 0; c < idx.cluster_count(); ++c) EXPECT_EQ(back.members(c), idx.members(c));
  // The restored index answers new queries the same way.
  auto more = clustered_vectors(50, 8, 40, 10.0, 0.5, 3);
  for (const auto& q : more) {
    auto a = idx.nearest(fv(q, "q"));
    auto b = back.nearest(fv(q, "q"));
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      EXPECT_EQ(a->cluster.id, b->cluster.id);
      EXPECT_EQ(a->distance, b->distance);
    }
  }
}

TEST(Snapshot, RejectsCorruptInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(DedupIndex::load(bad), InputError);
  DedupIndex idx(cfg(2));
  idx.insert_or_match(fv({1, 2}, "a"));
  std::stringstream buf;
  idx.save(buf);
  std::string truncated = buf.str().substr(0, buf.str().size() - 3);
  std::stringstream t(truncated);
  EXPECT_THROW(DedupIndex::load(t), InputError);
}

TEST(Extract, PassThroughAndValidation) {
  std::istringstream m(R"({"url":"https://ex.com/a","feature":[1,2,3]})" "\n"
                       R"({"url":"https://ex.com/b","feature":[1,2]})" "\n"
                       R"({"url":"https://ex.com/c"})" "\n");
  ReplayExtractor ex(Manifest::parse(m, "."));
  ImageRecord a;
  a.source_url = "https://ex.com/a";
  a.image_id = "ia";
  auto v = extract_features(a, ex, 3);
  EXPECT_EQ(v.values, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(v.image_id, "ia");
  EXPECT_EQ(extract_features(a, ex, 3).values, v.values);

  for (const char* u : {"https://ex.com/b", "https://ex.com/c", "https://ex.com/zzz"}) {
    ImageRecord r;
    r.source_url = u;
    try {
      extract_features(r, ex, 3);
      FAIL() << u;
    } catch (const StageError& e) {
      EXPECT_EQ(e.stage(), "extract");
    }
  }
}
