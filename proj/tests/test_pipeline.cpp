#include <gtest/gtest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "support.hpp"
#include "triage/pipeline.hpp"

using namespace triage;
using namespace triage::testing;
using nlohmann::json;

namespace {

PipelineConfig world_config(std::size_t dim, std::size_t fetch_workers = 4, std::size_t inf_workers = 2) {
  PipelineConfig c;
  c.dedup.dimension = dim;
  c.dedup.distance_threshold = 20.0;
  c.fetch_workers = fetch_workers;
  c.inference_workers = inf_workers;
  c.queue_capacity = 64;
  return c;
}

PipelineResult run_world(World& w, const PipelineConfig& cfg, EventLog* log = nullptr) {
  std::istringstream in(w.tweets());
  return run_pipeline(cfg, in, PipelineDeps{w, w, w, w, log});
}

std::uint64_t line_count(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

json essential(const ImageState& s) {
  return {{"id", s.image_id},       {"url", s.source_url},
          {"cluster", s.cluster.id}, {"canonical", s.is_cluster_canonical},
          {"tweets", s.tweet_ids},   {"rel", s.relevance ? to_string(*s.relevance) : ""},
          {"dmg", s.damage ? to_string(*s.damage) : ""},
          {"dead", s.dead_letter.value_or("")}, {"inherited", s.inherited}};
}

json essentials(const std::vector<ImageState>& v) {
  json out = json::array();
  for (const auto& s : v) out.push_back(essential(s));
  return out;
}

struct Corpus {
  std::shared_ptr<const Manifest> manifest = Manifest::load(source_path("data/corpus/manifest.jsonl"));
  PipelineConfig cfg = load_pipeline_config(source_path("data/corpus/pipeline.conf"));

  PipelineResult run(std::size_t workers) {
    auto c = cfg;
    c.fetch_workers = c.inference_workers = workers;
    ReplayFetcher f(manifest);
    ReplayExtractor ex(manifest);
    StubAdapter stub(manifest, c.stub);
    std::ifstream in(source_path("data/corpus/tweets.jsonl"));
    return run_pipeline(c, in, PipelineDeps{f, ex, stub, stub, nullptr});
  }
};

ImageState state(const std::string& id, std::uint64_t seq, std::size_t cluster, bool canonical,
                 const std::string& canonical_id) {
  ImageState s;
  s.image_id = id;
  s.seq = seq;
  s.source_url = "https://ex.com/" + id;
  s.first_seen = parse_iso8601("2019-09-02T00:00:00Z") + std::chrono::hours(seq);
  s.cluster = {cluster, canonical_id};
  s.is_cluster_canonical = canonical;
  return s;
}

}  // namespace

TEST(Config, ParsesSectionsAndRejectsUnknownKeys) {
  std::istringstream ok("# comment\n[dedup]\ndistance_threshold = 12.5\ndimension = 8\n"
                        "[stub]\nseed = 3\ndamage_confusion = [[1,0,0],[0,1,0],[0,0,1]]\n"
                        "[pipeline]\nbucket_width_hours = 6\nfetch_workers = 2\n");
  auto c = parse_pipeline_config(ok);
  EXPECT_EQ(c.dedup.distance_threshold, 12.5);
  EXPECT_EQ(c.dedup.dimension, 8u);
  EXPECT_EQ(c.stub.seed, 3u);
  EXPECT_EQ(c.stub.damage_confusion, StubPolicy::identity_confusion());
  EXPECT_EQ(c.bucket_width, std::chrono::hours(6));
  EXPECT_EQ(c.fetch_workers, 2u);

  for (const char* bad : {"[dedup]\nbogus = 1\n", "[dedup]\ndimension = -4\n", "[dedup\n",
                          "[stub]\ndamage_confusion = [[1,0,0]]\n", "[pipeline]\nfetch_workers = 0\n",
                          "[dedup]\ndistance_threshold = 0\n", "just words\n", "[dedup]\ndimension = {\n"}) {
    std::istringstream in(bad);
    EXPECT_THROW(parse_pipeline_config(in), ConfigError) << bad;
  }
  EXPECT_THROW(load_pipeline_config("/nonexistent/pipeline.conf"), ConfigError);
}

TEST(Pipeline, EmptyStreamGivesZeroedAccounting) {
  World w({.images = 0, .groups = 1});
  std::istringstream in("");
  auto r = run_pipeline(world_config(32), in, PipelineDeps{w, w, w, w, nullptr});
  EXPECT_EQ(r.accounting, StageAccounting{});
  EXPECT_TRUE(r.accounting.violated_identities().empty());
  EXPECT_TRUE(r.states.empty());
  EXPECT_TRUE(r.buckets.empty());
}

TEST(Pipeline, MatchesWorldOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    WorldOptions o;
    o.seed = seed;
    o.images = 1500;
    o.groups = 500;
    World w(o);
    const auto tweets = w.tweets();
    auto r = run_world(w, world_config(o.dimension));
    EXPECT_EQ(r.accounting, expected_accounting(w, line_count(tweets))) << "seed " << seed;
    EXPECT_TRUE(r.accounting.violated_identities().empty());
    EXPECT_EQ(r.ingest.url_refs, line_count(tweets));
    std::uint64_t fails = 0;
    for (const auto& [_, n] : r.fetch_failures) fails += n;
    EXPECT_EQ(fails, r.accounting.failed);
    EXPECT_EQ(r.dead_letters.size(), r.accounting.dead_lettered);
    std::set<std::size_t> groups;
    for (const auto& im : w.images())
      if (!im.fail && !im.bad_feature) groups.insert(im.group);
    EXPECT_EQ(r.index.cluster_count(), groups.size());
  }
}

TEST(Pipeline, DeterministicAcrossWorkerCounts) {
  WorldOptions o;
  o.images = 800;
  o.groups = 300;
  o.seed = 9;
  World w(o);
  auto a = run_world(w, world_config(o.dimension, 1, 1));
  auto b = run_world(w, world_config(o.dimension, 8, 6));
  EXPECT_EQ(accounting_json(a).dump(), accounting_json(b).dump());
  EXPECT_EQ(essentials(a.states), essentials(b.states));
}

TEST(Pipeline, DuplicatesInheritCanonicalLabels) {
  WorldOptions o;
  o.images = 600;
  o.groups = 50;
  o.seed = 4;
  World w(o);
  auto r = run_world(w, world_config(o.dimension));
  std::map<std::string, const ImageState*> by_id;
  for (const auto& s : r.states) by_id[s.image_id] = &s;
  std::size_t inherited = 0;
  for (const auto& s : r.states) {
    if (s.is_cluster_canonical) {
      EXPECT_FALSE(s.inherited);
      continue;
    }
    if (s.dead_letter && s.dead_letter->rfind("extract", 0) == 0) continue;  // never clustered
    const auto* c = by_id.at(s.cluster.canonical_image_id);
    EXPECT_TRUE(s.inherited) << s.image_id;
    EXPECT_EQ(s.relevance, c->relevance);
    EXPECT_EQ(s.damage, c->damage);
    EXPECT_EQ(s.dead_letter.has_value(), c->dead_letter.has_value());
    if (!s.dead_letter) EXPECT_TRUE(s.terminal());
    ++inherited;
  }
  EXPECT_GT(inherited, 400u);
}

TEST(Pipeline, CorpusMatchesGoldenAccounting) {
  // Golden file is produced by tests/oracles/reference_replay.py.
  std::ifstream g(source_path("tests/data/corpus_golden_accounting.json"));
  const json golden = json::parse(g);
  Corpus corpus;
  auto r = corpus.run(4);
  EXPECT_EQ(to_json(r.accounting), golden);
  EXPECT_TRUE(r.accounting.violated_identities().empty());
}

TEST(Pipeline, SourceErrorsPropagate) {
  World w({.images = 10, .groups = 2});
  auto cfg = world_config(32);
  cfg.dedup.dimension = 0;
  std::istringstream in(w.tweets());
  EXPECT_THROW(run_pipeline(cfg, in, PipelineDeps{w, w, w, w, nullptr}), ConfigError);
}

TEST(Identities, NamesViolations) {
  StageAccounting a;
  EXPECT_TRUE(a.violated_identities().empty());
  a.unique_urls = 3;
  a.downloaded = 2;
  a.unique_images = 2;
  a.relevant = 2;
  a.severe = 1;
  a.mild = 1;
  a.with_damage = 2;
  EXPECT_EQ(a.violated_identities(), (std::vector<std::string>{"unique_urls == downloaded + failed + dead_lettered"}));
  a.failed = 1;
  EXPECT_TRUE(a.violated_identities().empty());
  a.mild = 0;
  EXPECT_EQ(a.violated_identities().size(), 1u);
}

TEST(Identities, PublishedFunnelArithmetic) {
  StageAccounting a;
  a.downloaded = 279819;
  a.unique_images = 119767;
  a.duplicate_images = 160052;
  a.relevant = 77580;
  a.not_relevant = 202239;
  a.with_damage = 26386;
  a.no_damage = 253433;
  a.severe = 11044;
  a.mild = 15342;
  a.failed = 244;
  a.unique_urls = 280063;
  EXPECT_TRUE(a.violated_identities().empty());
}

TEST(Propagate, DeadCanonicalTakesDuplicatesDown) {
  std::vector<ImageState> v = {state("a", 0, 0, true, "a"), state("b", 1, 0, false, "a"),
                               state("c", 2, 1, true, "c"), state("d", 3, 1, false, "c")};
  v[0].dead_letter = "relevance: boom";
  v[2].relevance = RelevanceLabel::Relevant;
  v[2].damage = DamageLabel::Mild;
  propagate_cluster_labels(v);
  EXPECT_EQ(v[1].dead_letter, "inherited: relevance: boom");
  EXPECT_TRUE(v[1].inherited);
  EXPECT_EQ(v[3].damage, DamageLabel::Mild);
  EXPECT_FALSE(v[3].dead_letter);
  // Idempotent.
  auto again = v;
  propagate_cluster_labels(again);
  EXPECT_EQ(essentials(again), essentials(v));
}

TEST(Propagate, UnclassifiedLiveCanonicalIsContractViolation) {
  std::vector<ImageState> v = {state("a", 0, 0, true, "a"), state("b", 1, 0, false, "a")};
  EXPECT_THROW(propagate_cluster_labels(v), ContractViolation);
}

TEST(Propagate, StoreVariant) {
  StateStore store;
  auto a = state("a", 0, 0, true, "a");
  a.relevance = RelevanceLabel::Junk;
  EXPECT_TRUE(store.insert(a));
  EXPECT_FALSE(store.insert(a));
  EXPECT_TRUE(store.insert(state("b", 1, 0, false, "a")));
  propagate_cluster_labels(store);
  EXPECT_EQ(store.get("b")->relevance, RelevanceLabel::Junk);
  EXPECT_THROW(store.update("zzz", [](ImageState&) {}), NotFoundError);
  EXPECT_EQ(store.snapshot().front().image_id, "a");
}

TEST(Bucketize, ConservesCountsAndHonoursBoundaries) {
  const auto t0 = parse_iso8601("2019-09-02T00:00:00Z");
  std::vector<ImageState> v;
  for (int i = 0; i < 5; ++i) {
    auto s = state("i" + std::to_string(i), i, i, true, "i" + std::to_string(i));
    s.relevance = RelevanceLabel::Relevant;
    s.damage = DamageLabel::Severe;
    v.push_back(s);
  }
  v[0].first_seen = t0;                                                   // first bucket start
  v[1].first_seen = t0 + std::chrono::hours(24) - std::chrono::milliseconds(1);
  v[2].first_seen = t0 + std::chrono::hours(24);                          // exactly on the edge
  v[3].first_seen = t0 + std::chrono::hours(72) + std::chrono::minutes(5);  // leaves an empty day
  v[4].first_seen = t0 + std::chrono::hours(30);
  v[4].dead_letter = "extract: bad";
  const std::vector<Timestamp> failed = {t0 + std::chrono::hours(1)};
  auto b = bucketize(v, std::chrono::hours(24), failed);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].bucket_start, t0);
  EXPECT_EQ(b[0].counts.downloaded, 2u);
  EXPECT_EQ(b[0].counts.failed, 1u);
  EXPECT_EQ(b[1].counts.downloaded, 1u);
  EXPECT_EQ(b[1].counts.dead_lettered, 1u);
  EXPECT_EQ(b[2].counts.downloaded, 0u);
  EXPECT_EQ(b[3].counts.severe, 1u);
  StageAccounting sum;
  for (const auto& x : b) sum += x.counts;
  const auto whole = account(v, 0, 0, 1);
  EXPECT_EQ(sum.downloaded, whole.downloaded);
  EXPECT_EQ(sum.severe, whole.severe);
  EXPECT_EQ(sum.dead_lettered, whole.dead_lettered);
  EXPECT_THROW(bucketize(v, std::chrono::milliseconds(0)), ContractViolation);
}

TEST(Bucketize, WorldRunBucketsSumToTotals) {
  World w({.images = 700, .groups = 200, .seed = 21});
  auto cfg = world_config(32);
  cfg.bucket_width = std::chrono::hours(1);
  auto r = run_world(w, cfg);
  ASSERT_GT(r.buckets.size(), 3u);
  StageAccounting sum;
  for (const auto& b : r.buckets) sum += b.counts;
  EXPECT_EQ(sum.downloaded, r.accounting.downloaded);
  EXPECT_EQ(sum.failed, r.accounting.failed);
  EXPECT_EQ(sum.dead_lettered, r.accounting.dead_lettered);
  EXPECT_EQ(sum.with_damage, r.accounting.with_damage);
  for (std::size_t i = 1; i < r.buckets.size(); ++i)
    EXPECT_EQ(r.buckets[i].bucket_start - r.buckets[i - 1].bucket_start, std::chrono::hours(1));
}

TEST(EventLog, ReplayRebuildsStatesAndIsIdempotent) {
  World w({.images = 400, .groups = 120, .seed = 6});
  std::ostringstream out;
  EventLog log(&out);
  auto r = run_world(w, world_config(32), &log);
  EXPECT_EQ(log.count(), line_count(out.str()));

  std::istringstream once(out.str());
  EXPECT_EQ(essentials(replay_event_log(once)), essentials(r.states));
  std::istringstream twice(out.str() + out.str());
  EXPECT_EQ(essentials(replay_event_log(twice)), essentials(r.states));
  std::istringstream broken("{\"nope\":1}\n");
  EXPECT_THROW(replay_event_log(broken), InputError);
}

TEST(Outputs, WriteAndReloadStates) {
  World w({.images = 200, .groups = 60, .seed = 12});
  auto r = run_world(w, world_config(32));
  const auto dir = temp_dir("outputs");
  write_run_outputs(r, dir);
  for (const char* f : {"accounting.json", "accounting.csv", "timeseries.csv", "states.jsonl", "dead_letter.jsonl", "index.bin"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(essentials(load_states(dir / "states.jsonl")), essentials(r.states));
  std::ifstream idx(dir / "index.bin", std::ios::binary);
  EXPECT_EQ(DedupIndex::load(idx).cluster_count(), r.index.cluster_count());
  const auto csv = accounting_csv(r.accounting);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "Total tweets,Unique image URLs,Downloaded images,Failed to download,Unique images,Relevant images,"
            "Images with damage,Severe damage,Mild damage,Duplicate images,Not relevant images,"
            "Images with no damage,Dead-lettered images");
  std::filesystem::remove_all(dir);
}
