#include "triage/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <thread>
#include <unordered_set>

#include "triage/bounded_queue.hpp"

namespace triage {

using nlohmann::json;

void PipelineConfig::validate() const {
  dedup.validate();
  stub.validate();
  if (queue_capacity < 1) throw ConfigError("queue_capacity must be >= 1");
  if (bucket_width.count() <= 0) throw ConfigError("bucket_width must be positive");
  if (fetch_workers < 1 || inference_workers < 1) throw ConfigError("worker counts must be >= 1");
  if (fetch.max_attempts < 1) throw ConfigError("fetch max_attempts must be >= 1");
  if (fetch.deadline.count() <= 0) throw ConfigError("fetch deadline must be positive");
}

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T as_unsigned(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  return static_cast<T>(v.get<std::uint64_t>());
}

double as_number(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be true or false");
  return v.get<bool>();
}

}  // namespace

PipelineConfig parse_pipeline_config(std::istream& in) {
  PipelineConfig cfg;
  std::string section;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = (section.empty() ? "" : section + ".") + trim(line.substr(0, eq));
    json v = json::parse(trim(line.substr(eq + 1)), nullptr, false);
    if (v.is_discarded())
      throw ConfigError("config line " + std::to_string(lineno) + ": unparseable value");

    if (key == "dedup.distance_threshold") cfg.dedup.distance_threshold = as_number(v, key);
    else if (key == "dedup.dimension") cfg.dedup.dimension = as_unsigned<std::size_t>(v, key);
    else if (key == "dedup.index_duplicates") cfg.dedup.index_duplicates = as_bool(v, key);
    else if (key == "stub.seed") cfg.stub.seed = as_unsigned<std::uint64_t>(v, key);
    else if (key == "stub.relevance_flip_rate") cfg.stub.relevance_flip_rate = as_number(v, key);
    else if (key == "stub.damage_confusion") {
      if (!v.is_array() || v.size() != 3) throw ConfigError("stub.damage_confusion must be 3x3");
      for (std::size_t r = 0; r < 3; ++r) {
        if (!v[r].is_array() || v[r].size() != 3) throw ConfigError("stub.damage_confusion must be 3x3");
        for (std::size_t c = 0; c < 3; ++c) cfg.stub.damage_confusion[r][c] = as_number(v[r][c], key);
      }
    } else if (key == "fetch.deadline_ms") cfg.fetch.deadline = std::chrono::milliseconds(as_unsigned<std::int64_t>(v, key));
    else if (key == "fetch.max_attempts") cfg.fetch.max_attempts = as_unsigned<int>(v, key);
    else if (key == "ingest.keywords") {
      if (!v.is_array()) throw ConfigError("ingest.keywords must be an array of strings");
      cfg.keywords.clear();
      for (const auto& k : v) {
        if (!k.is_string()) throw ConfigError("ingest.keywords must be an array of strings");
        cfg.keywords.push_back(k.get<std::string>());
      }
      if (cfg.keywords.empty()) throw ConfigError("ingest.keywords must not be empty");
    } else if (key == "ingest.apply_keyword_filter") cfg.apply_keyword_filter = as_bool(v, key);
    else if (key == "pipeline.queue_capacity") cfg.queue_capacity = as_unsigned<std::size_t>(v, key);
    else if (key == "pipeline.bucket_width_hours")
      cfg.bucket_width = std::chrono::milliseconds(static_cast<std::int64_t>(as_number(v, key) * 3'600'000.0));
    else if (key == "pipeline.fetch_workers") cfg.fetch_workers = as_unsigned<std::size_t>(v, key);
    else if (key == "pipeline.inference_workers") cfg.inference_workers = as_unsigned<std::size_t>(v, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config: " + path.string());
  return parse_pipeline_config(in);
}

// ---------------------------------------------------------------------------

std::vector<std::string> StageAccounting::violated_identities() const {
  std::vector<std::string> v;
  if (downloaded != unique_images + duplicate_images) v.emplace_back("downloaded == unique_images + duplicate_images");
  if (downloaded != relevant + not_relevant) v.emplace_back("downloaded == relevant + not_relevant");
  if (downloaded != with_damage + no_damage) v.emplace_back("downloaded == with_damage + no_damage");
  if (with_damage != severe + mild) v.emplace_back("with_damage == severe + mild");
  if (unique_urls != downloaded + failed + dead_lettered) v.emplace_back("unique_urls == downloaded + failed + dead_lettered");
  return v;
}

StageAccounting& StageAccounting::operator+=(const StageAccounting& o) {
  total_tweets += o.total_tweets;
  unique_urls += o.unique_urls;
  downloaded += o.downloaded;
  failed += o.failed;
  unique_images += o.unique_images;
  duplicate_images += o.duplicate_images;
  relevant += o.relevant;
  not_relevant += o.not_relevant;
  with_damage += o.with_damage;
  severe += o.severe;
  mild += o.mild;
  no_damage += o.no_damage;
  dead_lettered += o.dead_lettered;
  return *this;
}

bool StateStore::insert(ImageState state) {
  std::lock_guard lock(mu_);
  auto id = state.image_id;
  return states_.emplace(std::move(id), std::move(state)).second;
}

bool StateStore::contains(const std::string& image_id) const {
  std::lock_guard lock(mu_);
  return states_.contains(image_id);
}

std::optional<ImageState> StateStore::get(const std::string& image_id) const {
  std::lock_guard lock(mu_);
  auto it = states_.find(image_id);
  if (it == states_.end()) return std::nullopt;
  return it->second;
}

void StateStore::update(const std::string& image_id, const std::function<void(ImageState&)>& fn) {
  std::lock_guard lock(mu_);
  auto it = states_.find(image_id);
  if (it == states_.end()) throw NotFoundError("unknown image " + image_id);
  fn(it->second);
}

std::vector<ImageState> StateStore::snapshot() const {
  std::vector<ImageState> out;
  {
    std::lock_guard lock(mu_);
    out.reserve(states_.size());
    for (const auto& [_, s] : states_) out.push_back(s);
  }
  std::sort(out.begin(), out.end(), [](const ImageState& a, const ImageState& b) {
    return a.seq != b.seq ? a.seq < b.seq : a.image_id < b.image_id;
  });
  return out;
}

std::size_t StateStore::size() const {
  std::lock_guard lock(mu_);
  return states_.size();
}

void EventLog::append(const std::string& image_id, const std::string& event, const json& payload) {
  std::lock_guard lock(mu_);
  ++count_;
  if (!out_) return;
  json line{{"image_id", image_id}, {"event", event}, {"payload", payload}, {"ts", format_iso8601(now_ms())}};
  *out_ << line.dump() << '\n';
}

std::size_t EventLog::count() const {
  std::lock_guard lock(mu_);
  return count_;
}

// ---------------------------------------------------------------------------

namespace {

json opt_ts(const std::optional<Timestamp>& t) { return t ? json(format_iso8601(*t)) : json(nullptr); }

std::optional<Timestamp> read_opt_ts(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return parse_iso8601(it->get<std::string>());
}

}  // namespace

json to_json(const ImageState& s) {
  return {{"image_id", s.image_id},
          {"seq", s.seq},
          {"source_url", s.source_url},
          {"first_seen", format_iso8601(s.first_seen)},
          {"tweet_ids", s.tweet_ids},
          {"cluster_id", s.cluster.id},
          {"canonical_image_id", s.cluster.canonical_image_id},
          {"is_cluster_canonical", s.is_cluster_canonical},
          {"dedup_distance", s.dedup_distance},
          {"relevance", s.relevance ? json(to_string(*s.relevance)) : json(nullptr)},
          {"damage", s.damage ? json(to_string(*s.damage)) : json(nullptr)},
          {"relevance_confidence", s.relevance_confidence},
          {"damage_confidence", s.damage_confidence},
          {"inherited", s.inherited},
          {"dead_letter", s.dead_letter ? json(*s.dead_letter) : json(nullptr)},
          {"timeline",
           {{"fetched", opt_ts(s.timeline.fetched)},
            {"deduped", opt_ts(s.timeline.deduped)},
            {"relevance", opt_ts(s.timeline.relevance)},
            {"damage", opt_ts(s.timeline.damage)}}}};
}

ImageState image_state_from_json(const json& j) {
  try {
    ImageState s;
    s.image_id = j.at("image_id").get<std::string>();
    s.seq = j.at("seq").get<std::uint64_t>();
    s.source_url = j.at("source_url").get<std::string>();
    s.first_seen = parse_iso8601(j.at("first_seen").get<std::string>());
    s.tweet_ids = j.value("tweet_ids", std::vector<std::string>{});
    s.cluster.id = j.at("cluster_id").get<std::uint64_t>();
    s.cluster.canonical_image_id = j.at("canonical_image_id").get<std::string>();
    s.is_cluster_canonical = j.at("is_cluster_canonical").get<bool>();
    s.dedup_distance = j.value("dedup_distance", 0.0);
    if (auto it = j.find("relevance"); it != j.end() && !it->is_null())
      s.relevance = parse_relevance(it->get<std::string>());
    if (auto it = j.find("damage"); it != j.end() && !it->is_null())
      s.damage = parse_damage(it->get<std::string>());
    s.relevance_confidence = j.value("relevance_confidence", 0.0);
    s.damage_confidence = j.value("damage_confidence", 0.0);
    s.inherited = j.value("inherited", false);
    if (auto it = j.find("dead_letter"); it != j.end() && !it->is_null())
      s.dead_letter = it->get<std::string>();
    if (auto it = j.find("timeline"); it != j.end() && it->is_object()) {
      s.timeline.fetched = read_opt_ts(*it, "fetched");
      s.timeline.deduped = read_opt_ts(*it, "deduped");
      s.timeline.relevance = read_opt_ts(*it, "relevance");
      s.timeline.damage = read_opt_ts(*it, "damage");
    }
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed image state: ") + e.what());
  }
}

std::vector<ImageState> replay_event_log(std::istream& in) {
  std::map<std::string, ImageState> states;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json e = json::parse(line, nullptr, false);
    if (!e.is_object() || !e.contains("event")) throw InputError("malformed event line");
    const auto event = e["event"].get<std::string>();
    const auto id = e.value("image_id", std::string{});
    const json& p = e["payload"];
    if (event == "registered") {
      states.try_emplace(id, image_state_from_json(p));
      continue;
    }
    auto it = states.find(id);
    if (it == states.end()) continue;
    ImageState& s = it->second;
    if (event == "relevance") {
      s.relevance = parse_relevance(p.at("label").get<std::string>());
      s.relevance_confidence = p.at("confidence").get<double>();
    } else if (event == "damage") {
      s.damage = parse_damage(p.at("label").get<std::string>());
      s.damage_confidence = p.at("confidence").get<double>();
    } else if (event == "dead_letter") {
      s.dead_letter = p.at("stage").get<std::string>() + ": " + p.at("reason").get<std::string>();
    } else if (event == "inherited") {
      s.inherited = true;
      s.relevance = p["relevance"].is_null() ? std::nullopt : parse_relevance(p["relevance"].get<std::string>());
      s.damage = p["damage"].is_null() ? std::nullopt : parse_damage(p["damage"].get<std::string>());
      if (!p["dead_letter"].is_null()) s.dead_letter = p["dead_letter"].get<std::string>();
    } else if (event == "tweets") {
      s.tweet_ids = p.at("tweet_ids").get<std::vector<std::string>>();
    }
  }
  std::vector<ImageState> out;
  for (auto& [_, s] : states) out.push_back(std::move(s));
  std::sort(out.begin(), out.end(), [](const ImageState& a, const ImageState& b) { return a.seq < b.seq; });
  return out;
}

// ---------------------------------------------------------------------------

void propagate_cluster_labels(std::vector<ImageState>& states) {
  std::unordered_map<std::string, const ImageState*> canon;
  for (const auto& s : states) {
    if (s.is_cluster_canonical) canon.emplace(s.image_id, &s);
  }
  for (const auto& [_, c] : canon) {
    if (!c->dead_letter && !c->terminal())
      throw ContractViolation("canonical " + c->image_id + " is not fully classified");
  }
  for (auto& s : states) {
    if (s.is_cluster_canonical || s.dead_letter) continue;
    auto it = canon.find(s.cluster.canonical_image_id);
    if (it == canon.end())
      throw ContractViolation("duplicate " + s.image_id + " has no canonical in the store");
    const ImageState& c = *it->second;
    s.relevance = c.relevance;
    s.damage = c.damage;
    s.relevance_confidence = c.relevance_confidence;
    s.damage_confidence = c.damage_confidence;
    s.inherited = true;
    if (c.dead_letter) s.dead_letter = "inherited: " + *c.dead_letter;
  }
}

void propagate_cluster_labels(StateStore& store) {
  auto states = store.snapshot();
  propagate_cluster_labels(states);
  for (auto& s : states) {
    if (!s.inherited) continue;
    store.update(s.image_id, [&](ImageState& target) {
      target.relevance = s.relevance;
      target.damage = s.damage;
      target.relevance_confidence = s.relevance_confidence;
      target.damage_confidence = s.damage_confidence;
      target.inherited = true;
      target.dead_letter = s.dead_letter;
    });
  }
}

StageAccounting account(std::span<const ImageState> states, std::uint64_t total_tweets,
                        std::uint64_t unique_urls, std::uint64_t failed) {
  StageAccounting a;
  a.total_tweets = total_tweets;
  a.unique_urls = unique_urls;
  a.failed = failed;
  for (const auto& s : states) {
    if (s.dead_letter) {
      ++a.dead_lettered;
      continue;
    }
    ++a.downloaded;
    ++(s.is_cluster_canonical ? a.unique_images : a.duplicate_images);
    if (s.relevance == RelevanceLabel::Relevant) {
      ++a.relevant;
      if (s.damage == DamageLabel::Severe) ++a.severe;
      else if (s.damage == DamageLabel::Mild) ++a.mild;
      else if (s.damage == DamageLabel::None) ++a.no_damage;
    } else if (s.relevance == RelevanceLabel::Junk) {
      ++a.not_relevant;
      ++a.no_damage;
    }
  }
  a.with_damage = a.severe + a.mild;
  return a;
}

namespace {

std::int64_t bucket_index(Timestamp t, std::chrono::milliseconds width) {
  const auto ms = t.time_since_epoch().count();
  const auto w = width.count();
  return ms >= 0 ? ms / w : -((-ms + w - 1) / w);
}

}  // namespace

std::vector<TimeBucket> bucketize(std::span<const ImageState> states, std::chrono::milliseconds width,
                                  std::span<const Timestamp> failed_first_seen) {
  if (width.count() <= 0) throw ContractViolation("bucket width must be positive");
  std::map<std::int64_t, std::vector<ImageState>> groups;
  std::map<std::int64_t, std::uint64_t> failures;
  for (const auto& s : states) groups[bucket_index(s.first_seen, width)].push_back(s);
  for (auto t : failed_first_seen) ++failures[bucket_index(t, width)];
  if (groups.empty() && failures.empty()) return {};

  std::int64_t lo = std::numeric_limits<std::int64_t>::max();
  std::int64_t hi = std::numeric_limits<std::int64_t>::min();
  for (const auto& [k, _] : groups) lo = std::min(lo, k), hi = std::max(hi, k);
  for (const auto& [k, _] : failures) lo = std::min(lo, k), hi = std::max(hi, k);

  std::vector<TimeBucket> out;
  out.reserve(static_cast<std::size_t>(hi - lo + 1));
  for (auto k = lo; k <= hi; ++k) {
    TimeBucket b;
    b.bucket_start = Timestamp(std::chrono::milliseconds(k * width.count()));
    auto g = groups.find(k);
    auto f = failures.find(k);
    const std::uint64_t failed = f == failures.end() ? 0 : f->second;
    b.counts = g == groups.end() ? account({}, 0, 0, failed) : account(g->second, 0, 0, failed);
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct FetchJob {
  std::uint64_t seq = 0;
  ImageUrlRef ref;
};

struct FetchDone {
  std::uint64_t seq = 0;
  ImageUrlRef ref;
  FetchOutcome outcome;
  std::optional<FeatureVector> feature;
  std::string extract_error;
};

struct ClassifyJob {
  ImageRecord record;
};

json prediction_payload(std::string_view label, double confidence, const std::string& model) {
  return {{"label", label}, {"confidence", confidence}, {"model_id", model}};
}

template <typename L>
void check_prediction(const Prediction<L>& p, const char* stage) {
  if (!(p.confidence >= 0.0 && p.confidence <= 1.0))
    throw StageError(stage, "prediction confidence out of [0,1]");
  if (p.model_id.empty()) throw StageError(stage, "prediction has no model_id");
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, std::istream& source, PipelineDeps deps) {
  config.validate();
  const KeywordFilter filter(config.keywords);
  UrlIndex url_index;
  DedupIndex index(config.dedup);
  StateStore store;
  EventLog null_log;
  EventLog& events = deps.events ? *deps.events : null_log;

  BoundedQueue<FetchJob> fetch_q(config.queue_capacity);
  BoundedQueue<FetchDone> done_q(config.queue_capacity);
  BoundedQueue<ClassifyJob> classify_q(config.queue_capacity);

  std::mutex dl_mu;
  std::vector<DeadLetter> dead_letters;
  auto send_to_dead_letter = [&](const std::string& id, const std::string& url, const std::string& stage,
                                 const std::string& reason) {
    {
      std::lock_guard lock(dl_mu);
      dead_letters.push_back({id, url, stage, reason});
    }
    events.append(id, "dead_letter", {{"stage", stage}, {"reason", reason}});
  };

  // Fetch + feature extraction.
  std::vector<std::jthread> fetchers;
  for (std::size_t i = 0; i < config.fetch_workers; ++i) {
    fetchers.emplace_back([&] {
      while (auto job = fetch_q.pop()) {
        FetchDone done{job->seq, std::move(job->ref), {}, std::nullopt, {}};
        done.outcome = fetch(done.ref, deps.fetcher, config.fetch);
        if (done.outcome.ok()) {
          try {
            done.feature = extract_features(done.outcome.image(), deps.extractor, config.dedup.dimension);
          } catch (const std::exception& e) {
            done.extract_error = e.what();
          }
        }
        done_q.push(std::move(done));
      }
    });
  }

  // Classification on canonicals.
  std::vector<std::jthread> classifiers;
  for (std::size_t i = 0; i < config.inference_workers; ++i) {
    classifiers.emplace_back([&] {
      while (auto job = classify_q.pop()) {
        const ImageRecord& rec = job->record;
        std::string stage = "relevance";
        try {
          auto rel = deps.relevance.classify_relevance(rec);
          check_prediction(rel, "relevance");
          store.update(rec.image_id, [&](ImageState& s) {
            s.relevance = rel.label;
            s.relevance_confidence = rel.confidence;
            s.timeline.relevance = now_ms();
          });
          events.append(rec.image_id, "relevance", prediction_payload(to_string(rel.label), rel.confidence, rel.model_id));
          if (rel.label == RelevanceLabel::Relevant) {
            stage = "damage";
            auto dmg = deps.damage.classify_damage(rec);
            check_prediction(dmg, "damage");
            store.update(rec.image_id, [&](ImageState& s) {
              s.damage = dmg.label;
              s.damage_confidence = dmg.confidence;
              s.timeline.damage = now_ms();
            });
            events.append(rec.image_id, "damage", prediction_payload(to_string(dmg.label), dmg.confidence, dmg.model_id));
          }
        } catch (const StageError& e) {
          store.update(rec.image_id, [&](ImageState& s) { s.dead_letter = e.stage() + ": " + e.what(); });
          send_to_dead_letter(rec.image_id, rec.source_url, e.stage(), e.what());
        } catch (const std::exception& e) {
          store.update(rec.image_id, [&](ImageState& s) { s.dead_letter = stage + ": " + e.what(); });
          send_to_dead_letter(rec.image_id, rec.source_url, stage, e.what());
        }
      }
    });
  }

  // Dedup, applied strictly in stream order.
  std::map<std::string, std::uint64_t> fetch_failures;
  std::vector<std::pair<Timestamp, std::string>> failed_urls;
  std::exception_ptr dedup_error;
  std::jthread deduper([&] {
    std::map<std::uint64_t, FetchDone> pending;
    std::uint64_t next = 0;
    std::unordered_set<std::string> used_ids;
    auto process = [&](FetchDone& d) {
      if (!d.outcome.ok()) {
        const auto& f = d.outcome.failure();
        ++fetch_failures[std::string(to_string(f.reason))];
        failed_urls.emplace_back(d.ref.first_seen_at, d.ref.url);
        events.append("", "fetch_failed",
                      {{"url", f.url}, {"reason", to_string(f.reason)}, {"attempts", d.outcome.attempts}});
        return;
      }
      ImageRecord& rec = d.outcome.image();
      std::string id = rec.image_id;
      for (int k = 1; used_ids.contains(id); ++k) id = rec.image_id + "~" + std::to_string(k);
      used_ids.insert(id);
      rec.image_id = id;

      ImageState st;
      st.image_id = id;
      st.seq = d.seq;
      st.source_url = rec.source_url;
      st.first_seen = d.ref.first_seen_at;
      st.timeline.fetched = rec.fetched_at;
      if (!d.feature) {
        st.dead_letter = "extract: " + d.extract_error;
        store.insert(st);
        events.append(id, "registered", to_json(st));
        send_to_dead_letter(id, rec.source_url, "extract", d.extract_error);
        return;
      }
      d.feature->image_id = id;
      auto decision = index.insert_or_match(*d.feature);
      st.cluster = decision.cluster;
      st.is_cluster_canonical = decision.unique;
      st.dedup_distance = decision.distance;
      st.timeline.deduped = now_ms();
      store.insert(st);
      events.append(id, "registered", to_json(st));
      if (decision.unique) classify_q.push(ClassifyJob{std::move(rec)});
    };
    try {
      while (auto d = done_q.pop()) {
        pending.emplace(d->seq, std::move(*d));
        for (auto it = pending.find(next); it != pending.end(); it = pending.find(next)) {
          process(it->second);
          pending.erase(it);
          ++next;
        }
      }
    } catch (...) {
      dedup_error = std::current_exception();
      while (done_q.pop()) {
      }
    }
    classify_q.close();
  });

  // Ingest on the calling thread.
  IngestStats ingest;
  std::uint64_t total_tweets = 0;
  std::uint64_t next_seq = 0;
  std::unordered_map<std::string, std::vector<std::string>> url_tweets;
  std::exception_ptr ingest_error;
  try {
    ingest.parse = parse_stream(source, [&](TweetRecord&& t) {
      if (config.apply_keyword_filter && !filter.matches(t.text)) {
        ++ingest.filtered_out;
        return;
      }
      ++total_tweets;
      auto extracted = extract_image_urls(t);
      ingest.urls_dropped += extracted.dropped;
      ingest.url_refs += extracted.refs.size();
      for (auto& ref : extracted.refs) {
        url_tweets[ref.url].push_back(t.tweet_id);
        if (url_index.register_url(ref) == UrlRegistration::Unique) {
          fetch_q.push(FetchJob{next_seq++, std::move(ref)});
        }
      }
    });
  } catch (...) {
    ingest_error = std::current_exception();
  }

  fetch_q.close();
  for (auto& t : fetchers) t.join();
  done_q.close();
  deduper.join();
  for (auto& t : classifiers) t.join();
  if (ingest_error) std::rethrow_exception(ingest_error);
  if (dedup_error) std::rethrow_exception(dedup_error);

  for (auto& s : store.snapshot()) {
    auto it = url_tweets.find(s.source_url);
    if (it == url_tweets.end()) continue;
    store.update(s.image_id, [&](ImageState& target) { target.tweet_ids = it->second; });
    events.append(s.image_id, "tweets", {{"tweet_ids", it->second}});
  }

  auto before = store.snapshot();
  propagate_cluster_labels(store);
  PipelineResult result{.index = std::move(index)};
  result.states = store.snapshot();
  for (std::size_t i = 0; i < result.states.size(); ++i) {
    const auto& s = result.states[i];
    if (!s.inherited) continue;
    events.append(s.image_id, "inherited",
                  {{"relevance", s.relevance ? json(to_string(*s.relevance)) : json(nullptr)},
                   {"damage", s.damage ? json(to_string(*s.damage)) : json(nullptr)},
                   {"dead_letter", s.dead_letter ? json(*s.dead_letter) : json(nullptr)}});
    if (s.dead_letter && !before[i].dead_letter) {
      dead_letters.push_back({s.image_id, s.source_url, "inherited", *s.dead_letter});
    }
  }

  std::sort(dead_letters.begin(), dead_letters.end(),
            [](const DeadLetter& a, const DeadLetter& b) { return a.url < b.url; });
  for (const auto& d : dead_letters) ++result.dead_letter_reasons[d.stage];

  result.ingest = ingest;
  result.fetch_failures = std::move(fetch_failures);
  result.failed_urls = std::move(failed_urls);
  result.dead_letters = std::move(dead_letters);
  result.accounting = account(result.states, total_tweets, url_index.count_unique(), result.failed_urls.size());

  std::vector<Timestamp> failed_at;
  for (const auto& [t, _] : result.failed_urls) failed_at.push_back(t);
  result.buckets = bucketize(result.states, config.bucket_width, failed_at);
  return result;
}

// ---------------------------------------------------------------------------

json to_json(const StageAccounting& a) {
  return {{"total_tweets", a.total_tweets},   {"unique_urls", a.unique_urls},
          {"downloaded", a.downloaded},       {"failed", a.failed},
          {"unique_images", a.unique_images}, {"duplicate_images", a.duplicate_images},
          {"relevant", a.relevant},           {"not_relevant", a.not_relevant},
          {"with_damage", a.with_damage},     {"severe", a.severe},
          {"mild", a.mild},                   {"no_damage", a.no_damage},
          {"dead_lettered", a.dead_lettered}};
}

json accounting_json(const PipelineResult& r) {
  json ingest{{"lines_in", r.ingest.parse.lines_in},
              {"records_out", r.ingest.parse.records_out},
              {"skipped", r.ingest.parse.skipped},
              {"filtered_out", r.ingest.filtered_out},
              {"url_refs", r.ingest.url_refs},
              {"urls_dropped", r.ingest.urls_dropped}};
  return {{"accounting", to_json(r.accounting)},
          {"identities_violated", r.accounting.violated_identities()},
          {"ingest", ingest},
          {"fetch_failures", r.fetch_failures},
          {"dead_letter_reasons", r.dead_letter_reasons},
          {"clusters", r.index.cluster_count()}};
}

std::string accounting_csv(const StageAccounting& a) {
  std::string out =
      "Total tweets,Unique image URLs,Downloaded images,Failed to download,"
      "Unique images,Relevant images,Images with damage,Severe damage,Mild damage,"
      "Duplicate images,Not relevant images,Images with no damage,Dead-lettered images\n";
  for (auto v : {a.total_tweets, a.unique_urls, a.downloaded, a.failed, a.unique_images, a.relevant,
                 a.with_damage, a.severe, a.mild, a.duplicate_images, a.not_relevant, a.no_damage}) {
    out += std::to_string(v) + ",";
  }
  out += std::to_string(a.dead_lettered) + "\n";
  return out;
}

std::string timeseries_csv(std::span<const TimeBucket> buckets) {
  std::string out = "bucket_start,total,relevant,irrelevant,severe,mild\n";
  for (const auto& b : buckets) {
    const auto& c = b.counts;
    out += format_iso8601(b.bucket_start) + "," + std::to_string(c.downloaded) + "," +
           std::to_string(c.relevant) + "," + std::to_string(c.not_relevant) + "," +
           std::to_string(c.severe) + "," + std::to_string(c.mild) + "\n";
  }
  return out;
}

void write_run_outputs(const PipelineResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name, std::ios::openmode mode = std::ios::out) {
    std::ofstream f(dir / name, mode | std::ios::trunc);
    if (!f) throw InputError("cannot write " + (dir / name).string());
    return f;
  };
  open("accounting.json") << accounting_json(result).dump(2) << '\n';
  open("accounting.csv") << accounting_csv(result.accounting);
  open("timeseries.csv") << timeseries_csv(result.buckets);
  {
    auto f = open("states.jsonl");
    for (const auto& s : result.states) f << to_json(s).dump() << '\n';
  }
  {
    auto f = open("dead_letter.jsonl");
    for (const auto& d : result.dead_letters) {
      f << json{{"image_id", d.image_id}, {"url", d.url}, {"stage", d.stage}, {"reason", d.reason}}.dump()
        << '\n';
    }
  }
  {
    auto f = open("index.bin", std::ios::out | std::ios::binary);
    result.index.save(f);
  }
}

std::vector<ImageState> load_states(const std::filesystem::path& states_jsonl) {
  std::ifstream in(states_jsonl);
  if (!in) throw InputError("cannot read " + states_jsonl.string());
  std::vector<ImageState> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw InputError("malformed line in " + states_jsonl.string());
    out.push_back(image_state_from_json(j));
  }
  return out;
}

}  // namespace triage
