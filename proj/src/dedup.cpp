#include "triage/dedup.hpp"

#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <mutex>
#include <ostream>

namespace triage {

void DedupConfig::validate() const {
  if (!(distance_threshold > 0.0) || !std::isfinite(distance_threshold))
    throw ConfigError("dedup distance_threshold must be a positive finite number");
  if (dimension == 0) throw ConfigError("dedup dimension must be positive");
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ContractViolation("euclidean_distance: dimension mismatch (" +
                            std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

DedupIndex::DedupIndex(DedupConfig cfg) : cfg_(cfg) { cfg_.validate(); }

DedupIndex::DedupIndex(DedupIndex&& o) noexcept
    : cfg_(o.cfg_),
      store_(std::move(o.store_)),
      store_owner_(std::move(o.store_owner_)),
      clusters_(std::move(o.clusters_)) {}

DedupIndex& DedupIndex::operator=(DedupIndex&& o) noexcept {
  cfg_ = o.cfg_;
  store_ = std::move(o.store_);
  store_owner_ = std::move(o.store_owner_);
  clusters_ = std::move(o.clusters_);
  return *this;
}

void DedupIndex::check_vector(std::span<const double> v) const {
  if (v.size() != cfg_.dimension)
    throw ContractViolation("feature dimension " + std::to_string(v.size()) +
                            " does not match index dimension " +
                            std::to_string(cfg_.dimension));
  for (double x : v) {
    if (!std::isfinite(x)) throw ContractViolation("feature vector has non-finite entries");
  }
}

std::optional<NearestHit> DedupIndex::nearest_locked(std::span<const double> v) const {
  const std::size_t dim = cfg_.dimension;
  const std::size_t rows = store_owner_.size();
  if (rows == 0) return std::nullopt;

  double best = std::numeric_limits<double>::infinity();
  std::uint64_t best_owner = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = store_.data() + r * dim;
    double sum = 0.0;
    std::size_t i = 0;
    // Partial sums only grow, so a row already above the best can be dropped.
    for (; i < dim; ++i) {
      const double d = v[i] - row[i];
      sum += d * d;
      if (sum > best) break;
    }
    if (i < dim) continue;
    if (sum < best || (sum == best && store_owner_[r] < best_owner)) {
      best = sum;
      best_owner = store_owner_[r];
    }
  }
  return NearestHit{ClusterId{best_owner, clusters_[best_owner].canonical}, std::sqrt(best)};
}

std::optional<NearestHit> DedupIndex::nearest(const FeatureVector& v) const {
  check_vector(v.values);
  std::shared_lock lock(mu_);
  return nearest_locked(v.values);
}

DedupDecision DedupIndex::insert_or_match(const FeatureVector& v) {
  check_vector(v.values);
  std::unique_lock lock(mu_);
  auto hit = nearest_locked(v.values);
  if (hit && hit->distance < cfg_.distance_threshold) {
    clusters_[hit->cluster.id].members.push_back(v.image_id);
    if (cfg_.index_duplicates) {
      store_.insert(store_.end(), v.values.begin(), v.values.end());
      store_owner_.push_back(hit->cluster.id);
    }
    return DedupDecision{false, hit->cluster, hit->distance};
  }
  const std::uint64_t id = clusters_.size();
  clusters_.push_back(Cluster{v.image_id, {v.image_id}});
  store_.insert(store_.end(), v.values.begin(), v.values.end());
  store_owner_.push_back(id);
  return DedupDecision{true, ClusterId{id, v.image_id}, 0.0};
}

std::size_t DedupIndex::cluster_count() const {
  std::shared_lock lock(mu_);
  return clusters_.size();
}

std::size_t DedupIndex::searchable_count() const {
  std::shared_lock lock(mu_);
  return store_owner_.size();
}

std::vector<std::string> DedupIndex::members(std::uint64_t cluster_id) const {
  std::shared_lock lock(mu_);
  if (cluster_id >= clusters_.size()) return {};
  return clusters_[cluster_id].members;
}

namespace {

constexpr char kMagic[4] = {'T', 'R', 'D', 'X'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::ostream& out, const std::string& s) {
  put_le(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw InputError("dedup snapshot truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

std::string get_str(std::istream& in) {
  auto len = get_le<std::uint32_t>(in);
  std::string s(len, '\0');
  if (len && !in.read(s.data(), len)) throw InputError("dedup snapshot truncated");
  return s;
}

}  // namespace

void DedupIndex::save(std::ostream& out) const {
  std::shared_lock lock(mu_);
  out.write(kMagic, sizeof kMagic);
  put_le(out, kVersion);
  put_le(out, static_cast<std::uint64_t>(cfg_.dimension));
  put_f64(out, cfg_.distance_threshold);
  put_le(out, static_cast<std::uint64_t>(clusters_.size()));

  // The first searchable row of each cluster is its canonical vector.
  std::vector<std::size_t> canonical_row(clusters_.size(), 0);
  std::vector<bool> seen(clusters_.size(), false);
  for (std::size_t r = 0; r < store_owner_.size(); ++r) {
    if (!seen[store_owner_[r]]) {
      seen[store_owner_[r]] = true;
      canonical_row[store_owner_[r]] = r;
    }
  }
  for (std::size_t c = 0; c < clusters_.size(); ++c) {
    put_le(out, static_cast<std::uint64_t>(c));
    put_str(out, clusters_[c].canonical);
    const double* row = store_.data() + canonical_row[c] * cfg_.dimension;
    for (std::size_t i = 0; i < cfg_.dimension; ++i) put_f64(out, row[i]);
    put_le(out, static_cast<std::uint32_t>(clusters_[c].members.size()));
    for (const auto& m : clusters_[c].members) put_str(out, m);
  }
}

DedupIndex DedupIndex::load(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kMagic, 4))
    throw InputError("not a dedup snapshot (bad magic)");
  if (auto v = get_le<std::uint32_t>(in); v != kVersion)
    throw InputError("unsupported dedup snapshot version " + std::to_string(v));
  DedupConfig cfg;
  cfg.dimension = get_le<std::uint64_t>(in);
  cfg.distance_threshold = get_f64(in);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw InputError(std::string("dedup snapshot header: ") + e.what());
  }
  const auto count = get_le<std::uint64_t>(in);

  DedupIndex index(cfg);
  for (std::uint64_t c = 0; c < count; ++c) {
    if (get_le<std::uint64_t>(in) != c) throw InputError("dedup snapshot cluster ids out of order");
    Cluster cl;
    cl.canonical = get_str(in);
    for (std::size_t i = 0; i < cfg.dimension; ++i) index.store_.push_back(get_f64(in));
    index.store_owner_.push_back(c);
    auto n = get_le<std::uint32_t>(in);
    cl.members.reserve(n);
    for (std::uint32_t m = 0; m < n; ++m) cl.members.push_back(get_str(in));
    index.clusters_.push_back(std::move(cl));
  }
  return index;
}

FeatureVector extract_features(const ImageRecord& image, FeatureExtractor& extractor,
                               std::size_t dimension) {
  std::vector<double> values;
  try {
    values = extractor.extract(image);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("extract", std::string("extractor failed: ") + e.what());
  }
  if (values.size() != dimension)
    throw StageError("extract", "extractor returned " + std::to_string(values.size()) +
                                    " values, expected " + std::to_string(dimension));
  for (double x : values) {
    if (!std::isfinite(x)) throw StageError("extract", "extractor returned non-finite values");
  }
  return FeatureVector{std::move(values), image.image_id};
}

std::vector<double> ReplayExtractor::extract(const ImageRecord& image) {
  const ManifestEntry* e = manifest_->find(image.source_url);
  if (!e || !e->feature) throw StageError("extract", "no feature row for " + image.source_url);
  return *e->feature;
}

}  // namespace triage
