#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "triage/common.hpp"
#include "triage/fetch.hpp"

namespace triage {

struct FeatureVector {
  std::vector<double> values;
  std::string image_id;
};

struct DedupConfig {
  double distance_threshold = 20.0;  // strict: distance < threshold is a duplicate
  std::size_t dimension = 4096;
  // When set, duplicates also become search targets (compare against every
  // prior image rather than prior uniques only).
  bool index_duplicates = false;

  void validate() const;
};

struct ClusterId {
  std::uint64_t id = 0;
  std::string canonical_image_id;

  friend bool operator==(const ClusterId&, const ClusterId&) = default;
};

struct DedupDecision {
  bool unique = true;
  ClusterId cluster;
  double distance = 0.0;  // meaningful for duplicates only
};

struct NearestHit {
  ClusterId cluster;
  double distance = 0.0;
};

/// Euclidean (L2) distance. Throws ContractViolation on dimension mismatch.
double euclidean_distance(std::span<const double> a, std::span<const double> b);

inline double euclidean_distance(const FeatureVector& a, const FeatureVector& b) {
  return euclidean_distance(a.values, b.values);
}

/// Exact, greedy-sequential near-duplicate index.
///
/// A vector joins the cluster of its nearest stored vector when that
/// distance is strictly below the threshold; otherwise it founds a new
/// cluster and becomes searchable. Cluster ids count up from 0. Nearest-hit
/// ties resolve to the lowest cluster id. Insertions take an exclusive lock
/// so concurrent insert_or_match calls are linearizable; nearest() runs
/// under a shared lock.
class DedupIndex {
 public:
  explicit DedupIndex(DedupConfig cfg = {});

  DedupIndex(const DedupIndex&) = delete;
  DedupIndex& operator=(const DedupIndex&) = delete;
  DedupIndex(DedupIndex&&) noexcept;
  DedupIndex& operator=(DedupIndex&&) noexcept;

  DedupDecision insert_or_match(const FeatureVector& v);
  std::optional<NearestHit> nearest(const FeatureVector& v) const;

  const DedupConfig& config() const { return cfg_; }
  std::size_t cluster_count() const;
  std::size_t searchable_count() const;
  std::vector<std::string> members(std::uint64_t cluster_id) const;

  /// Binary snapshot, little-endian:
  ///   magic "TRDX" | u32 version=1 | u64 dimension | f64 threshold | u64 count
  ///   count x { u64 cluster_id | str canonical_image_id
  ///             | dimension x f64 canonical vector
  ///             | u32 n_members | n_members x str member_image_id }
  /// where str = u32 byte length followed by the bytes.
  void save(std::ostream& out) const;
  /// Throws InputError for bad magic, version or truncated data.
  static DedupIndex load(std::istream& in);

 private:
  struct Cluster {
    std::string canonical;
    std::vector<std::string> members;  // includes the canonical, in insertion order
  };

  void check_vector(std::span<const double> v) const;
  std::optional<NearestHit> nearest_locked(std::span<const double> v) const;

  DedupConfig cfg_;
  mutable std::shared_mutex mu_;
  std::vector<double> store_;             // searchable vectors, row-major
  std::vector<std::uint64_t> store_owner_;  // cluster id per searchable row
  std::vector<Cluster> clusters_;
};

inline DedupDecision insert_or_match(const FeatureVector& v, DedupIndex& index) {
  return index.insert_or_match(v);
}

inline std::optional<NearestHit> nearest(const FeatureVector& v, const DedupIndex& index) {
  return index.nearest(v);
}

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<double> extract(const ImageRecord& image) = 0;
};

/// Runs the extractor and validates the result: length must equal
/// `dimension` and all entries must be finite. Any failure becomes a
/// StageError for stage "extract".
FeatureVector extract_features(const ImageRecord& image, FeatureExtractor& extractor,
                               std::size_t dimension);

/// Returns the manifest-provided feature row for the image's source URL.
class ReplayExtractor final : public FeatureExtractor {
 public:
  explicit ReplayExtractor(std::shared_ptr<const Manifest> manifest)
      : manifest_(std::move(manifest)) {}
  std::vector<double> extract(const ImageRecord& image) override;

 private:
  std::shared_ptr<const Manifest> manifest_;
};

}  // namespace triage
