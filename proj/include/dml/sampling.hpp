#pragma once

#include "dml/core.hpp"
#include "dml/losses.hpp"

#include <cstdint>
#include <random>

namespace dml {

/// Deterministic pseudo-random stream. All derived quantities (bounded
/// ints, reals, normals, shuffles) are implemented on top of the raw
/// mt19937_64 output so that identical seeds give identical results on
/// every platform.
class SamplerRng {
 public:
  explicit SamplerRng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform integer in [0, n), unbiased (rejection sampling).
  std::size_t uniform_index(std::size_t n);
  /// Uniform real in [0, 1) with 53 bits of precision.
  double uniform_real();
  /// Standard normal via Box-Muller.
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[uniform_index(i)]);
  }

  /// Independent child stream, stable under the parent's call history.
  SamplerRng split(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }
  std::string serialize_state() const;
  void restore_state(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool have_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

using DatasetIndex = std::map<int, std::vector<int>>;  // class id -> sample ids

enum class PlanKind { Triplets, Pairs, NPairs, Episode };

/// Uniform carrier between samplers and losses; exactly the field
/// matching `kind` is populated.
struct BatchPlan {
  PlanKind kind = PlanKind::Triplets;
  TripletIndexSet triplets;
  PairIndexSet pairs;
  NPairsLayout npairs_layout;
  std::vector<EpisodeLayout> episodes;
};

struct ComposedBatch {
  std::vector<int> dataset_indices;  // rows to pull from the dataset
  BatchPlan plan;
};

/// For each ordered same-class (anchor, positive) pair, picks the
/// closest negative farther than the positive; when none qualifies,
/// falls back to the farthest negative. Ties break toward the lower
/// index.
BatchPlan semi_hard_mine(const EmbeddingBatch& batch, const DistanceMatrix& distances,
                         double margin);

struct DistanceWeightedClip {
  double lambda_min = 0.0;
  // <= 0 selects the default cap: 1e4 times the smallest candidate weight
  double lambda_max = 0.0;
};

struct DistanceWeightedDraw {
  int index = -1;
  bool uniform_fallback = false;  // set when D < 3 forces uniform sampling
};

/// Inverse density of pairwise distances on the unit (D-1)-sphere,
/// clipped: min(lambda_max, max(lambda_min, q(d)^-1)) with
/// q(d) ~ d^(D-2) (1 - d^2/4)^((D-3)/2).
std::vector<double> distance_weighted_weights(const std::vector<double>& dists, int dim,
                                              const DistanceWeightedClip& clip);

DistanceWeightedDraw distance_weighted_sample(const EmbeddingBatch& batch,
                                              const DistanceMatrix& distances, int anchor,
                                              SamplerRng& rng,
                                              const DistanceWeightedClip& clip = {});

ComposedBatch npairs_compose(const DatasetIndex& index, int n_classes, SamplerRng& rng);

ComposedBatch episodic_compose(const DatasetIndex& index, const EpisodeSpec& spec,
                               int episodes_per_batch, SamplerRng& rng);

std::vector<int> class_balanced_compose(const DatasetIndex& index, int n_classes, int per_class,
                                        SamplerRng& rng);

/// All same-class and cross-class pairs of a batch (lifted-structure
/// style consumption).
PairIndexSet all_pairs(const EmbeddingBatch& batch);

/// One positive pair (uniform partner) and one negative pair
/// (distance-weighted partner) per eligible anchor; the pairing scheme
/// behind margin loss.
PairIndexSet distance_weighted_pairs(const EmbeddingBatch& batch, const DistanceMatrix& distances,
                                     SamplerRng& rng, const DistanceWeightedClip& clip = {});

}  // namespace dml
