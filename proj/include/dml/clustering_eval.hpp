#pragma once

#include "dml/core.hpp"

#include <cstdint>

namespace dml {

enum class ClustInference;  // defined in losses.hpp

struct ClusterAssignment {
  std::vector<int> assignment;  // cluster id per point

  /// Remap ids to contiguous 0..k-1 in first-appearance order.
  ClusterAssignment canonical() const;
};

struct FacilitySet {
  std::vector<int> indices;  // sorted distinct medoid indices
  void validate(Eigen::Index n) const;
};

enum class RetrievalMetric { Euclidean, Hamming };

struct EvalReport {
  std::map<int, double> recall_at;  // K -> score in [0,1]
  double nmi = 0.0;
  int n_queries = 0;
  RetrievalMetric metric = RetrievalMetric::Euclidean;

  void check_monotone() const;  // throws if recall is not monotone in K
};

/// Sign-thresholded embeddings compared under Hamming distance.
struct BinaryCodes {
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> bits;  // N x D, values 0/1
  std::vector<int> labels;
};

/// Exact K-NN retrieval hit rate. When `exclude_self_index` is true the
/// query and index sets are the same collection and query i skips index
/// i. Distance ties break toward the lower index.
EvalReport recall_at_k(const EmbeddingBatch& index_set, const EmbeddingBatch& query_set,
                       const std::vector<int>& ks, bool exclude_self_index = false);

EvalReport recall_at_k(const BinaryCodes& index_set, const BinaryCodes& query_set,
                       const std::vector<int>& ks, bool exclude_self_index = false);

/// NMI = 2 I(A;B) / (H(A) + H(B)), with 0 log 0 = 0 and the convention
/// that two entropy-free (single-cluster) partitions score 1.
double nmi(const ClusterAssignment& pred, const ClusterAssignment& truth);

/// F(X, S) = -sum_i min_{j in S} ||x_i - x_j||. Always <= 0.
double facility_score(const EmbeddingBatch& batch, const FacilitySet& s);

struct FacilityGradient {
  double score = 0.0;
  Matrix grad;
  // min over points of (second-nearest - nearest facility distance),
  // and of the nearest distance itself; small values flag non-smoothness
  double kink_margin = std::numeric_limits<double>::infinity();
};

FacilityGradient facility_score_gradient(const EmbeddingBatch& batch, const FacilitySet& s);

ClusterAssignment assign_to_facilities(const EmbeddingBatch& batch, const FacilitySet& s);

struct OracleClusteringResult {
  double score = 0.0;       // F~(X): best single medoid per ground-truth class
  FacilitySet medoids;
  Matrix grad;
  double kink_margin = std::numeric_limits<double>::infinity();
};

OracleClusteringResult oracle_clustering_score(const EmbeddingBatch& batch);

struct InferenceResult {
  FacilitySet facilities;
  double objective = 0.0;  // F(X,S) + gamma * (1 - NMI(g(S), Y))
  double kink_margin = std::numeric_limits<double>::infinity();
};

/// Finds the facility set maximizing the margin-augmented clustering
/// objective. Exhaustive mode enumerates all C(N,k) sets and is guarded
/// to N <= 12.
InferenceResult loss_augmented_inference(const EmbeddingBatch& batch, double gamma, int k,
                                         ClustInference mode);

}  // namespace dml
