#pragma once

#include "dml/core.hpp"

namespace dml {

// Index-level structure consumed by the pair/triplet losses.

struct PairIndexSet {
  std::vector<std::pair<int, int>> positives;  // same label, i != j
  std::vector<std::pair<int, int>> negatives;  // differing labels
  void validate(const EmbeddingBatch& batch) const;
};

struct TripletIndexSet {
  struct Triplet {
    int anchor, positive, negative;
  };
  std::vector<Triplet> triplets;
  void validate(const EmbeddingBatch& batch) const;
};

/// One learnable embedding per training class. The class -> proxy row
/// assignment is static; proxies themselves train with the encoder.
struct ProxyBank {
  Matrix proxies;                // C x D
  std::map<int, int> assignment; // class id -> proxy row
  bool trainable = true;
  double scale = 3.0;
  bool normalize = true;

  void validate() const;
  int row_for(int label) const;  // throws std::domain_error on unassigned label
};

struct MarginLossParams {
  Vector beta;          // learnable per-class margin, indexed by class id
  double alpha = 0.2;   // separation margin
  bool trainable_beta = true;
};

struct AngularParams {
  double alpha_degrees = 45.0;  // angle bound, in (0, 90)
  // When set, returns angular + combination_weight * npairs (the source
  // method's recommended combined form).
  bool combine_with_npairs = false;
  double combination_weight = 2.0;
};

struct RankedListParams {
  double alpha = 1.2;        // negative boundary
  double m = 0.4;            // margin; positives pulled inside alpha - m
  double lambda = 1.0;       // balance between positive and negative terms
  double temperature = 10.0; // negative-weighting strength; 0 = uniform
  void validate() const;
};

enum class ClustInference { Greedy, GreedyWithSwaps, Exhaustive };

struct StructClustParams {
  double gamma = 1.0;  // structured-margin weight
  ClustInference inference = ClustInference::Greedy;
};

struct EpisodeSpec {
  int classes_per_episode = 2;
  int support_per_class = 1;
  int query_per_class = 1;
  void validate() const;
};

/// One episode: per-class support and query index lists.
struct EpisodeLayout {
  struct ClassGroup {
    int label;
    std::vector<int> support;
    std::vector<int> query;
  };
  std::vector<ClassGroup> classes;
};

/// Ordered (anchor, positive) pairs spanning distinct classes.
struct NPairsLayout {
  std::vector<std::pair<int, int>> pairs;
  void validate(const EmbeddingBatch& batch) const;
};

// Loss functions. Each returns value + exact gradients; grad_params is
// populated only for losses with trainable parameters.

struct TripletConfig {
  Metric metric = Metric::SquaredEuclidean;
  bool normalize_inputs = true;
};

DifferentiableResult triplet_loss(const EmbeddingBatch& batch, const TripletIndexSet& triplets,
                                  double margin, const TripletConfig& config = {});

struct LiftedStructConfig {
  bool normalize_inputs = false;
};

DifferentiableResult lifted_struct_loss(const EmbeddingBatch& batch, const PairIndexSet& pairs,
                                        double margin, const LiftedStructConfig& config = {});

struct NPairsConfig {
  bool normalize_inputs = false;
  bool average_reversed = false;  // average with the pairs reversed
};

DifferentiableResult npairs_loss(const EmbeddingBatch& batch, const NPairsLayout& plan,
                                 double l2_reg, const NPairsConfig& config = {});

DifferentiableResult angular_loss(const EmbeddingBatch& batch, const NPairsLayout& plan,
                                  const AngularParams& params);

struct MarginLossConfig {
  bool normalize_inputs = true;
};

DifferentiableResult margin_loss(const EmbeddingBatch& batch, const PairIndexSet& pairs,
                                 const MarginLossParams& params,
                                 const MarginLossConfig& config = {});

struct RankedListConfig {
  bool normalize_inputs = true;
};

DifferentiableResult ranked_list_loss(const EmbeddingBatch& batch, const RankedListParams& params,
                                      const RankedListConfig& config = {});

DifferentiableResult struct_clust_loss(const EmbeddingBatch& batch,
                                       const StructClustParams& params);

DifferentiableResult prototypical_loss(const EmbeddingBatch& batch,
                                       const std::vector<EpisodeLayout>& episodes);

struct ProxyNcaConfig {
  // Eq. as printed excludes the positive proxy from the denominator;
  // opt-in variant includes it (bounds the loss below by 0).
  bool include_positive_in_denominator = false;
};

DifferentiableResult proxy_nca_loss(const EmbeddingBatch& batch, const ProxyBank& bank,
                                    const ProxyNcaConfig& config = {});

DifferentiableResult proxy_triplet_loss(const EmbeddingBatch& batch, const ProxyBank& bank,
                                        double margin);

DifferentiableResult proxy_softmax_loss(const EmbeddingBatch& batch, const ProxyBank& bank,
                                        double temperature);

}  // namespace dml
