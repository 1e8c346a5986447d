#pragma once

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace dml {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ParamMap = std::map<std::string, Matrix>;

/// A batch of N embedding vectors (rows) with integer class labels.
struct EmbeddingBatch {
  Matrix vectors;           // N x D
  std::vector<int> labels;  // length N
  bool normalized = false;  // rows are L2-unit when true

  Eigen::Index size() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
  void validate() const;  // throws std::invalid_argument on shape violations
};

enum class Metric { SquaredEuclidean, Euclidean, CosineDistance, NegativeDot };

const char* metric_name(Metric m);

struct DistanceMatrix {
  Matrix values;  // N x N
  Metric metric = Metric::SquaredEuclidean;
};

/// Scalar loss value plus exact partials w.r.t. embeddings and any
/// trainable loss parameters (proxies, per-class margins).
struct DifferentiableResult {
  double value = 0.0;
  Matrix grad_embeddings;  // N x D
  ParamMap grad_params;
  // Distance from the evaluation point to the nearest non-smooth point
  // (hinge kink, discrete argmin/argmax switch). Infinity when smooth.
  double kink_margin = std::numeric_limits<double>::infinity();

  void track_kink(double hinge_arg) {
    double a = std::abs(hinge_arg);
    if (a < kink_margin) kink_margin = a;
  }
};

[[nodiscard]] DistanceMatrix pairwise_distances(const EmbeddingBatch& batch, Metric metric);

[[nodiscard]] EmbeddingBatch l2_normalize(const EmbeddingBatch& batch);

/// Row-normalize a raw matrix; returns the unit-row matrix.
[[nodiscard]] Matrix l2_normalize_rows(const Matrix& raw);

/// Pull a gradient w.r.t. unit rows back to the raw (pre-normalization)
/// rows: dL/dx = (dL/dy - (dL/dy . y) y) / ||x||.
[[nodiscard]] Matrix l2_normalize_backward(const Matrix& raw, const Matrix& unit,
                                           const Matrix& grad_unit);

/// A loss bound to fixed hyperparameters, exposing its trainable
/// parameters so they can be perturbed and updated externally.
struct LossEvaluator {
  std::function<DifferentiableResult(const EmbeddingBatch&, const ParamMap&)> fn;
  ParamMap params;

  DifferentiableResult operator()(const EmbeddingBatch& batch) const { return fn(batch, params); }
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  // True when the evaluation point sits within `kink_tolerance` of a
  // hinge kink and the comparison was skipped.
  bool skipped_near_kink = false;
  std::string worst_coordinate;
};

/// Compares analytic gradients against central finite differences,
/// one coordinate at a time, over embeddings and trainable parameters.
/// Relative error: |a-f| / max(1e-8, |a|+|f|).
GradCheckReport grad_check(const LossEvaluator& evaluator, const EmbeddingBatch& batch,
                           double step, double tolerance, double kink_tolerance = 1e-3);

/// Numerically stable log(sum_i exp(v_i)); -inf for an empty input.
double log_sum_exp(const std::vector<double>& values);

}  // namespace dml
