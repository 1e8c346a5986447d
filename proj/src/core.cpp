#include "dml/core.hpp"

#include <cmath>
#include <stdexcept>

namespace dml {

void EmbeddingBatch::validate() const {
  if (vectors.rows() < 1 || vectors.cols() < 1)
    throw std::invalid_argument("EmbeddingBatch: need N >= 1 and D >= 1");
  if (static_cast<Eigen::Index>(labels.size()) != vectors.rows())
    throw std::invalid_argument("EmbeddingBatch: labels length " +
                                std::to_string(labels.size()) + " != row count " +
                                std::to_string(vectors.rows()));
  if (normalized) {
    for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
      if (std::abs(vectors.row(i).norm() - 1.0) > 1e-6)
        throw std::invalid_argument("EmbeddingBatch: normalized flag set but row " +
                                    std::to_string(i) + " is not unit norm");
    }
  }
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::SquaredEuclidean: return "squared-euclidean";
    case Metric::Euclidean: return "euclidean";
    case Metric::CosineDistance: return "cosine-distance";
    case Metric::NegativeDot: return "negative-dot";
  }
  return "unknown";
}

DistanceMatrix pairwise_distances(const EmbeddingBatch& batch, Metric metric) {
  batch.validate();
  const Matrix& x = batch.vectors;
  const Eigen::Index n = x.rows();

  DistanceMatrix out;
  out.metric = metric;

  Vector sq = x.rowwise().squaredNorm();
  Matrix gram = x * x.transpose();

  switch (metric) {
    case Metric::SquaredEuclidean:
    case Metric::Euclidean: {
      Matrix d = sq.replicate(1, n) + sq.transpose().replicate(n, 1) - 2.0 * gram;
      d = d.cwiseMax(0.0);
      d.diagonal().setZero();
      // symmetrize so accumulated rounding cannot break the contract
      d = 0.5 * (d + d.transpose()).eval();
      if (metric == Metric::Euclidean) d = d.cwiseSqrt();
      out.values = std::move(d);
      break;
    }
    case Metric::CosineDistance: {
      Vector norms = sq.cwiseSqrt();
      for (Eigen::Index i = 0; i < n; ++i) {
        if (norms(i) <= 0.0)
          throw std::domain_error("pairwise_distances: zero-norm row " + std::to_string(i) +
                                  " under cosine distance");
      }
      Matrix d = Matrix::Ones(n, n) - gram.cwiseQuotient(norms * norms.transpose());
      d = 0.5 * (d + d.transpose()).eval();
      out.values = std::move(d);
      break;
    }
    case Metric::NegativeDot:
      out.values = -gram;
      break;
  }
  return out;
}

Matrix l2_normalize_rows(const Matrix& raw) {
  Matrix out = raw;
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    double norm = raw.row(i).norm();
    if (norm <= 0.0)
      throw std::domain_error("l2_normalize: zero-norm row " + std::to_string(i));
    out.row(i) /= norm;
  }
  return out;
}

EmbeddingBatch l2_normalize(const EmbeddingBatch& batch) {
  batch.validate();
  EmbeddingBatch out = batch;
  out.vectors = l2_normalize_rows(batch.vectors);
  out.normalized = true;
  return out;
}

Matrix l2_normalize_backward(const Matrix& raw, const Matrix& unit, const Matrix& grad_unit) {
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    double norm = raw.row(i).norm();
    double dot = grad_unit.row(i).dot(unit.row(i));
    out.row(i) = (grad_unit.row(i) - dot * unit.row(i)) / norm;
  }
  return out;
}

double log_sum_exp(const std::vector<double>& values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

namespace {

double relative_error(double a, double f) {
  return std::abs(a - f) / std::max(1e-8, std::abs(a) + std::abs(f));
}

}  // namespace

GradCheckReport grad_check(const LossEvaluator& evaluator, const EmbeddingBatch& batch,
                           double step, double tolerance, double kink_tolerance) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

  GradCheckReport report;
  DifferentiableResult center = evaluator(batch);
  if (!std::isfinite(center.value))
    throw std::domain_error("grad_check: non-finite loss at the evaluation point");
  if (center.kink_margin < kink_tolerance) {
    report.skipped_near_kink = true;
    report.pass = true;
    return report;
  }

  auto compare = [&](double analytic, double plus, double minus, const std::string& coord) {
    if (!std::isfinite(plus) || !std::isfinite(minus))
      throw std::domain_error("grad_check: non-finite loss at perturbed coordinate " + coord);
    double fd = (plus - minus) / (2.0 * step);
    // cancellation noise floor of the central difference itself; below
    // it the comparison carries no information
    double noise = 100.0 * std::numeric_limits<double>::epsilon() *
                   std::max({1.0, std::abs(plus), std::abs(minus)}) / (2.0 * step);
    double err = std::abs(analytic - fd) <= noise ? 0.0 : relative_error(analytic, fd);
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_coordinate = coord;
    }
  };

  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    for (Eigen::Index d = 0; d < batch.dim(); ++d) {
      EmbeddingBatch probe = batch;
      probe.normalized = false;  // perturbation breaks exact unit norm
      probe.vectors(i, d) += step;
      double plus = evaluator(probe).value;
      probe.vectors(i, d) -= 2.0 * step;
      double minus = evaluator(probe).value;
      compare(center.grad_embeddings(i, d), plus, minus,
              "embedding[" + std::to_string(i) + "," + std::to_string(d) + "]");
    }
  }

  for (const auto& [name, value] : evaluator.params) {
    auto it = center.grad_params.find(name);
    if (it == center.grad_params.end())
      throw std::domain_error("grad_check: loss did not report gradient for parameter " + name);
    for (Eigen::Index i = 0; i < value.rows(); ++i) {
      for (Eigen::Index j = 0; j < value.cols(); ++j) {
        LossEvaluator probe = evaluator;
        probe.params[name](i, j) += step;
        double plus = probe(batch).value;
        probe.params[name](i, j) -= 2.0 * step;
        double minus = probe(batch).value;
        compare(it->second(i, j), plus, minus,
                name + "[" + std::to_string(i) + "," + std::to_string(j) + "]");
      }
    }
  }

  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace dml
