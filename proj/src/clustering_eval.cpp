#include "dml/clustering_eval.hpp"

#include "dml/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace dml {

ClusterAssignment ClusterAssignment::canonical() const {
  ClusterAssignment out;
  out.assignment.reserve(assignment.size());
  std::unordered_map<int, int> remap;
  for (int id : assignment) {
    auto [it, inserted] = remap.emplace(id, static_cast<int>(remap.size()));
    out.assignment.push_back(it->second);
  }
  return out;
}

void FacilitySet::validate(Eigen::Index n) const {
  if (indices.empty()) throw std::invalid_argument("FacilitySet: empty");
  if (!std::is_sorted(indices.begin(), indices.end()))
    throw std::invalid_argument("FacilitySet: indices must be sorted");
  if (std::adjacent_find(indices.begin(), indices.end()) != indices.end())
    throw std::invalid_argument("FacilitySet: duplicate index");
  if (indices.front() < 0 || indices.back() >= n)
    throw std::invalid_argument("FacilitySet: index out of range");
}

void EvalReport::check_monotone() const {
  double prev = -1.0;
  for (const auto& [k, score] : recall_at) {
    if (score + 1e-12 < prev)
      throw std::logic_error("EvalReport: recall not monotone at K=" + std::to_string(k));
    prev = std::max(prev, score);
  }
}

namespace {

/// Shared retrieval core over a caller-supplied distance functor.
template <typename DistFn>
EvalReport recall_impl(Eigen::Index n_index, Eigen::Index n_query,
                       const std::vector<int>& index_labels, const std::vector<int>& query_labels,
                       const std::vector<int>& ks, bool exclude_self, RetrievalMetric metric,
                       DistFn&& dist) {
  if (ks.empty()) throw std::invalid_argument("recall_at_k: no K values");
  int max_k = *std::max_element(ks.begin(), ks.end());
  if (max_k < 1) throw std::invalid_argument("recall_at_k: K must be >= 1");
  Eigen::Index effective = exclude_self ? n_index - 1 : n_index;
  if (max_k > effective)
    throw std::domain_error("recall_at_k: K=" + std::to_string(max_k) +
                            " exceeds usable index size " + std::to_string(effective));

  std::vector<int> sorted_ks = ks;
  std::sort(sorted_ks.begin(), sorted_ks.end());

  EvalReport report;
  report.metric = metric;
  report.n_queries = static_cast<int>(n_query);
  for (int k : sorted_ks) report.recall_at[k] = 0.0;

  std::vector<std::pair<double, int>> order(n_index);
  for (Eigen::Index q = 0; q < n_query; ++q) {
    order.clear();
    for (Eigen::Index i = 0; i < n_index; ++i) {
      if (exclude_self && i == q) continue;
      order.emplace_back(dist(q, i), static_cast<int>(i));
    }
    // ties in distance break toward the lower index
    std::sort(order.begin(), order.end());
    // a query with no same-class item in the usable index cannot fail;
    // it counts as a (vacuous) hit at every K
    bool possible = false;
    for (const auto& [d, i] : order)
      if (index_labels[i] == query_labels[q]) possible = true;
    bool hit = !possible;
    size_t pos = 0;
    for (int k : sorted_ks) {
      for (; pos < static_cast<size_t>(k) && pos < order.size(); ++pos)
        if (index_labels[order[pos].second] == query_labels[q]) hit = true;
      if (hit) report.recall_at[k] += 1.0;
    }
  }
  for (auto& [k, score] : report.recall_at) score /= static_cast<double>(n_query);
  report.check_monotone();
  return report;
}

}  // namespace

EvalReport recall_at_k(const EmbeddingBatch& index_set, const EmbeddingBatch& query_set,
                       const std::vector<int>& ks, bool exclude_self_index) {
  index_set.validate();
  query_set.validate();
  if (index_set.dim() != query_set.dim())
    throw std::invalid_argument("recall_at_k: dimension mismatch");
  if (exclude_self_index && index_set.size() != query_set.size())
    throw std::invalid_argument("recall_at_k: self-exclusion requires identical collections");
  return recall_impl(
      index_set.size(), query_set.size(), index_set.labels, query_set.labels, ks,
      exclude_self_index, RetrievalMetric::Euclidean,
      [&](Eigen::Index q, Eigen::Index i) {
        return (query_set.vectors.row(q) - index_set.vectors.row(i)).norm();
      });
}

EvalReport recall_at_k(const BinaryCodes& index_set, const BinaryCodes& query_set,
                       const std::vector<int>& ks, bool exclude_self_index) {
  if (index_set.bits.cols() != query_set.bits.cols())
    throw std::invalid_argument("recall_at_k: code length mismatch");
  return recall_impl(
      index_set.bits.rows(), query_set.bits.rows(), index_set.labels, query_set.labels, ks,
      exclude_self_index, RetrievalMetric::Hamming,
      [&](Eigen::Index q, Eigen::Index i) {
        int h = 0;
        for (Eigen::Index d = 0; d < index_set.bits.cols(); ++d)
          h += index_set.bits(i, d) != query_set.bits(q, d);
        return static_cast<double>(h);
      });
}

double nmi(const ClusterAssignment& pred, const ClusterAssignment& truth) {
  if (pred.assignment.size() != truth.assignment.size())
    throw std::invalid_argument("nmi: partition length mismatch");
  const size_t n = pred.assignment.size();
  if (n == 0) throw std::invalid_argument("nmi: empty partitions");

  ClusterAssignment a = pred.canonical();
  ClusterAssignment b = truth.canonical();
  int ka = *std::max_element(a.assignment.begin(), a.assignment.end()) + 1;
  int kb = *std::max_element(b.assignment.begin(), b.assignment.end()) + 1;

  Matrix counts = Matrix::Zero(ka, kb);
  for (size_t i = 0; i < n; ++i) counts(a.assignment[i], b.assignment[i]) += 1.0;
  Vector ra = counts.rowwise().sum();
  Vector cb = counts.colwise().sum();
  const double dn = static_cast<double>(n);

  auto entropy = [&](const Vector& marginal) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < marginal.size(); ++i) {
      double p = marginal(i) / dn;
      if (p > 0.0) h -= p * std::log(p);
    }
    return h;
  };
  double ha = entropy(ra), hb = entropy(cb);
  if (ha + hb == 0.0) return 1.0;

  double mi = 0.0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j) {
      double nij = counts(i, j);
      if (nij > 0.0) mi += (nij / dn) * std::log(dn * nij / (ra(i) * cb(j)));
    }
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

double facility_score(const EmbeddingBatch& batch, const FacilitySet& s) {
  batch.validate();
  s.validate(batch.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j : s.indices)
      best = std::min(best, (batch.vectors.row(i) - batch.vectors.row(j)).norm());
    total -= best;
  }
  return total;
}

FacilityGradient facility_score_gradient(const EmbeddingBatch& batch, const FacilitySet& s) {
  batch.validate();
  s.validate(batch.size());
  FacilityGradient out;
  out.grad = Matrix::Zero(batch.size(), batch.dim());

  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    int best_j = -1;
    for (int j : s.indices) {
      double d = (batch.vectors.row(i) - batch.vectors.row(j)).norm();
      if (d < best) {
        second = best;
        best = d;
        best_j = j;
      } else if (d < second) {
        second = d;
      }
    }
    out.score -= best;
    if (best_j == static_cast<int>(i)) continue;  // own facility: term is identically 0
    if (std::isfinite(second)) out.kink_margin = std::min(out.kink_margin, second - best);
    if (best <= 0.0) {
      out.kink_margin = 0.0;  // coincident with a facility: norm kink
      continue;
    }
    out.kink_margin = std::min(out.kink_margin, best);
    Vector diff = (batch.vectors.row(i) - batch.vectors.row(best_j)).transpose() / best;
    out.grad.row(i) -= diff.transpose();
    out.grad.row(best_j) += diff.transpose();
  }
  return out;
}

ClusterAssignment assign_to_facilities(const EmbeddingBatch& batch, const FacilitySet& s) {
  batch.validate();
  s.validate(batch.size());
  ClusterAssignment out;
  out.assignment.resize(batch.size());
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_cluster = 0;
    for (size_t c = 0; c < s.indices.size(); ++c) {
      double d = (batch.vectors.row(i) - batch.vectors.row(s.indices[c])).norm();
      if (d < best) {  // strict: ties keep the lower facility index
        best = d;
        best_cluster = static_cast<int>(c);
      }
    }
    out.assignment[i] = best_cluster;
  }
  return out;
}

OracleClusteringResult oracle_clustering_score(const EmbeddingBatch& batch) {
  batch.validate();
  std::map<int, std::vector<int>> by_class;
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    by_class[batch.labels[i]].push_back(static_cast<int>(i));

  OracleClusteringResult out;
  out.grad = Matrix::Zero(batch.size(), batch.dim());

  for (const auto& [label, members] : by_class) {
    double best = -std::numeric_limits<double>::infinity();
    double second = -std::numeric_limits<double>::infinity();
    int best_medoid = -1;
    for (int candidate : members) {
      double score = 0.0;
      for (int i : members)
        score -= (batch.vectors.row(i) - batch.vectors.row(candidate)).norm();
      if (score > best) {
        second = best;
        best = score;
        best_medoid = candidate;
      } else if (score > second) {
        second = score;
      }
    }
    out.score += best;
    out.medoids.indices.push_back(best_medoid);
    if (std::isfinite(second)) out.kink_margin = std::min(out.kink_margin, best - second);
    for (int i : members) {
      if (i == best_medoid) continue;
      double d = (batch.vectors.row(i) - batch.vectors.row(best_medoid)).norm();
      if (d <= 0.0) {
        out.kink_margin = 0.0;
        continue;
      }
      out.kink_margin = std::min(out.kink_margin, d);
      Vector diff = (batch.vectors.row(i) - batch.vectors.row(best_medoid)).transpose() / d;
      out.grad.row(i) -= diff.transpose();
      out.grad.row(best_medoid) += diff.transpose();
    }
  }
  std::sort(out.medoids.indices.begin(), out.medoids.indices.end());
  return out;
}

namespace {

double augmented_objective(const EmbeddingBatch& batch, const FacilitySet& s, double gamma) {
  ClusterAssignment g = assign_to_facilities(batch, s);
  ClusterAssignment truth{batch.labels};
  return facility_score(batch, s) + gamma * (1.0 - nmi(g, truth));
}

}  // namespace

InferenceResult loss_augmented_inference(const EmbeddingBatch& batch, double gamma, int k,
                                         ClustInference mode) {
  batch.validate();
  const Eigen::Index n = batch.size();
  if (k < 1 || k > n)
    throw std::domain_error("loss_augmented_inference: k=" + std::to_string(k) +
                            " out of range for " + std::to_string(n) + " points");

  InferenceResult result;

  if (mode == ClustInference::Exhaustive) {
    if (n > 12)
      throw std::domain_error("loss_augmented_inference: exhaustive mode guarded to N <= 12, got " +
                              std::to_string(n));
    std::vector<int> combo(k);
    std::iota(combo.begin(), combo.end(), 0);
    double best = -std::numeric_limits<double>::infinity();
    double second = -std::numeric_limits<double>::infinity();
    FacilitySet best_set;
    while (true) {
      FacilitySet s{combo};
      double obj = augmented_objective(batch, s, gamma);
      if (obj > best) {
        second = best;
        best = obj;
        best_set = s;
      } else if (obj > second) {
        second = obj;
      }
      // next combination in lexicographic order
      int i = k - 1;
      while (i >= 0 && combo[i] == static_cast<int>(n) - k + i) --i;
      if (i < 0) break;
      ++combo[i];
      for (int j = i + 1; j < k; ++j) combo[j] = combo[j - 1] + 1;
    }
    result.facilities = best_set;
    result.objective = best;
    if (std::isfinite(second)) result.kink_margin = best - second;
    return result;
  }

  // greedy: k passes, each adding the point that maximizes the objective
  std::vector<int> chosen;
  for (int pass = 0; pass < k; ++pass) {
    double best = -std::numeric_limits<double>::infinity();
    int best_p = -1;
    for (Eigen::Index p = 0; p < n; ++p) {
      if (std::find(chosen.begin(), chosen.end(), static_cast<int>(p)) != chosen.end()) continue;
      std::vector<int> trial = chosen;
      trial.push_back(static_cast<int>(p));
      std::sort(trial.begin(), trial.end());
      double obj = augmented_objective(batch, FacilitySet{trial}, gamma);
      if (obj > best) {  // strict: ties keep the lower index
        best = obj;
        best_p = static_cast<int>(p);
      }
    }
    chosen.push_back(best_p);
  }
  std::sort(chosen.begin(), chosen.end());
  result.facilities = FacilitySet{chosen};
  result.objective = augmented_objective(batch, result.facilities, gamma);

  if (mode == ClustInference::GreedyWithSwaps) {
    bool improved = true;
    while (improved) {
      improved = false;
      for (size_t si = 0; si < result.facilities.indices.size() && !improved; ++si) {
        for (Eigen::Index p = 0; p < n && !improved; ++p) {
          if (std::find(result.facilities.indices.begin(), result.facilities.indices.end(),
                        static_cast<int>(p)) != result.facilities.indices.end())
            continue;
          std::vector<int> trial = result.facilities.indices;
          trial[si] = static_cast<int>(p);
          std::sort(trial.begin(), trial.end());
          double obj = augmented_objective(batch, FacilitySet{trial}, gamma);
          if (obj > result.objective + 1e-12) {
            result.facilities = FacilitySet{trial};
            result.objective = obj;
            improved = true;
          }
        }
      }
    }
  }
  return result;
}

}  // namespace dml
