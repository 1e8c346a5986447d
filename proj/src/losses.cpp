#include "dml/losses.hpp"

#include "dml/clustering_eval.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace dml {

namespace {

constexpr double kPi = 3.14159265358979323846;

/// Optional row normalization with its pullback, shared by losses whose
/// default operates on unit embeddings.
struct InputPipeline {
  const Matrix* raw;
  Matrix unit;
  bool normalize;

  const Matrix& x() const { return normalize ? unit : *raw; }
  Matrix backward(const Matrix& grad) const {
    return normalize ? l2_normalize_backward(*raw, unit, grad) : grad;
  }
};

InputPipeline make_pipeline(const EmbeddingBatch& batch, bool normalize) {
  InputPipeline p;
  p.raw = &batch.vectors;
  p.normalize = normalize;
  if (normalize) p.unit = l2_normalize_rows(batch.vectors);
  return p;
}

double sq_dist(const Matrix& x, int i, int j) { return (x.row(i) - x.row(j)).squaredNorm(); }

double eu_dist(const Matrix& x, int i, int j) { return (x.row(i) - x.row(j)).norm(); }

void check_index(int idx, Eigen::Index n, const char* what) {
  if (idx < 0 || idx >= n)
    throw std::invalid_argument(std::string(what) + ": index " + std::to_string(idx) +
                                " out of range for batch of " + std::to_string(n));
}

}  // namespace

void PairIndexSet::validate(const EmbeddingBatch& batch) const {
  const Eigen::Index n = batch.size();
  for (auto [i, j] : positives) {
    check_index(i, n, "PairIndexSet");
    check_index(j, n, "PairIndexSet");
    if (i == j || batch.labels[i] != batch.labels[j])
      throw std::invalid_argument("PairIndexSet: invalid positive pair (" + std::to_string(i) +
                                  "," + std::to_string(j) + ")");
  }
  for (auto [i, j] : negatives) {
    check_index(i, n, "PairIndexSet");
    check_index(j, n, "PairIndexSet");
    if (batch.labels[i] == batch.labels[j])
      throw std::invalid_argument("PairIndexSet: negative pair (" + std::to_string(i) + "," +
                                  std::to_string(j) + ") shares a label");
  }
}

void TripletIndexSet::validate(const EmbeddingBatch& batch) const {
  const Eigen::Index n = batch.size();
  for (const auto& t : triplets) {
    check_index(t.anchor, n, "TripletIndexSet");
    check_index(t.positive, n, "TripletIndexSet");
    check_index(t.negative, n, "TripletIndexSet");
    if (t.anchor == t.positive || batch.labels[t.anchor] != batch.labels[t.positive] ||
        batch.labels[t.anchor] == batch.labels[t.negative])
      throw std::invalid_argument("TripletIndexSet: invalid triplet (" +
                                  std::to_string(t.anchor) + "," + std::to_string(t.positive) +
                                  "," + std::to_string(t.negative) + ")");
  }
}

void ProxyBank::validate() const {
  if (proxies.rows() < 1) throw std::invalid_argument("ProxyBank: no proxies");
  std::set<int> rows;
  for (const auto& [label, row] : assignment) {
    if (row < 0 || row >= proxies.rows())
      throw std::invalid_argument("ProxyBank: assignment of class " + std::to_string(label) +
                                  " points past the proxy matrix");
    if (!rows.insert(row).second)
      throw std::invalid_argument("ProxyBank: assignment is not injective (row " +
                                  std::to_string(row) + " reused)");
  }
  if (scale <= 0.0) throw std::invalid_argument("ProxyBank: scale must be positive");
  if (normalize) {
    for (Eigen::Index i = 0; i < proxies.rows(); ++i)
      if (std::abs(proxies.row(i).norm() - 1.0) > 1e-6)
        throw std::invalid_argument("ProxyBank: normalize set but proxy row " +
                                    std::to_string(i) + " is not unit norm");
  }
}

int ProxyBank::row_for(int label) const {
  auto it = assignment.find(label);
  if (it == assignment.end())
    throw std::domain_error("ProxyBank: no proxy assigned to class " + std::to_string(label));
  return it->second;
}

void RankedListParams::validate() const {
  if (!(m > 0.0 && m < alpha))
    throw std::invalid_argument("RankedListParams: need 0 < m < alpha");
  if (lambda < 0.0) throw std::invalid_argument("RankedListParams: lambda must be >= 0");
  if (temperature < 0.0) throw std::invalid_argument("RankedListParams: temperature must be >= 0");
}

void EpisodeSpec::validate() const {
  if (classes_per_episode < 2 || support_per_class < 1 || query_per_class < 1)
    throw std::invalid_argument("EpisodeSpec: need K >= 2 and positive support/query counts");
}

void NPairsLayout::validate(const EmbeddingBatch& batch) const {
  if (pairs.size() < 2) throw std::domain_error("npairs layout: need at least 2 class pairs");
  std::set<int> seen_labels;
  std::set<int> used;
  for (auto [a, p] : pairs) {
    check_index(a, batch.size(), "NPairsLayout");
    check_index(p, batch.size(), "NPairsLayout");
    if (a == p || batch.labels[a] != batch.labels[p])
      throw std::domain_error("npairs layout: (anchor, positive) pair (" + std::to_string(a) +
                              "," + std::to_string(p) + ") is not a same-class pair");
    if (!seen_labels.insert(batch.labels[a]).second)
      throw std::domain_error("npairs layout: class " + std::to_string(batch.labels[a]) +
                              " appears in more than one pair");
    used.insert(a);
    used.insert(p);
  }
  if (static_cast<Eigen::Index>(used.size()) != batch.size() ||
      used.size() != 2 * pairs.size())
    throw std::domain_error("npairs layout: batch is not in 2-samples-per-class shape");
}

DifferentiableResult triplet_loss(const EmbeddingBatch& batch, const TripletIndexSet& triplets,
                                  double margin, const TripletConfig& config) {
  batch.validate();
  triplets.validate(batch);
  if (triplets.triplets.empty()) throw std::domain_error("triplet_loss: empty triplet set");
  if (margin <= 0.0) throw std::invalid_argument("triplet_loss: margin must be positive");

  auto pipe = make_pipeline(batch, config.normalize_inputs);
  const Matrix& x = pipe.x();
  const bool squared = config.metric == Metric::SquaredEuclidean;
  if (!squared && config.metric != Metric::Euclidean)
    throw std::invalid_argument("triplet_loss: metric must be (squared-)euclidean");

  DifferentiableResult res;
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  const double inv = 1.0 / static_cast<double>(triplets.triplets.size());

  for (const auto& t : triplets.triplets) {
    Vector ap = x.row(t.anchor) - x.row(t.positive);
    Vector an = x.row(t.anchor) - x.row(t.negative);
    double dap = squared ? ap.squaredNorm() : ap.norm();
    double dan = squared ? an.squaredNorm() : an.norm();
    double arg = dap - dan + margin;
    res.track_kink(arg);
    if (arg <= 0.0) continue;
    res.value += inv * arg;
    Vector gap = squared ? Vector(2.0 * ap) : Vector(ap / std::max(dap, 1e-12));
    Vector gan = squared ? Vector(2.0 * an) : Vector(an / std::max(dan, 1e-12));
    if (!squared) {
      res.track_kink(dap);
      res.track_kink(dan);
    }
    g.row(t.anchor) += inv * (gap - gan).transpose();
    g.row(t.positive) -= inv * gap.transpose();
    g.row(t.negative) += inv * gan.transpose();
  }
  res.grad_embeddings = pipe.backward(g);
  return res;
}

DifferentiableResult lifted_struct_loss(const EmbeddingBatch& batch, const PairIndexSet& pairs,
                                        double margin, const LiftedStructConfig& config) {
  batch.validate();
  pairs.validate(batch);
  if (pairs.positives.empty())
    throw std::domain_error("lifted_struct_loss: no positive pairs");

  auto pipe = make_pipeline(batch, config.normalize_inputs);
  const Matrix& x = pipe.x();

  // negative partners per endpoint; negative pairs are unordered
  std::vector<std::vector<int>> neg(x.rows());
  for (auto [u, v] : pairs.negatives) {
    neg[u].push_back(v);
    neg[v].push_back(u);
  }

  DifferentiableResult res;
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  const double inv_p = 1.0 / static_cast<double>(pairs.positives.size());

  for (auto [i, j] : pairs.positives) {
    std::vector<int> partners;   // endpoint that owns each term
    std::vector<int> others;     // the negative counterpart
    std::vector<double> terms;   // margin - d(endpoint, counterpart)
    for (int k : neg[i]) {
      partners.push_back(i);
      others.push_back(k);
      terms.push_back(margin - eu_dist(x, i, k));
    }
    for (int l : neg[j]) {
      partners.push_back(j);
      others.push_back(l);
      terms.push_back(margin - eu_dist(x, j, l));
    }
    if (terms.empty())
      throw std::domain_error("lifted_struct_loss: positive pair (" + std::to_string(i) + "," +
                              std::to_string(j) + ") has no negative counterpart");

    double lse = log_sum_exp(terms);
    double dij = eu_dist(x, i, j);
    double t = lse + dij;
    if (t <= 0.0) continue;  // squared hinge is C1 at 0, no kink to track
    res.value += 0.5 * inv_p * t * t;

    double dl_dt = inv_p * t;
    // through d(i,j)
    res.track_kink(dij);
    Vector diff = x.row(i) - x.row(j);
    Vector gd = diff / std::max(dij, 1e-12);
    g.row(i) += dl_dt * gd.transpose();
    g.row(j) -= dl_dt * gd.transpose();
    // through each negative distance, softmax-weighted
    for (size_t idx = 0; idx < terms.size(); ++idx) {
      double w = std::exp(terms[idx] - lse);
      int a = partners[idx], b = others[idx];
      double d = eu_dist(x, a, b);
      res.track_kink(d);
      Vector gn = (x.row(a) - x.row(b)).transpose() / std::max(d, 1e-12);
      g.row(a) -= dl_dt * w * gn.transpose();
      g.row(b) += dl_dt * w * gn.transpose();
    }
  }
  res.grad_embeddings = pipe.backward(g);
  return res;
}

namespace {

/// Shared body of the n-pairs softmax: anchors against the positives of
/// the other pairs. Accumulates value and gradient on `g`.
double npairs_direction(const Matrix& x, const std::vector<std::pair<int, int>>& pairs,
                        Matrix& g, double weight) {
  const size_t n = pairs.size();
  double value = 0.0;
  const double inv = weight / static_cast<double>(n);
  for (size_t i = 0; i < n; ++i) {
    auto [a, p] = pairs[i];
    double s_pos = x.row(a).dot(x.row(p));
    std::vector<double> z;  // score gaps against each other pair's positive
    z.reserve(n - 1);
    std::vector<int> negs;
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      int q = pairs[j].second;
      z.push_back(x.row(a).dot(x.row(q)) - s_pos);
      negs.push_back(q);
    }
    std::vector<double> with_zero = z;
    with_zero.push_back(0.0);
    double lse = log_sum_exp(with_zero);
    value += inv * lse;
    for (size_t j = 0; j < z.size(); ++j) {
      double w = std::exp(z[j] - lse);
      int q = negs[j];
      g.row(a) += inv * w * (x.row(q) - x.row(p));
      g.row(q) += inv * w * x.row(a);
      g.row(p) -= inv * w * x.row(a);
    }
  }
  return value;
}

}  // namespace

DifferentiableResult npairs_loss(const EmbeddingBatch& batch, const NPairsLayout& plan,
                                 double l2_reg, const NPairsConfig& config) {
  batch.validate();
  plan.validate(batch);
  if (l2_reg < 0.0) throw std::invalid_argument("npairs_loss: l2_reg must be >= 0");

  auto pipe = make_pipeline(batch, config.normalize_inputs);
  const Matrix& x = pipe.x();

  DifferentiableResult res;
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  if (config.average_reversed) {
    res.value += npairs_direction(x, plan.pairs, g, 0.5);
    std::vector<std::pair<int, int>> reversed;
    reversed.reserve(plan.pairs.size());
    for (auto [a, p] : plan.pairs) reversed.emplace_back(p, a);
    res.value += npairs_direction(x, reversed, g, 0.5);
  } else {
    res.value += npairs_direction(x, plan.pairs, g, 1.0);
  }
  res.grad_embeddings = pipe.backward(g);

  if (l2_reg > 0.0) {
    const double n = static_cast<double>(batch.size());
    res.value += l2_reg * batch.vectors.squaredNorm() / n;
    res.grad_embeddings += (2.0 * l2_reg / n) * batch.vectors;
  }
  return res;
}

DifferentiableResult angular_loss(const EmbeddingBatch& batch, const NPairsLayout& plan,
                                  const AngularParams& params) {
  batch.validate();
  plan.validate(batch);
  if (!(params.alpha_degrees > 0.0 && params.alpha_degrees < 90.0))
    throw std::domain_error("angular_loss: alpha must lie in (0, 90) degrees");

  auto pipe = make_pipeline(batch, true);  // angle interpretation needs unit rows
  const Matrix& x = pipe.x();
  const double tan_a = std::tan(params.alpha_degrees * kPi / 180.0);
  const double t2 = tan_a * tan_a;

  DifferentiableResult res;
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  const size_t n = plan.pairs.size();
  const double inv = 1.0 / static_cast<double>(n);

  for (size_t i = 0; i < n; ++i) {
    auto [a, p] = plan.pairs[i];
    double sap = x.row(a).dot(x.row(p));
    std::vector<double> f;
    std::vector<int> negs;
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      int q = plan.pairs[j].second;
      double val = 4.0 * t2 * (x.row(a) + x.row(p)).dot(x.row(q)) - 2.0 * (1.0 + t2) * sap;
      f.push_back(val);
      negs.push_back(q);
    }
    std::vector<double> with_zero = f;
    with_zero.push_back(0.0);
    double lse = log_sum_exp(with_zero);
    res.value += inv * lse;
    for (size_t j = 0; j < f.size(); ++j) {
      double w = std::exp(f[j] - lse);
      int q = negs[j];
      g.row(a) += inv * w * (4.0 * t2 * x.row(q) - 2.0 * (1.0 + t2) * x.row(p));
      g.row(p) += inv * w * (4.0 * t2 * x.row(q) - 2.0 * (1.0 + t2) * x.row(a));
      g.row(q) += inv * w * 4.0 * t2 * (x.row(a) + x.row(p));
    }
  }
  res.grad_embeddings = pipe.backward(g);

  if (params.combine_with_npairs) {
    DifferentiableResult np = npairs_loss(batch, plan, 0.0);
    res.value += params.combination_weight * np.value;
    res.grad_embeddings += params.combination_weight * np.grad_embeddings;
    res.kink_margin = std::min(res.kink_margin, np.kink_margin);
  }
  return res;
}

DifferentiableResult margin_loss(const EmbeddingBatch& batch, const PairIndexSet& pairs,
                                 const MarginLossParams& params, const MarginLossConfig& config) {
  batch.validate();
  pairs.validate(batch);
  if (params.alpha <= 0.0) throw std::invalid_argument("margin_loss: alpha must be positive");
  const size_t total = pairs.positives.size() + pairs.negatives.size();
  if (total == 0) throw std::domain_error("margin_loss: no pairs");
  if (!params.beta.allFinite()) throw std::invalid_argument("margin_loss: beta must be finite");

  auto pipe = make_pipeline(batch, config.normalize_inputs);
  const Matrix& x = pipe.x();

  auto beta_for = [&](int label) -> double {
    if (label < 0 || label >= params.beta.size())
      throw std::domain_error("margin_loss: no beta entry for class " + std::to_string(label));
    return params.beta(label);
  };

  DifferentiableResult res;
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  Vector gbeta = Vector::Zero(params.beta.size());
  const double inv = 1.0 / static_cast<double>(total);

  auto add_pair = [&](int i, int j, bool positive) {
    double d = eu_dist(x, i, j);
    double beta = beta_for(batch.labels[i]);
    double arg = positive ? params.alpha + d - beta : params.alpha - d + beta;
    res.track_kink(arg);
    if (arg <= 0.0) return;
    res.value += inv * arg;
    res.track_kink(d);
    double sign = positive ? 1.0 : -1.0;
    Vector gd = (x.row(i) - x.row(j)).transpose() / std::max(d, 1e-12);
    g.row(i) += inv * sign * gd.transpose();
    g.row(j) -= inv * sign * gd.transpose();
    gbeta(batch.labels[i]) += inv * (positive ? -1.0 : 1.0);
  };

  for (auto [i, j] : pairs.positives) add_pair(i, j, true);
  for (auto [i, j] : pairs.negatives) add_pair(i, j, false);

  res.grad_embeddings = pipe.backward(g);
  if (params.trainable_beta) res.grad_params["beta"] = gbeta;
  return res;
}

DifferentiableResult ranked_list_loss(const EmbeddingBatch& batch, const RankedListParams& params,
                                      const RankedListConfig& config) {
  batch.validate();
  params.validate();

  auto pipe = make_pipeline(batch, config.normalize_inputs);
  const Matrix& x = pipe.x();
  const Eigen::Index n = x.rows();
  const double boundary_pos = params.alpha - params.m;

  DifferentiableResult res;
  Matrix g = Matrix::Zero(x.rows(), x.cols());

  int valid_anchors = 0;
  for (Eigen::Index a = 0; a < n; ++a) {
    bool has_positive = false;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != a && batch.labels[j] == batch.labels[a]) has_positive = true;
    if (has_positive) ++valid_anchors;
  }
  if (valid_anchors == 0)
    throw std::domain_error("ranked_list_loss: no anchor has a same-class partner");
  const double inv_a = 1.0 / static_cast<double>(valid_anchors);

  for (Eigen::Index a = 0; a < n; ++a) {
    struct Entry {
      int idx;
      double d, lm;
    };
    std::vector<Entry> pos, negs;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      double d = eu_dist(x, a, static_cast<int>(j));
      if (batch.labels[j] == batch.labels[a]) {
        double lm = d - boundary_pos;
        res.track_kink(lm);
        if (lm > 0.0) pos.push_back({static_cast<int>(j), d, lm});
      } else {
        double lm = params.alpha - d;
        res.track_kink(lm);
        if (lm > 0.0) negs.push_back({static_cast<int>(j), d, lm});
      }
    }
    bool has_positive = false;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != a && batch.labels[j] == batch.labels[a]) has_positive = true;
    if (!has_positive) continue;  // skipped anchor

    auto add_dist_grad = [&](int j, double d, double coeff) {
      res.track_kink(d);
      Vector gd = (x.row(a) - x.row(j)).transpose() / std::max(d, 1e-12);
      g.row(a) += coeff * gd.transpose();
      g.row(j) -= coeff * gd.transpose();
    };

    if (!pos.empty()) {
      double inv_p = 1.0 / static_cast<double>(pos.size());
      for (const auto& e : pos) {
        res.value += inv_a * inv_p * e.lm;
        add_dist_grad(e.idx, e.d, inv_a * inv_p);  // dLm/dd = +1
      }
    }

    if (!negs.empty() && params.lambda > 0.0) {
      // stable normalized weights w_j = exp(T (alpha - d_j))
      std::vector<double> logw(negs.size());
      for (size_t j = 0; j < negs.size(); ++j)
        logw[j] = params.temperature * (params.alpha - negs[j].d);
      double lse = log_sum_exp(logw);
      double ln = 0.0;
      std::vector<double> w(negs.size());
      for (size_t j = 0; j < negs.size(); ++j) {
        w[j] = std::exp(logw[j] - lse);
        ln += w[j] * negs[j].lm;
      }
      res.value += inv_a * params.lambda * ln;
      for (size_t j = 0; j < negs.size(); ++j) {
        // d/dd_j of (sum w lm / sum w): weights and hinges both move
        double coeff =
            w[j] * (-params.temperature * (negs[j].lm - ln) - 1.0);
        add_dist_grad(negs[j].idx, negs[j].d, inv_a * params.lambda * coeff);
      }
    }
  }
  res.grad_embeddings = pipe.backward(g);
  return res;
}

DifferentiableResult struct_clust_loss(const EmbeddingBatch& batch,
                                       const StructClustParams& params) {
  batch.validate();
  if (params.gamma <= 0.0) throw std::invalid_argument("struct_clust_loss: gamma must be positive");
  std::set<int> classes(batch.labels.begin(), batch.labels.end());
  const int k = static_cast<int>(classes.size());
  if (k < 2) throw std::domain_error("struct_clust_loss: need at least 2 distinct labels");

  InferenceResult inf = loss_augmented_inference(batch, params.gamma, k, params.inference);
  OracleClusteringResult oracle = oracle_clustering_score(batch);

  double arg = inf.objective - oracle.score;
  DifferentiableResult res;
  res.track_kink(arg);
  res.kink_margin = std::min(res.kink_margin, inf.kink_margin);
  res.kink_margin = std::min(res.kink_margin, oracle.kink_margin);
  res.grad_embeddings = Matrix::Zero(batch.size(), batch.dim());
  if (arg <= 0.0) return res;

  res.value = arg;
  FacilityGradient fg = facility_score_gradient(batch, inf.facilities);
  res.kink_margin = std::min(res.kink_margin, fg.kink_margin);
  res.grad_embeddings = fg.grad - oracle.grad;
  return res;
}

DifferentiableResult prototypical_loss(const EmbeddingBatch& batch,
                                       const std::vector<EpisodeLayout>& episodes) {
  batch.validate();
  if (episodes.empty()) throw std::domain_error("prototypical_loss: no episodes");

  DifferentiableResult res;
  Matrix g = Matrix::Zero(batch.size(), batch.dim());
  const Matrix& x = batch.vectors;
  const double inv_e = 1.0 / static_cast<double>(episodes.size());

  for (const auto& ep : episodes) {
    const size_t kc = ep.classes.size();
    if (kc < 2) throw std::domain_error("prototypical_loss: episode needs >= 2 classes");
    std::vector<Vector> proto(kc);
    size_t n_queries = 0;
    for (size_t c = 0; c < kc; ++c) {
      const auto& grp = ep.classes[c];
      if (grp.support.empty())
        throw std::domain_error("prototypical_loss: class " + std::to_string(grp.label) +
                                " has no support samples");
      Vector mu = Vector::Zero(batch.dim());
      for (int idx : grp.support) {
        check_index(idx, batch.size(), "EpisodeLayout");
        mu += x.row(idx).transpose();
      }
      proto[c] = mu / static_cast<double>(grp.support.size());
      n_queries += grp.query.size();
    }
    if (n_queries == 0) throw std::domain_error("prototypical_loss: episode has no queries");
    const double inv_q = inv_e / static_cast<double>(n_queries);

    for (size_t c = 0; c < kc; ++c) {
      for (int q : ep.classes[c].query) {
        check_index(q, batch.size(), "EpisodeLayout");
        std::vector<double> neg_d(kc);
        for (size_t j = 0; j < kc; ++j)
          neg_d[j] = -(x.row(q).transpose() - proto[j]).squaredNorm();
        double lse = log_sum_exp(neg_d);
        res.value += inv_q * (-neg_d[c] + lse);
        for (size_t j = 0; j < kc; ++j) {
          double p = std::exp(neg_d[j] - lse);
          double dl_dd = (j == c ? 1.0 : 0.0) - p;  // d of loss w.r.t. d(q, mu_j)
          Vector diff = x.row(q).transpose() - proto[j];
          g.row(q) += inv_q * dl_dd * 2.0 * diff.transpose();
          const auto& sup = ep.classes[j].support;
          double inv_s = 1.0 / static_cast<double>(sup.size());
          for (int s : sup) g.row(s) -= inv_q * dl_dd * 2.0 * inv_s * diff.transpose();
        }
      }
    }
  }
  res.grad_embeddings = g;
  return res;
}

namespace {

/// Scaled unit embeddings and proxies with pullbacks, shared by the
/// proxy losses.
struct ProxyPipeline {
  InputPipeline emb;
  Matrix proxy_unit;  // scaled rows when bank.normalize, raw*scale otherwise
  const ProxyBank* bank;
  Matrix z;  // scale * unit embeddings
  Matrix q;  // scale * (unit) proxies

  Matrix emb_backward(const Matrix& grad_z) const {
    return emb.backward(bank->scale * grad_z);
  }
  Matrix proxy_backward(const Matrix& grad_q) const {
    Matrix g = bank->scale * grad_q;
    if (bank->normalize) return l2_normalize_backward(bank->proxies, proxy_unit, g);
    return g;
  }
};

ProxyPipeline make_proxy_pipeline(const EmbeddingBatch& batch, const ProxyBank& bank) {
  bank.validate();
  for (int label : batch.labels) bank.row_for(label);  // every label must be assigned
  ProxyPipeline p;
  p.bank = &bank;
  p.emb = make_pipeline(batch, true);
  p.proxy_unit = bank.normalize ? l2_normalize_rows(bank.proxies) : bank.proxies;
  p.z = bank.scale * p.emb.x();
  p.q = bank.scale * p.proxy_unit;
  return p;
}

}  // namespace

DifferentiableResult proxy_nca_loss(const EmbeddingBatch& batch, const ProxyBank& bank,
                                    const ProxyNcaConfig& config) {
  batch.validate();
  ProxyPipeline pipe = make_proxy_pipeline(batch, bank);
  const int c = static_cast<int>(bank.proxies.rows());
  if (c < 2) throw std::domain_error("proxy_nca_loss: bank needs >= 2 proxies for negatives");

  DifferentiableResult res;
  Matrix gz = Matrix::Zero(pipe.z.rows(), pipe.z.cols());
  Matrix gq = Matrix::Zero(pipe.q.rows(), pipe.q.cols());
  const double inv = 1.0 / static_cast<double>(batch.size());

  for (Eigen::Index a = 0; a < batch.size(); ++a) {
    int r = bank.row_for(batch.labels[a]);
    Vector d(c);
    for (int j = 0; j < c; ++j)
      d(j) = (pipe.z.row(a) - pipe.q.row(j)).squaredNorm();

    std::vector<double> neg_terms;
    std::vector<int> neg_rows;
    for (int j = 0; j < c; ++j) {
      if (j == r && !config.include_positive_in_denominator) continue;
      neg_terms.push_back(-d(j));
      neg_rows.push_back(j);
    }
    double lse = log_sum_exp(neg_terms);
    res.value += inv * (d(r) + lse);

    auto add_d_grad = [&](int j, double coeff) {
      Vector diff = pipe.z.row(a) - pipe.q.row(j);
      gz.row(a) += coeff * 2.0 * diff.transpose();
      gq.row(j) -= coeff * 2.0 * diff.transpose();
    };
    add_d_grad(r, inv);  // d/dd_r of d_r
    for (size_t t = 0; t < neg_terms.size(); ++t) {
      double p = std::exp(neg_terms[t] - lse);
      add_d_grad(neg_rows[t], -inv * p);
    }
  }

  res.grad_embeddings = pipe.emb_backward(gz);
  if (bank.trainable) res.grad_params["proxies"] = pipe.proxy_backward(gq);
  return res;
}

DifferentiableResult proxy_triplet_loss(const EmbeddingBatch& batch, const ProxyBank& bank,
                                        double margin) {
  batch.validate();
  if (margin <= 0.0) throw std::invalid_argument("proxy_triplet_loss: margin must be positive");
  ProxyPipeline pipe = make_proxy_pipeline(batch, bank);
  const int c = static_cast<int>(bank.proxies.rows());
  if (c < 2) throw std::domain_error("proxy_triplet_loss: bank needs >= 2 proxies for negatives");

  DifferentiableResult res;
  Matrix gz = Matrix::Zero(pipe.z.rows(), pipe.z.cols());
  Matrix gq = Matrix::Zero(pipe.q.rows(), pipe.q.cols());
  const double inv = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(c - 1));

  for (Eigen::Index a = 0; a < batch.size(); ++a) {
    int r = bank.row_for(batch.labels[a]);
    Vector dp = (pipe.z.row(a) - pipe.q.row(r)).transpose();
    double d_pos = dp.squaredNorm();
    for (int j = 0; j < c; ++j) {
      if (j == r) continue;
      Vector dn = (pipe.z.row(a) - pipe.q.row(j)).transpose();
      double arg = d_pos - dn.squaredNorm() + margin;
      res.track_kink(arg);
      if (arg <= 0.0) continue;
      res.value += inv * arg;
      gz.row(a) += inv * 2.0 * (dp - dn).transpose();
      gq.row(r) -= inv * 2.0 * dp.transpose();
      gq.row(j) += inv * 2.0 * dn.transpose();
    }
  }

  res.grad_embeddings = pipe.emb_backward(gz);
  if (bank.trainable) res.grad_params["proxies"] = pipe.proxy_backward(gq);
  return res;
}

DifferentiableResult proxy_softmax_loss(const EmbeddingBatch& batch, const ProxyBank& bank,
                                        double temperature) {
  batch.validate();
  if (temperature <= 0.0)
    throw std::invalid_argument("proxy_softmax_loss: temperature must be positive");
  bank.validate();
  for (int label : batch.labels) bank.row_for(label);

  // weight-normalization analog: unit embeddings against unit proxies
  InputPipeline emb = make_pipeline(batch, true);
  Matrix proxies = l2_normalize_rows(bank.proxies);
  const int c = static_cast<int>(proxies.rows());

  DifferentiableResult res;
  Matrix gx = Matrix::Zero(batch.size(), batch.dim());
  Matrix gp = Matrix::Zero(proxies.rows(), proxies.cols());
  const double inv = 1.0 / static_cast<double>(batch.size());

  for (Eigen::Index a = 0; a < batch.size(); ++a) {
    int r = bank.row_for(batch.labels[a]);
    std::vector<double> logits(c);
    for (int j = 0; j < c; ++j) logits[j] = emb.x().row(a).dot(proxies.row(j)) / temperature;
    double lse = log_sum_exp(logits);
    res.value += inv * (lse - logits[r]);
    for (int j = 0; j < c; ++j) {
      double dl = std::exp(logits[j] - lse) - (j == r ? 1.0 : 0.0);
      gx.row(a) += inv * dl / temperature * proxies.row(j);
      gp.row(j) += inv * dl / temperature * emb.x().row(a);
    }
  }

  res.grad_embeddings = emb.backward(gx);
  if (bank.trainable)
    res.grad_params["proxies"] = l2_normalize_backward(bank.proxies, proxies, gp);
  return res;
}

}  // namespace dml
