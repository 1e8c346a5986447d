#include "dml/verify.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <set>
#include <sstream>

namespace dml {

EmbeddingBatch random_batch(std::uint64_t seed, int n, int d, int n_classes) {
  SamplerRng rng(seed);
  EmbeddingBatch batch;
  batch.vectors.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) batch.vectors(i, j) = rng.normal();
  // balanced labels so every class has at least two members
  for (int i = 0; i < n; ++i) batch.labels.push_back(i % n_classes);
  return batch;
}

std::vector<LossKind> single_model_losses() {
  return {LossKind::TripletSemihard, LossKind::Lifted,       LossKind::NPairs,
          LossKind::Angular,         LossKind::Margin,       LossKind::RankedList,
          LossKind::StructClust,     LossKind::Proto,        LossKind::ProxyTriplet,
          LossKind::ProxyNca,        LossKind::ProxySoftmax};
}

LossFixture make_loss_fixture(LossKind kind, std::uint64_t seed, int n_hint, int d) {
  LossFixture fx;
  SamplerRng rng(seed ^ 0xf17eULL);

  const int n_classes = std::max(2, n_hint / 4);

  switch (kind) {
    case LossKind::TripletSemihard: {
      fx.batch = random_batch(seed, n_hint, d, n_classes);
      DistanceMatrix dist =
          pairwise_distances(l2_normalize(fx.batch), Metric::SquaredEuclidean);
      BatchPlan plan = semi_hard_mine(fx.batch, dist, 0.2);
      auto triplets = plan.triplets;
      fx.evaluator.fn = [triplets](const EmbeddingBatch& b, const ParamMap&) {
        return triplet_loss(b, triplets, 0.2);
      };
      break;
    }
    case LossKind::Lifted: {
      fx.batch = random_batch(seed, n_hint, d, n_classes);
      auto pairs = all_pairs(fx.batch);
      fx.evaluator.fn = [pairs](const EmbeddingBatch& b, const ParamMap&) {
        return lifted_struct_loss(b, pairs, 1.0);
      };
      break;
    }
    case LossKind::NPairs:
    case LossKind::Angular: {
      int pairs_count = std::max(2, n_hint / 2);
      fx.batch = random_batch(seed, 2 * pairs_count, d, pairs_count);
      // interleave so each class holds rows (2i, 2i+1)
      for (int i = 0; i < 2 * pairs_count; ++i) fx.batch.labels[i] = i / 2;
      NPairsLayout layout;
      for (int i = 0; i < pairs_count; ++i) layout.pairs.emplace_back(2 * i, 2 * i + 1);
      if (kind == LossKind::NPairs) {
        fx.evaluator.fn = [layout](const EmbeddingBatch& b, const ParamMap&) {
          return npairs_loss(b, layout, 1e-3);
        };
      } else {
        AngularParams params;
        fx.evaluator.fn = [layout, params](const EmbeddingBatch& b, const ParamMap&) {
          return angular_loss(b, layout, params);
        };
      }
      break;
    }
    case LossKind::Margin: {
      fx.batch = random_batch(seed, n_hint, d, n_classes);
      auto pairs = all_pairs(fx.batch);
      fx.evaluator.params["beta"] = Matrix::Constant(n_classes, 1, 1.2);
      fx.evaluator.fn = [pairs](const EmbeddingBatch& b, const ParamMap& p) {
        MarginLossParams params;
        params.beta = p.at("beta").col(0);
        params.alpha = 0.2;
        params.trainable_beta = true;
        return margin_loss(b, pairs, params);
      };
      break;
    }
    case LossKind::RankedList: {
      fx.batch = random_batch(seed, n_hint, d, n_classes);
      fx.evaluator.fn = [](const EmbeddingBatch& b, const ParamMap&) {
        RankedListParams params;
        return ranked_list_loss(b, params);
      };
      break;
    }
    case LossKind::StructClust: {
      int n = std::min(n_hint, 8);  // exhaustive inference for exact subgradients
      fx.batch = random_batch(seed, n, d, 2);
      fx.evaluator.fn = [](const EmbeddingBatch& b, const ParamMap&) {
        StructClustParams params;
        params.gamma = 1.0;
        params.inference = ClustInference::Exhaustive;
        return struct_clust_loss(b, params);
      };
      break;
    }
    case LossKind::Proto: {
      fx.batch = random_batch(seed, n_hint, d, n_classes);
      EpisodeLayout layout;
      std::map<int, std::vector<int>> by_class;
      for (int i = 0; i < n_hint; ++i) by_class[fx.batch.labels[i]].push_back(i);
      for (const auto& [label, members] : by_class) {
        EpisodeLayout::ClassGroup group;
        group.label = label;
        size_t support = std::max<size_t>(1, members.size() / 2);
        for (size_t i = 0; i < members.size(); ++i)
          (i < support ? group.support : group.query).push_back(members[i]);
        if (group.query.empty()) {
          group.query.push_back(group.support.back());  // reuse as query
        }
        layout.classes.push_back(std::move(group));
      }
      std::vector<EpisodeLayout> episodes{layout};
      fx.evaluator.fn = [episodes](const EmbeddingBatch& b, const ParamMap&) {
        return prototypical_loss(b, episodes);
      };
      break;
    }
    case LossKind::ProxyTriplet:
    case LossKind::ProxyNca:
    case LossKind::ProxySoftmax: {
      fx.batch = random_batch(seed, n_hint, d, n_classes);
      Matrix proxies(n_classes, d);
      for (Eigen::Index i = 0; i < proxies.rows(); ++i) {
        Vector v(d);
        for (Eigen::Index j = 0; j < d; ++j) v(j) = rng.normal();
        proxies.row(i) = v.transpose() / v.norm();
      }
      fx.evaluator.params["proxies"] = proxies;
      auto make_bank = [n_classes](const ParamMap& p) {
        ProxyBank bank;
        bank.proxies = p.at("proxies");
        for (int c = 0; c < n_classes; ++c) bank.assignment[c] = c;
        bank.trainable = true;
        bank.scale = 3.0;
        bank.normalize = false;  // rows drift under perturbation; normalize in-loss
        return bank;
      };
      if (kind == LossKind::ProxyTriplet) {
        fx.evaluator.fn = [make_bank](const EmbeddingBatch& b, const ParamMap& p) {
          return proxy_triplet_loss(b, make_bank(p), 0.2);
        };
      } else if (kind == LossKind::ProxyNca) {
        fx.evaluator.fn = [make_bank](const EmbeddingBatch& b, const ParamMap& p) {
          ProxyBank bank = make_bank(p);
          bank.scale = 3.0;
          return proxy_nca_loss(b, bank);
        };
      } else {
        fx.evaluator.fn = [make_bank](const EmbeddingBatch& b, const ParamMap& p) {
          return proxy_softmax_loss(b, make_bank(p), 0.5);
        };
      }
      break;
    }
    case LossKind::Dreml:
      throw std::invalid_argument("make_loss_fixture: dreml has no single-loss fixture");
  }
  return fx;
}

double chi_square_p_value(const std::vector<long>& observed,
                          const std::vector<double>& probabilities) {
  if (observed.size() != probabilities.size() || observed.size() < 2)
    throw std::invalid_argument("chi_square_p_value: bad inputs");
  long total = 0;
  for (long o : observed) total += o;
  double stat = 0.0;
  for (size_t i = 0; i < observed.size(); ++i) {
    double expected = probabilities[i] * static_cast<double>(total);
    if (expected <= 0.0) throw std::invalid_argument("chi_square_p_value: zero expectation");
    double diff = static_cast<double>(observed[i]) - expected;
    stat += diff * diff / expected;
  }
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return 1.0 - boost::math::cdf(dist, stat);
}

namespace {

void append(std::vector<CheckResult>& out, const std::string& only, const std::string& name,
            const std::function<CheckResult()>& check) {
  if (!only.empty() && name.find(only) == std::string::npos) return;
  CheckResult r;
  try {
    r = check();
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.name = name;
  out.push_back(r);
}

CheckResult check_grad_all_losses() {
  CheckResult r;
  r.pass = true;
  double worst = 0.0;
  std::string worst_loss;
  for (LossKind kind : single_model_losses()) {
    int checked = 0;
    std::uint64_t seed = 1;
    while (checked < 10) {
      LossFixture fx = make_loss_fixture(kind, seed++, 12, 6);
      GradCheckReport rep = grad_check(fx.evaluator, fx.batch, 1e-5, 1e-4);
      if (rep.skipped_near_kink) continue;
      ++checked;
      if (rep.max_rel_error > worst) {
        worst = rep.max_rel_error;
        worst_loss = loss_name(kind);
      }
      if (!rep.pass) {
        r.pass = false;
        r.detail = std::string(loss_name(kind)) + " failed at " + rep.worst_coordinate +
                   " rel. error " + std::to_string(rep.max_rel_error);
        return r;
      }
    }
  }
  std::ostringstream os;
  os << "max rel. error " << worst << " (" << worst_loss << ")";
  r.detail = os.str();
  return r;
}

CheckResult check_mining_oracle() {
  CheckResult r;
  r.pass = true;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    SamplerRng rng(seed * 77 + 5);
    int classes = 2 + static_cast<int>(rng.uniform_index(3));
    // at least two members per class so every anchor has a positive
    int n = 2 * classes + static_cast<int>(rng.uniform_index(24));
    EmbeddingBatch batch = random_batch(seed, n, 4, classes);
    DistanceMatrix dist = pairwise_distances(batch, Metric::SquaredEuclidean);
    BatchPlan plan = semi_hard_mine(batch, dist, 0.2);

    // exhaustive reference selection
    for (const auto& t : plan.triplets.triplets) {
      int expected = -1;
      double best_semi = std::numeric_limits<double>::infinity();
      double best_far = -std::numeric_limits<double>::infinity();
      int far_idx = -1;
      double dap = dist.values(t.anchor, t.positive);
      for (int j = 0; j < n; ++j) {
        if (j == t.anchor || batch.labels[j] == batch.labels[t.anchor]) continue;
        double dan = dist.values(t.anchor, j);
        if (dan > dap && dan < best_semi) {
          best_semi = dan;
          expected = j;
        }
        if (dan > best_far) {
          best_far = dan;
          far_idx = j;
        }
      }
      if (expected < 0) expected = far_idx;
      if (expected != t.negative) {
        r.pass = false;
        r.detail = "mismatch at seed " + std::to_string(seed);
        return r;
      }
    }
  }
  r.detail = "200 random batches, exact index equality";
  return r;
}

CheckResult check_recall_oracle() {
  CheckResult r;
  r.pass = true;
  std::vector<int> ks = {1, 2, 4, 8, 16};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EmbeddingBatch batch = random_batch(seed, 60, 5, 4);
    EvalReport fast = recall_at_k(batch, batch, ks, true);
    // naive all-pairs reference
    for (int k : ks) {
      double hits = 0;
      for (int q = 0; q < 60; ++q) {
        std::vector<std::pair<double, int>> order;
        for (int i = 0; i < 60; ++i)
          if (i != q)
            order.emplace_back((batch.vectors.row(q) - batch.vectors.row(i)).norm(), i);
        std::sort(order.begin(), order.end());
        for (int t = 0; t < k; ++t)
          if (batch.labels[order[t].second] == batch.labels[q]) {
            hits += 1;
            break;
          }
      }
      if (std::abs(fast.recall_at.at(k) - hits / 60.0) > 0.0) {
        r.pass = false;
        r.detail = "recall mismatch at seed " + std::to_string(seed) + " K=" + std::to_string(k);
        return r;
      }
    }
  }
  r.detail = "20 random instances, exact equality vs naive oracle";
  return r;
}

CheckResult check_nmi_oracle() {
  CheckResult r;
  r.pass = true;
  // identity up to relabeling
  ClusterAssignment a{{0, 0, 1, 1, 2}};
  ClusterAssignment b{{5, 5, 9, 9, 7}};
  if (std::abs(nmi(a, b) - 1.0) > 1e-12) {
    r.pass = false;
    r.detail = "relabel invariance broken";
    return r;
  }
  // checkerboard: independent partitions
  ClusterAssignment c{{0, 0, 1, 1}};
  ClusterAssignment d{{0, 1, 0, 1}};
  if (std::abs(nmi(c, d)) > 1e-12) {
    r.pass = false;
    r.detail = "checkerboard should give 0";
    return r;
  }
  // random pairs against a direct entropy computation
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SamplerRng rng(seed);
    int n = 5 + static_cast<int>(rng.uniform_index(40));
    ClusterAssignment p, t;
    for (int i = 0; i < n; ++i) {
      p.assignment.push_back(static_cast<int>(rng.uniform_index(4)));
      t.assignment.push_back(static_cast<int>(rng.uniform_index(3)));
    }
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ma, mb;
    for (int i = 0; i < n; ++i) {
      joint[{p.assignment[i], t.assignment[i]}] += 1.0 / n;
      ma[p.assignment[i]] += 1.0 / n;
      mb[t.assignment[i]] += 1.0 / n;
    }
    double ha = 0, hb = 0, mi = 0;
    for (auto& [k, v] : ma) ha -= v * std::log(v);
    for (auto& [k, v] : mb) hb -= v * std::log(v);
    for (auto& [k, v] : joint) mi += v * std::log(v / (ma[k.first] * mb[k.second]));
    double expected = (ha + hb == 0) ? 1.0 : 2.0 * mi / (ha + hb);
    if (std::abs(nmi(p, t) - expected) > 1e-10) {
      r.pass = false;
      r.detail = "entropy oracle mismatch at seed " + std::to_string(seed);
      return r;
    }
  }
  r.detail = "50 random partition pairs within 1e-10 of the entropy oracle";
  return r;
}

CheckResult check_facility_oracle() {
  CheckResult r;
  r.pass = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EmbeddingBatch batch = random_batch(seed, 8, 3, 2);
    InferenceResult ex = loss_augmented_inference(batch, 1.0, 2, ClustInference::Exhaustive);
    // brute force over all C(8,2) sets
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 8; ++i)
      for (int j = i + 1; j < 8; ++j) {
        FacilitySet s{{i, j}};
        ClusterAssignment g = assign_to_facilities(batch, s);
        double obj =
            facility_score(batch, s) + 1.0 * (1.0 - nmi(g, ClusterAssignment{batch.labels}));
        best = std::max(best, obj);
      }
    if (std::abs(ex.objective - best) > 1e-12) {
      r.pass = false;
      r.detail = "exhaustive inference misses the brute-force optimum at seed " +
                 std::to_string(seed);
      return r;
    }
    InferenceResult greedy = loss_augmented_inference(batch, 1.0, 2, ClustInference::Greedy);
    InferenceResult swaps =
        loss_augmented_inference(batch, 1.0, 2, ClustInference::GreedyWithSwaps);
    if (swaps.objective + 1e-12 < greedy.objective || ex.objective + 1e-12 < swaps.objective) {
      r.pass = false;
      r.detail = "objective ordering violated at seed " + std::to_string(seed);
      return r;
    }
  }
  r.detail = "20 instances: exhaustive = brute force; greedy <= swaps <= exhaustive";
  return r;
}

CheckResult check_sampler_distribution() {
  CheckResult r;
  r.pass = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SamplerRng rng(seed * 31 + 7);
    int n = 6 + static_cast<int>(rng.uniform_index(6));
    int d = 8 + static_cast<int>(rng.uniform_index(8));
    EmbeddingBatch batch = l2_normalize(random_batch(seed + 100, n, d, 2));
    DistanceMatrix dist = pairwise_distances(batch, Metric::Euclidean);

    std::vector<int> negatives;
    std::vector<double> dists;
    for (int j = 0; j < n; ++j)
      if (batch.labels[j] != batch.labels[0]) {
        negatives.push_back(j);
        dists.push_back(dist.values(0, j));
      }
    std::vector<double> w = distance_weighted_weights(dists, d, {});
    double total = 0;
    for (double v : w) total += v;
    std::vector<double> probs;
    for (double v : w) probs.push_back(v / total);

    std::map<int, long> counts;
    SamplerRng draw_rng(seed * 997 + 3);
    const int draws = 20000;
    for (int t = 0; t < draws; ++t)
      counts[distance_weighted_sample(batch, dist, 0, draw_rng).index] += 1;
    std::vector<long> observed;
    for (int neg : negatives) observed.push_back(counts[neg]);
    double p = chi_square_p_value(observed, probs);
    if (p <= 0.01) {
      r.pass = false;
      r.detail = "chi-square p=" + std::to_string(p) + " at seed " + std::to_string(seed);
      return r;
    }
  }
  r.detail = "5 configurations x 20k draws, all chi-square p > 0.01";
  return r;
}

}  // namespace

std::vector<CheckResult> run_verification(const std::string& only) {
  std::vector<CheckResult> out;
  append(out, only, "grad-check", check_grad_all_losses);
  append(out, only, "mining-oracle", check_mining_oracle);
  append(out, only, "recall-oracle", check_recall_oracle);
  append(out, only, "nmi-oracle", check_nmi_oracle);
  append(out, only, "facility-oracle", check_facility_oracle);
  append(out, only, "sampler-distribution", check_sampler_distribution);
  return out;
}

}  // namespace dml
