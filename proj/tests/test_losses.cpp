#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dml/losses.hpp"
#include "dml/verify.hpp"

#include <cmath>

using namespace dml;

namespace {

EmbeddingBatch make_batch(const Matrix& m, std::vector<int> labels) {
  EmbeddingBatch b;
  b.vectors = m;
  b.labels = std::move(labels);
  return b;
}

EmbeddingBatch line_1d(std::initializer_list<double> xs, std::vector<int> labels) {
  Matrix m(static_cast<Eigen::Index>(xs.size()), 1);
  int i = 0;
  for (double v : xs) m(i++, 0) = v;
  return make_batch(m, std::move(labels));
}

}  // namespace

TEST_CASE("triplet loss, hand values in 1-D") {
  TripletIndexSet ts;
  ts.triplets = {{0, 1, 2}};
  TripletConfig cfg{Metric::Euclidean, false};

  auto satisfied = triplet_loss(line_1d({0, 1, 3}, {0, 0, 1}), ts, 0.5, cfg);
  CHECK(satisfied.value == doctest::Approx(0.0));

  auto active = triplet_loss(line_1d({0, 1, 1.2}, {0, 0, 1}), ts, 0.5, cfg);
  CHECK(active.value == doctest::Approx(0.3));
}

TEST_CASE("triplet loss rejects an empty triplet set") {
  TripletIndexSet ts;
  CHECK_THROWS_AS(triplet_loss(line_1d({0, 1}, {0, 0}), ts, 0.5, {}), std::domain_error);
}

TEST_CASE("lifted structured loss, hand value") {
  // positive pair at d=0.2, one negative for i at d=1.0, margin 1.0
  auto batch = line_1d({0.0, 0.2, 1.0}, {0, 0, 1});
  PairIndexSet pairs;
  pairs.positives = {{0, 1}};
  pairs.negatives = {{0, 2}};
  auto r = lifted_struct_loss(batch, pairs, 1.0);
  CHECK(r.value == doctest::Approx(0.02));
}

TEST_CASE("lifted structured loss vanishes for separated classes") {
  Matrix m(4, 2);
  m << 0, 0, 0, 0, 100, 0, 100, 0.1;
  auto batch = make_batch(m, {0, 0, 1, 1});
  PairIndexSet pairs;
  pairs.positives = {{0, 1}, {2, 3}};
  pairs.negatives = {{0, 2}, {0, 3}, {1, 2}, {1, 3}};
  auto r = lifted_struct_loss(batch, pairs, 1.0);
  CHECK(r.value == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("lifted structured loss requires a negative counterpart") {
  auto batch = line_1d({0.0, 0.2}, {0, 0});
  PairIndexSet pairs;
  pairs.positives = {{0, 1}};
  CHECK_THROWS_AS(lifted_struct_loss(batch, pairs, 1.0), std::domain_error);
}

TEST_CASE("npairs loss, equal similarities give log 2") {
  Matrix m(4, 2);
  m << 1, 0, 1, 0, 1, 0, 1, 0;
  auto batch = make_batch(m, {0, 0, 1, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}, {2, 3}};
  auto r = npairs_loss(batch, plan, 0.0);
  CHECK(r.value == doctest::Approx(std::log(2.0)));
}

TEST_CASE("npairs loss tends to zero with distant negatives") {
  Matrix m(4, 2);
  m << 10, 0, 10, 0, -10, 0, -10, 0;
  auto batch = make_batch(m, {0, 0, 1, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}, {2, 3}};
  auto r = npairs_loss(batch, plan, 0.0);
  CHECK(r.value < 1e-9);
  CHECK(r.value >= 0.0);
}

TEST_CASE("npairs layout rejects a batch not in 2-per-class shape") {
  Matrix m(3, 2);
  m << 1, 0, 1, 0, 0, 1;
  auto batch = make_batch(m, {0, 0, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}};
  CHECK_THROWS_AS(npairs_loss(batch, plan, 0.0), std::domain_error);
}

TEST_CASE("npairs l2 regularizer uses raw embeddings") {
  Matrix m(4, 2);
  m << 2, 0, 2, 0, 0, 2, 0, 2;
  auto batch = make_batch(m, {0, 0, 1, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}, {2, 3}};
  auto plain = npairs_loss(batch, plan, 0.0);
  auto reg = npairs_loss(batch, plan, 0.5);
  // mean squared norm is 4, weight 0.5
  CHECK(reg.value == doctest::Approx(plain.value + 0.5 * 4.0));
}

TEST_CASE("angular loss, hand value at 45 degrees") {
  Matrix m(4, 2);
  m << 1, 0, 1, 0, 0, 1, 0, 1;
  auto batch = make_batch(m, {0, 0, 1, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}, {2, 3}};
  AngularParams params;
  params.alpha_degrees = 45.0;
  auto r = angular_loss(batch, plan, params);
  CHECK(r.value == doctest::Approx(std::log(1.0 + std::exp(-4.0))));
}

TEST_CASE("angular loss rejects alpha outside (0, 90)") {
  Matrix m(4, 2);
  m << 1, 0, 1, 0, 0, 1, 0, 1;
  auto batch = make_batch(m, {0, 0, 1, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}, {2, 3}};
  AngularParams params;
  params.alpha_degrees = 95.0;
  CHECK_THROWS_AS(angular_loss(batch, plan, params), std::domain_error);
  params.alpha_degrees = 0.0;
  CHECK_THROWS_AS(angular_loss(batch, plan, params), std::domain_error);
}

TEST_CASE("angular combined form adds weighted npairs") {
  Matrix m(4, 3);
  m << 1, 0, 0, 0.9, 0.1, 0, 0, 1, 0, 0.1, 0.9, 0.2;
  auto batch = make_batch(m, {0, 0, 1, 1});
  NPairsLayout plan;
  plan.pairs = {{0, 1}, {2, 3}};
  AngularParams pure;
  AngularParams combo = pure;
  combo.combine_with_npairs = true;
  combo.combination_weight = 2.0;
  auto a = angular_loss(batch, plan, pure);
  auto np = npairs_loss(batch, plan, 0.0);
  auto c = angular_loss(batch, plan, combo);
  CHECK(c.value == doctest::Approx(a.value + 2.0 * np.value));
}

TEST_CASE("margin loss, hand values") {
  MarginLossConfig cfg{false};
  MarginLossParams params;
  params.alpha = 0.2;
  params.trainable_beta = true;

  // positive pair at d=1.0, beta=1.2: [0.2 + 1.0 - 1.2]_+ = 0
  params.beta = Vector::Constant(1, 1.2);
  PairIndexSet pos;
  pos.positives = {{0, 1}};
  auto rp = margin_loss(line_1d({0, 1}, {0, 0}), pos, params, cfg);
  CHECK(rp.value == doctest::Approx(0.0));

  // negative pair at d=1.0: [0.2 - 1.0 + 1.2]_+ = 0.4
  params.beta = Vector::Constant(2, 1.2);
  PairIndexSet neg;
  neg.negatives = {{0, 1}};
  auto rn = margin_loss(line_1d({0, 1}, {0, 1}), neg, params, cfg);
  CHECK(rn.value == doctest::Approx(0.4));
  REQUIRE(rn.grad_params.count("beta"));
  CHECK(rn.grad_params.at("beta")(0, 0) == doctest::Approx(1.0));  // active negative pushes beta up
}

TEST_CASE("margin loss rejects a class without a beta entry") {
  MarginLossParams params;
  params.beta = Vector::Constant(1, 1.2);
  PairIndexSet neg;
  neg.negatives = {{1, 0}};  // anchor class 1 has no beta entry
  CHECK_THROWS_AS(margin_loss(line_1d({0, 5}, {0, 1}), neg, params, {false}), std::domain_error);
}

TEST_CASE("ranked list loss, hand value with uniform weights") {
  RankedListParams params;
  params.alpha = 1.2;
  params.m = 0.4;
  params.lambda = 1.0;
  params.temperature = 0.0;
  // anchor 0 at 0.0 and anchor 1 at 0.1 share a class; the negative sits
  // at 1.1, giving hinges 0.1 and 0.2; the isolated negative anchor is
  // skipped. Positives are inside alpha - m = 0.8, contributing 0.
  auto batch = line_1d({0.0, 0.1, 1.1}, {0, 0, 1});
  auto r = ranked_list_loss(batch, params, {false});
  CHECK(r.value == doctest::Approx(0.15));
}

TEST_CASE("ranked list loss boundary cases contribute zero") {
  RankedListParams params;
  params.alpha = 1.2;
  params.m = 0.4;
  params.temperature = 0.0;
  // co-located positives, negatives exactly at alpha
  auto batch = line_1d({0.0, 0.0, 1.2, 1.2}, {0, 0, 1, 1});
  auto r = ranked_list_loss(batch, params, {false});
  CHECK(r.value == doctest::Approx(0.0));
  CHECK(r.kink_margin == doctest::Approx(0.0));
}

TEST_CASE("ranked list loss needs at least one anchored pair") {
  RankedListParams params;
  auto batch = line_1d({0.0, 1.0}, {0, 1});
  CHECK_THROWS_AS(ranked_list_loss(batch, params, {false}), std::domain_error);
}

TEST_CASE("ranked list params validation") {
  RankedListParams bad;
  bad.alpha = 0.4;
  bad.m = 0.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("structured clustering loss on perfectly separated 1-point classes") {
  Matrix m(2, 2);
  m << 0, 0, 100, 0;
  auto batch = make_batch(m, {0, 1});
  StructClustParams params;
  params.gamma = 0.1;
  params.inference = ClustInference::Exhaustive;
  auto r = struct_clust_loss(batch, params);
  CHECK(r.value == doctest::Approx(0.0));
}

TEST_CASE("structured clustering loss is non-negative on random batches") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto batch = random_batch(seed, 8, 3, 2);
    StructClustParams params;
    params.inference = ClustInference::Exhaustive;
    auto r = struct_clust_loss(batch, params);
    CHECK(r.value >= 0.0);
    CHECK(std::isfinite(r.value));
  }
}

TEST_CASE("prototypical loss, hand value") {
  Matrix m(3, 2);
  m << 0, 0, 0, 0, 2, 0;
  auto batch = make_batch(m, {0, 0, 1});
  EpisodeLayout ep;
  ep.classes = {{0, {0}, {1}}, {1, {2}, {}}};
  auto r = prototypical_loss(batch, {ep});
  CHECK(r.value == doctest::Approx(std::log(1.0 + std::exp(-4.0))));
}

TEST_CASE("prototypical loss with equidistant prototypes gives log K") {
  Matrix m(4, 2);
  m << 0, 0, 0, 1, 0, -1, 1, 0;  // query at origin, prototypes at distance 1
  auto batch = make_batch(m, {0, 0, 1, 2});
  EpisodeLayout ep;
  ep.classes = {{0, {1}, {0}}, {1, {2}, {}}, {2, {3}, {}}};
  auto r = prototypical_loss(batch, {ep});
  CHECK(r.value == doctest::Approx(std::log(3.0)));
}

TEST_CASE("prototypical loss averages over episodes") {
  auto batch = random_batch(9, 8, 3, 4);
  EpisodeLayout e1, e2;
  e1.classes = {{batch.labels[0], {0}, {4}}, {batch.labels[1], {1}, {5}}};
  e2.classes = {{batch.labels[2], {2}, {6}}, {batch.labels[3], {3}, {7}}};
  // relabel so support/query pairs share classes
  batch.labels = {0, 1, 2, 3, 0, 1, 2, 3};
  e1.classes = {{0, {0}, {4}}, {1, {1}, {5}}};
  e2.classes = {{2, {2}, {6}}, {3, {3}, {7}}};
  auto both = prototypical_loss(batch, {e1, e2});
  auto first = prototypical_loss(batch, {e1});
  auto second = prototypical_loss(batch, {e2});
  CHECK(both.value == doctest::Approx(0.5 * (first.value + second.value)));
}

TEST_CASE("prototypical loss rejects an empty support set") {
  Matrix m(2, 2);
  m << 0, 0, 1, 0;
  auto batch = make_batch(m, {0, 1});
  EpisodeLayout ep;
  ep.classes = {{0, {}, {0}}, {1, {1}, {}}};
  CHECK_THROWS_AS(prototypical_loss(batch, {ep}), std::domain_error);
}

namespace {

ProxyBank unit_bank(const Matrix& proxies, std::map<int, int> assignment, double scale = 1.0) {
  ProxyBank bank;
  bank.proxies = proxies;
  bank.assignment = std::move(assignment);
  bank.scale = scale;
  bank.normalize = true;
  return bank;
}

}  // namespace

TEST_CASE("proxy-nca loss, hand values") {
  Matrix x(1, 2);
  x << 1, 0;
  auto batch = make_batch(x, {0});

  Matrix p1(2, 2);
  p1 << 1, 0, 1, 0;  // negative proxy coincides with the positive one
  auto r1 = proxy_nca_loss(batch, unit_bank(p1, {{0, 0}, {1, 1}}));
  CHECK(r1.value == doctest::Approx(0.0));

  Matrix p2(3, 2);
  p2 << 1, 0, 0, 1, 0, 1;  // two negatives at squared distance 2
  auto r2 = proxy_nca_loss(batch, unit_bank(p2, {{0, 0}, {1, 1}, {2, 2}}));
  CHECK(r2.value == doctest::Approx(std::log(2.0) - 2.0));
}

TEST_CASE("proxy-nca with the positive included is non-negative") {
  auto batch = random_batch(3, 6, 4, 3);
  Matrix p = l2_normalize_rows(random_batch(4, 3, 4, 3).vectors);
  ProxyNcaConfig cfg;
  cfg.include_positive_in_denominator = true;
  auto r = proxy_nca_loss(batch, unit_bank(p, {{0, 0}, {1, 1}, {2, 2}}, 3.0), cfg);
  CHECK(r.value >= 0.0);
}

TEST_CASE("proxy losses reject an unassigned label and a single-proxy bank") {
  Matrix x(1, 2);
  x << 1, 0;
  auto batch = make_batch(x, {7});
  Matrix p(2, 2);
  p << 1, 0, 0, 1;
  CHECK_THROWS_AS(proxy_nca_loss(batch, unit_bank(p, {{0, 0}, {1, 1}})), std::domain_error);

  auto ok_batch = make_batch(x, {0});
  Matrix single(1, 2);
  single << 1, 0;
  CHECK_THROWS_AS(proxy_nca_loss(ok_batch, unit_bank(single, {{0, 0}})), std::domain_error);
  CHECK_THROWS_AS(proxy_triplet_loss(ok_batch, unit_bank(single, {{0, 0}}), 0.2),
                  std::domain_error);
}

TEST_CASE("proxy-triplet loss, hand value") {
  Matrix x(1, 3);
  x << 1, 0, 0;
  auto batch = make_batch(x, {0});
  Matrix p(2, 3);
  p << 0.75, std::sqrt(1.0 - 0.75 * 0.75), 0,  // squared distance 0.5
      0.8, 0, 0.6;                             // squared distance 0.4
  auto r = proxy_triplet_loss(batch, unit_bank(p, {{0, 0}, {1, 1}}), 0.2);
  CHECK(r.value == doctest::Approx(0.3));

  // far negative satisfies the margin
  Matrix p2(2, 3);
  p2 << 1, 0, 0, -1, 0, 0;
  auto r2 = proxy_triplet_loss(batch, unit_bank(p2, {{0, 0}, {1, 1}}), 0.2);
  CHECK(r2.value == doctest::Approx(0.0));
}

TEST_CASE("proxy-softmax loss, hand values") {
  Matrix x(1, 3);
  x << 1, 0, 0;
  auto batch = make_batch(x, {0});

  Matrix p(2, 3);
  p << 1, 0, 0, 0, 1, 0;
  auto r = proxy_softmax_loss(batch, unit_bank(p, {{0, 0}, {1, 1}}), 1.0);
  CHECK(r.value == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))));

  // all proxies at equal similarity -> log C
  Matrix q(3, 3);
  q << 0, 1, 0, 0, 0, 1, 0, 0.6, 0.8;
  auto r2 = proxy_softmax_loss(batch, unit_bank(q, {{0, 0}, {1, 1}, {2, 2}}), 1.0);
  CHECK(r2.value == doctest::Approx(std::log(3.0)));
}

TEST_CASE("non-negativity over random batches") {
  for (LossKind kind : single_model_losses()) {
    if (kind == LossKind::ProxyNca) continue;  // unbounded below by construction
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      auto fixture = make_loss_fixture(kind, seed, 12, 4);
      auto r = fixture.evaluator(fixture.batch);
      INFO(loss_name(kind), " seed ", seed);
      CHECK(r.value >= -1e-12);
      CHECK(std::isfinite(r.value));
    }
  }
}

TEST_CASE("proxy-nca stays finite on random batches") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto fixture = make_loss_fixture(LossKind::ProxyNca, seed, 12, 4);
    CHECK(std::isfinite(fixture.evaluator(fixture.batch).value));
  }
}

TEST_CASE("loss values are invariant under batch row permutation") {
  // permute rows of a triplet fixture and remap the plan accordingly
  auto batch = random_batch(31, 6, 3, 2);
  TripletIndexSet ts;
  ts.triplets = {{0, 2, 1}, {4, 0, 3}};
  // ensure the labels fit the triplet contract
  batch.labels = {0, 1, 0, 1, 0, 1};
  auto base = triplet_loss(batch, ts, 0.2, {});

  std::vector<int> perm = {3, 5, 0, 1, 4, 2};  // new_index[old_index]
  EmbeddingBatch shuffled;
  shuffled.vectors = Matrix::Zero(6, 3);
  shuffled.labels.resize(6);
  for (int i = 0; i < 6; ++i) {
    shuffled.vectors.row(perm[i]) = batch.vectors.row(i);
    shuffled.labels[perm[i]] = batch.labels[i];
  }
  TripletIndexSet ts2;
  for (auto t : ts.triplets) ts2.triplets.push_back({perm[t.anchor], perm[t.positive], perm[t.negative]});
  auto moved = triplet_loss(shuffled, ts2, 0.2, {});
  CHECK(moved.value == doctest::Approx(base.value).epsilon(1e-12));
}

TEST_CASE("gradients match finite differences for every loss") {
  for (LossKind kind : single_model_losses()) {
    int clean = 0;
    for (std::uint64_t seed = 1; seed <= 40 && clean < 3; ++seed) {
      auto fixture = make_loss_fixture(kind, seed, 12, 4);
      auto rep = grad_check(fixture.evaluator, fixture.batch, 1e-5, 1e-4);
      if (rep.skipped_near_kink) continue;
      INFO(loss_name(kind), " seed ", seed, " worst ", rep.worst_coordinate, " err ",
           rep.max_rel_error);
      CHECK(rep.pass);
      ++clean;
    }
    INFO(loss_name(kind));
    CHECK(clean == 3);
  }
}

TEST_CASE("zero gradient where every margin is satisfied") {
  // separated classes, triplet margin satisfied: flat region
  Matrix m(4, 2);
  m << 0, 0, 0.1, 0, 50, 0, 50.1, 0;
  auto batch = make_batch(m, {0, 0, 1, 1});
  TripletIndexSet ts;
  ts.triplets = {{0, 1, 2}, {2, 3, 0}};
  auto r = triplet_loss(batch, ts, 0.5, {Metric::Euclidean, false});
  CHECK(r.value == doctest::Approx(0.0));
  CHECK(r.grad_embeddings.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}
